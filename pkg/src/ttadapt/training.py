"""Training machinery: hand-rolled reverse mode, AdamW, loops, diagnostics.

Gradients flow only to adapter cores. The reverse pass walks the
activation tape produced by model_forward, mirrors each operation, and
accumulates per-core gradients through the adapter's site caches; frozen
weights never receive an update (their arrays are read-only besides).

Compression interleaves with optimization: when the rank schedule fires
at an epoch, the sweep runs right after that training epoch and before
evaluation, and the Adam moments are re-initialized at the new core
shapes (the step counter restarts with them; the warmup counter does
not).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adapter import MetaTTAdapter
from .dmrg import RankSchedule, dmrg_sweep, schedule_lookup
from .model import (FrozenTransformer, _layernorm_back, frozen_digest,
                    gelu_grad, model_forward)

EVAL_BATCH = 256


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.06
    clip_max_norm: float = None
    batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.clip_max_norm is not None and self.clip_max_norm <= 0:
            raise ValueError(f"clip_max_norm must be positive, got {self.clip_max_norm}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")


class OptimizerState:
    """Per-core Adam moments plus step counters.

    ``step`` drives bias correction and resets with the moments after a
    sweep; ``warmup_step`` counts every optimizer step of the run and is
    never reset, so the warmup ramp survives compressions.
    """

    def __init__(self, params):
        self.reinit(params)
        self.warmup_step = 0

    def reinit(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step = 0


def adamw_step(state: OptimizerState, params, grads, cfg: OptimizerConfig,
               lr_scale: float = 1.0):
    """Bias-corrected AdamW with decoupled weight decay, in place."""
    if len(params) != len(state.m):
        raise ValueError(f"{len(params)} params vs {len(state.m)} moment slots; moments not re-initialized?")
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise ValueError(
                f"param shape {p.shape} does not match moment shape {m.shape}; moments not re-initialized after a sweep?"
            )
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    lr = cfg.learning_rate * lr_scale
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        if cfg.weight_decay != 0.0:
            p -= lr * cfg.weight_decay * p
    return params, state


def clip_gradients(grads, max_norm: float):
    """Global-norm clip across all cores, in place."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return grads


def _slice_diag(core_slice, grad_slice) -> float:
    nnz = np.count_nonzero(core_slice)
    if nnz == 0:
        return 0.0
    return float(np.linalg.norm(grad_slice) / np.sqrt(nnz))


def core_gradient_norms(adapter: MetaTTAdapter, grads) -> tuple:
    """Per-core normalized gradient diagnostic: ||grad||_F / sqrt(nnz(core)).

    Stacked cores (the interior TT cores, and each LoRA factor across its
    sites) report the average of the per-slice values; a core or slice
    with no nonzero entries contributes 0. Returns ((label, value), ...)
    in core order.
    """
    labels = adapter.spec.core_labels()
    params = adapter.params()
    out = []
    if adapter.spec.variant == "lora":
        for label, p, g in zip(labels, params, grads):
            vals = [
                _slice_diag(p[l, m], g[l, m])
                for l in range(p.shape[0]) for m in range(p.shape[1])
            ]
            out.append((label, float(np.mean(vals))))
        return tuple(out)
    last = len(params) - 1
    for k, (label, p, g) in enumerate(zip(labels, params, grads)):
        if k == 0 or k == last:
            out.append((label, _slice_diag(p, g)))
        else:
            vals = [_slice_diag(p[:, i, :], g[:, i, :]) for i in range(p.shape[1])]
            out.append((label, float(np.mean(vals))))
    return tuple(out)


# -- losses ------------------------------------------------------------


def mse_loss(pred: np.ndarray, targets: np.ndarray):
    """Mean squared error over every entry; returns (loss, dloss/dpred)."""
    diff = pred - targets
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy of logits (N, C) against integer labels (N,)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    n = logits.shape[0]
    picked = shifted[np.arange(n), labels]
    loss = float(np.mean(logz - picked))
    p = np.exp(shifted - logz[:, None])
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _loss_fn(kind: str):
    if kind == "teacher_classification":
        return cross_entropy_loss
    return mse_loss


# -- reverse mode ------------------------------------------------------


def _project_back(tape, rec, name, layer, d_y, grads):
    """Backward of one (possibly adapted) projection; returns d_input."""
    model = tape.model
    d_x = d_y @ model.projection(name, layer).T
    cache = rec[name]
    if cache is not None:
        d_x = d_x + tape.adapter.site_backward(cache, d_y, grads)
    return d_x


def backward(tape, d_out: np.ndarray):
    """Gradients of the scalar loss w.r.t. every trainable adapter core.

    ``d_out`` is the loss gradient at the model outputs (B, out_dim).
    The tape is consumed; calling twice raises.
    """
    tape.consume()
    adapter = tape.adapter
    if adapter is None or not isinstance(adapter, MetaTTAdapter):
        raise ValueError("backward needs a tape recorded with a trainable adapter")
    model = tape.model
    cfg = model.cfg
    B, S = tape.batch_shape
    D, H = cfg.hidden_dim, cfg.num_heads
    dh = D // H
    tau = 1.0 / np.sqrt(dh)
    grads = adapter.grads_like()

    d_pooled = np.asarray(d_out) @ model.w_head.T          # (B, D)
    d_zf = np.repeat(d_pooled[:, None, :], S, axis=1) / S  # mean-pool
    d_x = _layernorm_back(d_zf, tape.head["lnf"])

    for rec in reversed(tape.layers):
        l = rec["layer"]
        # MLP block: x_out = x_mid + gelu(ln2(x_mid) @ up) @ down
        d_flat = d_x.reshape(B * S, D)
        d_g = d_flat @ model.w_down[l].T
        d_u = d_g * gelu_grad(rec["u"])
        d_z2f = d_u @ model.w_up[l].T
        d_x = d_x + _layernorm_back(d_z2f.reshape(B, S, D), rec["ln2"])

        # attention block: x_mid = x_in + O(ctx)
        d_o = d_x.reshape(B * S, D)
        d_ctxf = _project_back(tape, rec, "o", l, d_o, grads)
        d_ctx = d_ctxf.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        attn, vh = rec["attn"], rec["vh"]
        d_attn = d_ctx @ vh.transpose(0, 1, 3, 2)
        d_vh = attn.transpose(0, 1, 3, 2) @ d_ctx
        d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
        d_qh = tau * (d_scores @ rec["kh"])
        d_kh = tau * (d_scores.transpose(0, 1, 3, 2) @ rec["qh"])
        d_z1f = np.zeros((B * S, D))
        for name, d_heads in (("q", d_qh), ("k", d_kh), ("v", d_vh)):
            d_proj = d_heads.transpose(0, 2, 1, 3).reshape(B * S, D)
            d_z1f += _project_back(tape, rec, name, l, d_proj, grads)
        d_x = d_x + _layernorm_back(d_z1f.reshape(B, S, D), rec["ln1"])
    return grads


# -- reporting ---------------------------------------------------------


@dataclass
class MetricsRow:
    """One (epoch, task) record; also the CSV row schema.

    split is "init" for the pre-training evaluation (epoch 0, no train
    loss) and "epoch" for rows written after each training epoch. metric
    is the eval-set value: MSE for regression tasks, accuracy for
    classification. grad_norms holds (core label, value) pairs averaged
    over the epoch's minibatches.
    """

    epoch: int
    step: int
    split: str
    task_id: int
    loss: float
    metric: float
    ranks: tuple
    param_count: int
    grad_norms: tuple = ()
    wallclock_s: float = None


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    diverged: bool = False

    def task_rows(self, task_id: int = 0) -> list:
        return [r for r in self.rows if r.task_id == task_id]

    def eval_series(self, task_id: int = 0) -> list:
        """(epoch, metric) pairs for one task, epoch 0 included."""
        return [(r.epoch, r.metric) for r in self.task_rows(task_id)]

    def metric_at(self, epoch: int, task_id: int = 0) -> float:
        for r in self.task_rows(task_id):
            if r.epoch == epoch:
                return r.metric
        raise KeyError(f"no row for epoch {epoch}, task {task_id}")

    def final_metric(self, task_id: int = 0) -> float:
        rows = self.task_rows(task_id)
        if not rows:
            raise KeyError(f"no rows for task {task_id}")
        return rows[-1].metric


def _floats_equal(a, b) -> bool:
    if a is None or b is None:
        return (a is None) == (b is None)
    fa, fb = float(a), float(b)
    if np.isnan(fa) or np.isnan(fb):
        return np.isnan(fa) and np.isnan(fb)
    return fa == fb


def rows_equal(a: MetricsRow, b: MetricsRow, ignore_wallclock: bool = True) -> bool:
    if (a.epoch, a.step, a.split, a.task_id, a.ranks, a.param_count) != \
            (b.epoch, b.step, b.split, b.task_id, b.ranks, b.param_count):
        return False
    if not (_floats_equal(a.loss, b.loss) and _floats_equal(a.metric, b.metric)):
        return False
    if len(a.grad_norms) != len(b.grad_norms):
        return False
    for (la, va), (lb, vb) in zip(a.grad_norms, b.grad_norms):
        if la != lb or not _floats_equal(va, vb):
            return False
    if not ignore_wallclock and not _floats_equal(a.wallclock_s, b.wallclock_s):
        return False
    return True


def reports_equal(a: TrainReport, b: TrainReport, ignore_wallclock: bool = True) -> bool:
    """Byte-level report equality with wall-clock columns masked by default."""
    return (a.diverged == b.diverged and len(a.rows) == len(b.rows)
            and all(rows_equal(ra, rb, ignore_wallclock) for ra, rb in zip(a.rows, b.rows)))


# -- loops -------------------------------------------------------------


def current_ranks(adapter: MetaTTAdapter) -> tuple:
    if adapter.spec.variant == "lora":
        return adapter.spec.bond_ranks
    return adapter.train.bond_ranks


def evaluate(model, adapter, task, adapter_task=None, batch_size: int = EVAL_BATCH):
    """(eval loss, eval metric) over the task's eval split.

    Regression reports MSE for both; classification reports mean cross
    entropy and accuracy.
    """
    loss_fn = _loss_fn(task.kind)
    n = len(task.eval_inputs)
    sse = 0.0
    ce_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        x = task.eval_inputs[start:start + batch_size]
        y = task.eval_targets[start:start + batch_size]
        out, _ = model_forward(model, adapter, x, task=adapter_task)
        if task.kind == "teacher_classification":
            loss, _ = loss_fn(out, y)
            ce_sum += loss * len(x)
            correct += int(np.sum(np.argmax(out, axis=1) == y))
        else:
            sse += float(np.sum((out - y) ** 2))
    if task.kind == "teacher_classification":
        return ce_sum / n, correct / n
    mse = sse / (n * model.cfg.out_dim)
    return mse, mse


def _batches(n: int, batch_size: int):
    return range(0, n, batch_size)


def _default_task_index(adapter, explicit):
    if adapter.spec.variant == "tt4p1d":
        return 0 if explicit is None else explicit
    return None


def _warmup_steps(cfg: OptimizerConfig, total_steps: int) -> int:
    return int(np.ceil(cfg.warmup_ratio * total_steps))


def _lr_scale(state: OptimizerState, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, state.warmup_step / warmup_steps)


def _apply_schedule(adapter, schedule, epoch, state):
    if schedule is None:
        return False
    targets = schedule_lookup(schedule, epoch)
    if targets is None:
        return False
    if adapter.spec.variant == "lora":
        raise ValueError("rank schedules apply to tensor-train adapters, not lora")
    n_bonds = adapter.train.order - 1
    if len(targets) == 1:
        targets = targets * n_bonds
    dmrg_sweep(adapter.train, targets)
    state.reinit(adapter.params())
    return True


def _mean_diag(diag_sums, count):
    if count == 0:
        return ()
    return tuple((label, float(total / count)) for label, total in diag_sums)


def _accumulate_diag(diag_sums, diag):
    if diag_sums is None:
        return [[label, value] for label, value in diag]
    for slot, (_, value) in zip(diag_sums, diag):
        slot[1] += value
    return diag_sums


def train_run(model: FrozenTransformer, adapter: MetaTTAdapter, task,
              opt_cfg: OptimizerConfig, epochs: int,
              schedule: RankSchedule = None, seed: int = 0,
              stop_at_eval_loss: float = None, task_id: int = 0,
              adapter_task: int = None) -> TrainReport:
    """Single-task fine-tuning loop.

    Per epoch: seeded shuffle, minibatch forward/backward/(clip)/step
    with linear warmup; a scheduled sweep runs after the epoch's steps
    and before its evaluation, with Adam moments re-initialized. Epoch 0
    is an evaluation-only row. ``stop_at_eval_loss`` ends the run early
    once the eval loss reaches the threshold; a non-finite train loss
    marks the report diverged and ends the run.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be nonnegative, got {epochs}")
    report = TrainReport()
    if epochs == 0:
        return report
    digest0 = frozen_digest(model)
    a_task = _default_task_index(adapter, adapter_task)
    loss_fn = _loss_fn(task.kind)
    params = adapter.params()
    state = OptimizerState(params)
    rng = np.random.default_rng(seed)
    n = len(task.train_inputs)
    steps_per_epoch = len(list(_batches(n, opt_cfg.batch_size)))
    warmup_steps = _warmup_steps(opt_cfg, epochs * steps_per_epoch)

    _, metric0 = evaluate(model, adapter, task, a_task)
    report.rows.append(MetricsRow(
        epoch=0, step=0, split="init", task_id=task_id, loss=None,
        metric=metric0, ranks=current_ranks(adapter),
        param_count=adapter.param_count()))

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        losses = []
        diag_sums = None
        for start in _batches(n, opt_cfg.batch_size):
            idx = perm[start:start + opt_cfg.batch_size]
            out, tape = model_forward(model, adapter, task.train_inputs[idx], task=a_task)
            loss, d_out = loss_fn(out, task.train_targets[idx])
            losses.append(loss)
            if not np.isfinite(loss):
                report.diverged = True
                break
            grads = backward(tape, d_out)
            if opt_cfg.clip_max_norm is not None:
                clip_gradients(grads, opt_cfg.clip_max_norm)
            diag_sums = _accumulate_diag(diag_sums, core_gradient_norms(adapter, grads))
            state.warmup_step += 1
            adamw_step(state, adapter.params(), grads, opt_cfg, _lr_scale(state, warmup_steps))

        _apply_schedule(adapter, schedule, epoch, state)
        eval_loss, metric = evaluate(model, adapter, task, a_task)
        report.rows.append(MetricsRow(
            epoch=epoch, step=state.warmup_step, split="epoch", task_id=task_id,
            loss=float(np.mean(losses)) if losses else None, metric=metric,
            ranks=current_ranks(adapter), param_count=adapter.param_count(),
            grad_norms=_mean_diag(diag_sums, len(losses) if not report.diverged else len(losses) - 1),
            wallclock_s=time.perf_counter() - t0))
        if report.diverged:
            break
        if stop_at_eval_loss is not None and eval_loss <= stop_at_eval_loss:
            break

    if frozen_digest(model) != digest0:
        raise RuntimeError("frozen weights changed during training")
    return report


def joint_train_run(model: FrozenTransformer, adapter: MetaTTAdapter, tasks,
                    opt_cfg: OptimizerConfig, epochs: int, seed: int = 0,
                    schedule: RankSchedule = None) -> TrainReport:
    """Joint multi-task loop: per step, one minibatch per task, losses summed.

    A tt4p1d adapter routes task k through task-core slice k; shared 4D
    or LoRA baselines see every task through the same correction. Rows
    are emitted per (epoch, task) with per-task train loss, eval metric,
    and gradient diagnostics.
    """
    if epochs < 0:
        raise ValueError(f"epochs must be nonnegative, got {epochs}")
    T = len(tasks)
    if T == 0:
        raise ValueError("joint_train_run needs at least one task")
    if adapter.spec.variant == "tt4p1d" and adapter.spec.num_tasks < T:
        raise IndexError(f"adapter covers {adapter.spec.num_tasks} tasks, got {T}")
    report = TrainReport()
    if epochs == 0:
        return report
    digest0 = frozen_digest(model)
    needs_task = adapter.spec.variant == "tt4p1d"
    loss_fns = [_loss_fn(t.kind) for t in tasks]
    state = OptimizerState(adapter.params())
    rng = np.random.default_rng(seed)
    n_min = min(len(t.train_inputs) for t in tasks)
    steps_per_epoch = len(list(_batches(n_min, opt_cfg.batch_size)))
    warmup_steps = _warmup_steps(opt_cfg, epochs * steps_per_epoch)

    for k, task in enumerate(tasks):
        _, metric0 = evaluate(model, adapter, task, k if needs_task else None)
        report.rows.append(MetricsRow(
            epoch=0, step=0, split="init", task_id=k, loss=None, metric=metric0,
            ranks=current_ranks(adapter), param_count=adapter.param_count()))

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        perms = [rng.permutation(len(t.train_inputs)) for t in tasks]
        losses = [[] for _ in tasks]
        diag_sums = [None] * T
        for start in _batches(n_min, opt_cfg.batch_size):
            grads = adapter.grads_like()
            bad = False
            for k, task in enumerate(tasks):
                idx = perms[k][start:start + opt_cfg.batch_size]
                out, tape = model_forward(
                    model, adapter, task.train_inputs[idx],
                    task=k if needs_task else None)
                loss, d_out = loss_fns[k](out, task.train_targets[idx])
                losses[k].append(loss)
                if not np.isfinite(loss):
                    bad = True
                    break
                task_grads = backward(tape, d_out)
                diag_sums[k] = _accumulate_diag(
                    diag_sums[k], core_gradient_norms(adapter, task_grads))
                for g, tg in zip(grads, task_grads):
                    g += tg
            if bad:
                report.diverged = True
                break
            if opt_cfg.clip_max_norm is not None:
                clip_gradients(grads, opt_cfg.clip_max_norm)
            state.warmup_step += 1
            adamw_step(state, adapter.params(), grads, opt_cfg, _lr_scale(state, warmup_steps))

        _apply_schedule(adapter, schedule, epoch, state)
        elapsed = time.perf_counter() - t0
        for k, task in enumerate(tasks):
            _, metric = evaluate(model, adapter, task, k if needs_task else None)
            n_steps = len(losses[k]) if losses[k] else 0
            report.rows.append(MetricsRow(
                epoch=epoch, step=state.warmup_step, split="epoch", task_id=k,
                loss=float(np.mean(losses[k])) if losses[k] else None, metric=metric,
                ranks=current_ranks(adapter), param_count=adapter.param_count(),
                grad_norms=_mean_diag(diag_sums[k], n_steps),
                wallclock_s=elapsed))
        if report.diverged:
            break

    if frozen_digest(model) != digest0:
        raise RuntimeError("frozen weights changed during training")
    return report


# -- verification ------------------------------------------------------


def finite_difference_gradcheck(model: FrozenTransformer, adapter: MetaTTAdapter,
                                inputs, targets, kind: str = "teacher_regression",
                                eps: float = 1e-6) -> float:
    """Max relative error between backward and central differences.

    Every entry of every trainable tensor is perturbed; relative error
    uses denominator max(1, |analytic|).
    """
    loss_fn = _loss_fn(kind)
    a_task = _default_task_index(adapter, None)

    def loss_at():
        out, _ = model_forward(model, adapter, inputs, task=a_task)
        return loss_fn(out, targets)[0]

    out, tape = model_forward(model, adapter, inputs, task=a_task)
    _, d_out = loss_fn(out, targets)
    grads = backward(tape, d_out)

    worst = 0.0
    for p, g in zip(adapter.params(), grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            keep = flat_p[i]
            flat_p[i] = keep + eps
            hi = loss_at()
            flat_p[i] = keep - eps
            lo = loss_at()
            flat_p[i] = keep
            fd = (hi - lo) / (2.0 * eps)
            rel = abs(fd - flat_g[i]) / max(1.0, abs(flat_g[i]))
            worst = max(worst, rel)
    return worst
