"""Desk-scale frozen transformer encoder plus synthetic teacher-student tasks.

The encoder is a standard pre-norm stack: per layer, multi-head self
attention (softmax(Q K^T / sqrt(D/H)) V, heads concatenated, output
projection) and a two-layer GELU MLP, residuals around both, then a final
layer norm, mean pooling over the sequence, and a linear head. All
weights are frozen at construction (the arrays are marked read-only);
adapters are the only trainable state anywhere.

Adapters hook the per-layer Q/K/V/O projections. Each projection call
routes through the adapter's site correction when its module name is
targeted, indexed by (layer, module-position); the forward pass keeps an
activation tape so the training module can run the reverse pass by hand.

Synthetic tasks make fine-tuning checkable: the teacher is the same
frozen model with a known random low-rank correction added at Q/V, so a
student adapter whose rank dominates the teacher's can drive the eval
error to zero in principle.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .adapter import AdapterSpec, MetaTTAdapter, delta_matrix, random_adapter
from .tt import TensorTrain

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class BatchError(ValueError):
    """Token batch violates the model's vocabulary or length limits."""


@dataclass(frozen=True)
class ModelConfig:
    """Encoder dimensions. ffn_dim defaults to 4*hidden_dim when left at 0."""

    num_layers: int = 3
    hidden_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 0
    vocab_size: int = 64
    max_seq_len: int = 16
    out_dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim",
                     "vocab_size", "max_seq_len", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"num_heads {self.num_heads} must divide hidden_dim {self.hidden_dim}"
            )


@dataclass
class FrozenTransformer:
    """Weight arrays, stacked over layers where applicable; all read-only."""

    cfg: ModelConfig
    emb: np.ndarray          # (V, D)
    wq: np.ndarray           # (L, D, D)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray         # (L, D, F)
    w_down: np.ndarray       # (L, F, D)
    ln1_scale: np.ndarray    # (L, D)
    ln1_offset: np.ndarray
    ln2_scale: np.ndarray
    ln2_offset: np.ndarray
    lnf_scale: np.ndarray    # (D,)
    lnf_offset: np.ndarray
    w_head: np.ndarray       # (D, out_dim)
    b_head: np.ndarray       # (out_dim,)

    _PROJ = {"q": "wq", "k": "wk", "v": "wv", "o": "wo"}

    def weights(self):
        for name in ("emb", "wq", "wk", "wv", "wo", "w_up", "w_down",
                     "ln1_scale", "ln1_offset", "ln2_scale", "ln2_offset",
                     "lnf_scale", "lnf_offset", "w_head", "b_head"):
            yield name, getattr(self, name)

    def projection(self, name: str, layer: int) -> np.ndarray:
        return getattr(self, self._PROJ[name])[layer]


def build_frozen_model(cfg: ModelConfig) -> FrozenTransformer:
    """Draw every weight from seeded normal(0, 1/sqrt(D)) and freeze it.

    Layer-norm scales start at 1 and offsets at 0 so the normalization is
    neutral; the head bias starts at 0.
    """
    rng = np.random.default_rng(cfg.seed)
    L, D, F = cfg.num_layers, cfg.hidden_dim, cfg.ffn_dim
    std = 1.0 / np.sqrt(D)

    def draw(*shape):
        return rng.normal(0.0, std, size=shape)

    model = FrozenTransformer(
        cfg=cfg,
        emb=draw(cfg.vocab_size, D),
        wq=draw(L, D, D), wk=draw(L, D, D), wv=draw(L, D, D), wo=draw(L, D, D),
        w_up=draw(L, D, F), w_down=draw(L, F, D),
        ln1_scale=np.ones((L, D)), ln1_offset=np.zeros((L, D)),
        ln2_scale=np.ones((L, D)), ln2_offset=np.zeros((L, D)),
        lnf_scale=np.ones(D), lnf_offset=np.zeros(D),
        w_head=draw(D, cfg.out_dim), b_head=np.zeros(cfg.out_dim),
    )
    for _, arr in model.weights():
        arr.flags.writeable = False
    return model


def frozen_digest(model: FrozenTransformer) -> str:
    """SHA-256 over all weight bytes; used to audit frozen-weight immutability."""
    h = hashlib.sha256()
    for name, arr in model.weights():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class AdaptedModel:
    """A frozen model bound to one adapter; forward convenience wrapper."""

    model: FrozenTransformer
    adapter: object

    def forward(self, token_ids, task: int = None) -> np.ndarray:
        out, _ = model_forward(self.model, self.adapter, token_ids, task=task)
        return out


def inject_adapter(model: FrozenTransformer, adapter) -> AdaptedModel:
    """Bind an adapter after checking its dims against the model."""
    spec = adapter.spec
    D = model.cfg.hidden_dim
    if spec.d_in != D or spec.d_out != D:
        raise ValueError(f"adapter dims ({spec.d_in}, {spec.d_out}) do not match model hidden_dim {D}")
    if spec.num_layers != model.cfg.num_layers:
        raise ValueError(
            f"adapter covers {spec.num_layers} layers, model has {model.cfg.num_layers}"
        )
    if spec.variant == "tt5d" and spec.num_heads != model.cfg.num_heads:
        raise ValueError(
            f"adapter num_heads {spec.num_heads} does not match model num_heads {model.cfg.num_heads}"
        )
    return AdaptedModel(model=model, adapter=adapter)


class Tape:
    """Activation record of one forward pass; consumed exactly once."""

    def __init__(self, model, adapter, task):
        self.model = model
        self.adapter = adapter
        self.task = task
        self.layers = []     # one record dict per encoder layer
        self.head = None
        self.batch_shape = None
        self.consumed = False

    def consume(self):
        if self.consumed:
            raise RuntimeError("tape already consumed; rerun the forward pass")
        self.consumed = True


def _layernorm(x, scale, offset):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * istd
    return xhat * scale + offset, (xhat, istd, scale)


def _layernorm_back(dy, cache):
    xhat, istd, scale = cache
    dxhat = dy * scale
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * istd


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _site_task(adapter, task):
    if adapter is not None and adapter.spec.variant == "tt4p1d":
        if task is None:
            raise ValueError("a tt4p1d adapter needs a task index for the forward pass")
        return task
    return None


def _project(model, adapter, x2d, name, layer, task, record):
    """One linear map, adapted when the adapter targets ``name``."""
    w = model.projection(name, layer)
    base = x2d @ w
    if adapter is None or name not in adapter.spec.target_modules:
        record[name] = None
        return base
    m = adapter.spec.module_index(name)
    delta, cache = adapter.site_forward(x2d, layer, m, _site_task(adapter, task))
    record[name] = cache
    return base + adapter.alpha * delta


def model_forward(model: FrozenTransformer, adapter, token_ids, task: int = None):
    """Run the encoder; returns (outputs, tape).

    ``adapter`` may be None (plain frozen forward), a MetaTTAdapter, or a
    MergedAdapter (forward only). Outputs are (B, out_dim).
    """
    cfg = model.cfg
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise BatchError(f"token batch must be 2-D (batch, seq), got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise BatchError(f"token ids must be integers, got dtype {ids.dtype}")
    B, S = ids.shape
    if S > cfg.max_seq_len:
        raise BatchError(f"sequence length {S} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise BatchError(
            f"token ids must lie in [0, {cfg.vocab_size}), got range [{ids.min()}, {ids.max()}]"
        )

    D, H = cfg.hidden_dim, cfg.num_heads
    dh = D // H
    tau = 1.0 / np.sqrt(dh)
    tape = Tape(model, adapter, task)
    tape.batch_shape = (B, S)

    x = model.emb[ids]  # (B, S, D)
    for l in range(cfg.num_layers):
        rec = {"layer": l}
        z1, rec["ln1"] = _layernorm(x, model.ln1_scale[l], model.ln1_offset[l])
        z1f = z1.reshape(B * S, D)
        rec["z1f"] = z1f
        q = _project(model, adapter, z1f, "q", l, task, rec)
        k = _project(model, adapter, z1f, "k", l, task, rec)
        v = _project(model, adapter, z1f, "v", l, task, rec)
        # (B*S, D) -> (B, H, S, dh)
        qh = q.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        attn = softmax(tau * (qh @ kh.transpose(0, 1, 3, 2)))  # (B, H, S, S)
        ctx = attn @ vh                                        # (B, H, S, dh)
        rec["qh"], rec["kh"], rec["vh"], rec["attn"] = qh, kh, vh, attn
        ctxf = ctx.transpose(0, 2, 1, 3).reshape(B * S, D)
        rec["ctxf"] = ctxf
        o = _project(model, adapter, ctxf, "o", l, task, rec)
        x = x + o.reshape(B, S, D)

        z2, rec["ln2"] = _layernorm(x, model.ln2_scale[l], model.ln2_offset[l])
        z2f = z2.reshape(B * S, D)
        u = z2f @ model.w_up[l]
        g = gelu(u)
        rec["z2f"], rec["u"], rec["g"] = z2f, u, g
        x = x + (g @ model.w_down[l]).reshape(B, S, D)
        tape.layers.append(rec)

    zf, lnf_cache = _layernorm(x, model.lnf_scale, model.lnf_offset)
    pooled = zf.mean(axis=1)  # (B, D)
    out = pooled @ model.w_head + model.b_head
    tape.head = {"lnf": lnf_cache}
    return out, tape


# -- synthetic teacher-student tasks -----------------------------------


@dataclass
class SyntheticTask:
    """Inputs plus teacher-produced targets, bit-reproducible from seed."""

    kind: str
    train_inputs: np.ndarray
    train_targets: np.ndarray
    eval_inputs: np.ndarray
    eval_targets: np.ndarray
    teacher: MetaTTAdapter
    teacher_delta_spec: AdapterSpec = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("teacher_regression", "teacher_classification"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.teacher_delta_spec is None and self.teacher is not None:
            self.teacher_delta_spec = self.teacher.spec


def _site_weight_norms(model: FrozenTransformer, target_modules) -> np.ndarray:
    L = model.cfg.num_layers
    norms = np.empty((L, len(target_modules)))
    for l in range(L):
        for m, name in enumerate(target_modules):
            norms[l, m] = np.linalg.norm(model.projection(name, l))
    return norms


def balance_teacher_scale(model: FrozenTransformer, teacher: MetaTTAdapter,
                          delta_scale: float) -> None:
    """Rescale the teacher's layer and module cores toward per-site norms.

    Targets ||alpha * delta(l, m)||_F = delta_scale * ||W(l, m)||_F at
    every adapted site. A single shared train has one scale knob per
    layer slice and one per module slice, so the system is solved in the
    least-squares sense on log ratios (exact whenever the log-ratio
    matrix is additive in layer and module).
    """
    spec = teacher.spec
    w_norms = _site_weight_norms(model, spec.target_modules)
    d_norms = np.empty_like(w_norms)
    for l in range(spec.num_layers):
        for m in range(spec.num_modules):
            d_norms[l, m] = np.linalg.norm(delta_matrix(teacher, l, m))
    if np.any(d_norms == 0.0):
        raise ValueError("teacher delta is singular at some site; cannot balance scales")
    log_ratio = np.log(delta_scale * w_norms / (spec.alpha * d_norms))
    grand = log_ratio.mean()
    a = log_ratio.mean(axis=1) - grand / 2.0
    b = log_ratio.mean(axis=0) - grand / 2.0
    layer_core = teacher.train.cores[1]
    module_core = teacher.train.cores[2]
    for l in range(spec.num_layers):
        layer_core[:, l, :] *= np.exp(a[l])
    for m in range(spec.num_modules):
        module_core[:, m, :] *= np.exp(b[m])


def _draw_inputs(rng, n: int, cfg: ModelConfig) -> np.ndarray:
    return rng.integers(0, cfg.vocab_size, size=(n, cfg.max_seq_len), dtype=np.int64)


def _teacher_targets(model, teacher, inputs, kind, task=None):
    out, _ = model_forward(model, teacher, inputs, task=task)
    if kind == "teacher_classification":
        return np.argmax(out, axis=1).astype(np.int64)
    return out


def make_teacher_task(model: FrozenTransformer, kind: str = "teacher_regression",
                      delta_rank: int = 4, delta_scale: float = 0.1,
                      n_train: int = 256, n_eval: int = 128, seed: int = 0,
                      target_modules=("q", "v"), alpha: float = 1.0) -> SyntheticTask:
    """Build a task whose targets come from a known low-rank teacher.

    The teacher is the frozen model plus a random rank-``delta_rank``
    4-mode correction at ``target_modules``, rescaled so each site's
    correction norm sits near delta_scale times the frozen weight norm.
    delta_scale = 0 zeroes the correction outright, so the targets equal
    the plain frozen outputs.
    """
    if delta_rank < 1:
        raise ValueError(f"delta_rank must be >= 1, got {delta_rank}")
    cfg = model.cfg
    spec = AdapterSpec(
        variant="tt4d", d_in=cfg.hidden_dim, d_out=cfg.hidden_dim,
        num_layers=cfg.num_layers, target_modules=tuple(target_modules),
        bond_ranks=delta_rank, alpha=alpha,
    )
    seeds = np.random.SeedSequence(seed).spawn(3)
    teacher = random_adapter(spec, np.random.default_rng(seeds[0]), scale=1.0)
    if delta_scale == 0.0:
        teacher.train.cores[0][:] = 0.0
    else:
        balance_teacher_scale(model, teacher, delta_scale)
    train_inputs = _draw_inputs(np.random.default_rng(seeds[1]), n_train, cfg)
    eval_inputs = _draw_inputs(np.random.default_rng(seeds[2]), n_eval, cfg)
    return SyntheticTask(
        kind=kind,
        train_inputs=train_inputs,
        train_targets=_teacher_targets(model, teacher, train_inputs, kind),
        eval_inputs=eval_inputs,
        eval_targets=_teacher_targets(model, teacher, eval_inputs, kind),
        teacher=teacher,
        seed=seed,
    )


def make_orthogonal_teacher_tasks(model: FrozenTransformer, num_tasks: int,
                                  kind: str = "teacher_regression",
                                  delta_rank: int = 4, delta_scale: float = 0.1,
                                  n_train: int = 256, n_eval: int = 128,
                                  seed: int = 0, target_modules=("q", "v"),
                                  alpha: float = 1.0) -> list:
    """Teacher tasks whose corrections act on mutually orthogonal input subspaces.

    Task t's first core holds columns [t*r, (t+1)*r) of one shared
    orthonormal frame, so the row spaces of different teachers' deltas
    are orthogonal and no single shared correction can serve two tasks.
    Requires num_tasks * delta_rank <= hidden_dim.
    """
    cfg = model.cfg
    D = cfg.hidden_dim
    if num_tasks * delta_rank > D:
        raise ValueError(
            f"num_tasks * delta_rank = {num_tasks * delta_rank} exceeds hidden_dim {D}"
        )
    spec = AdapterSpec(
        variant="tt4d", d_in=D, d_out=D, num_layers=cfg.num_layers,
        target_modules=tuple(target_modules), bond_ranks=delta_rank, alpha=alpha,
    )
    seeds = np.random.SeedSequence(seed).spawn(1 + 2 * num_tasks)
    frame_rng = np.random.default_rng(seeds[0])
    frame, _ = np.linalg.qr(frame_rng.normal(size=(D, num_tasks * delta_rank)))
    tasks = []
    for t in range(num_tasks):
        rng = np.random.default_rng(seeds[1 + 2 * t])
        teacher = random_adapter(spec, rng, scale=1.0)
        first = frame[:, t * delta_rank:(t + 1) * delta_rank]
        teacher.train.cores[0] = np.ascontiguousarray(first[None, :, :])
        if delta_scale == 0.0:
            teacher.train.cores[0][:] = 0.0
        else:
            balance_teacher_scale(model, teacher, delta_scale)
        in_rng = np.random.default_rng(seeds[2 + 2 * t])
        train_inputs = _draw_inputs(in_rng, n_train, cfg)
        eval_inputs = _draw_inputs(in_rng, n_eval, cfg)
        tasks.append(SyntheticTask(
            kind=kind,
            train_inputs=train_inputs,
            train_targets=_teacher_targets(model, teacher, train_inputs, kind),
            eval_inputs=eval_inputs,
            eval_targets=_teacher_targets(model, teacher, eval_inputs, kind),
            teacher=teacher,
            seed=seed,
        ))
    return tasks
