"""Command-line entry point.

Subcommands: train, dmrg-train, mtl-train, gradcheck, param-count,
export-merged, tt-roundtrip. Every command is deterministic given its
config and seeds. Exit codes: 0 success, 1 usage or config error,
2 numerical failure (divergence, SVD non-convergence, failed check),
3 I/O failure.

The output directory resolves as: --out-dir flag, else the
TTADAPT_OUT_DIR environment variable, else the config's out_dir.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .adapter import (AdapterSpec, AdapterSpecError, MetaTTAdapter, build,
                      baseline_lora_param_count, merge_for_inference,
                      random_adapter, spec_param_count)
from .config import ConfigError, RunConfig, parse_config
from .dmrg import ScheduleError, default_schedule, dmrg_sweep
from .linalg import SvdConvergenceError
from .model import (BatchError, ModelConfig, build_frozen_model,
                    make_orthogonal_teacher_tasks, make_teacher_task)
from .serialization import (CheckpointError, adapter_tensors, load_checkpoint,
                            merged_tensors, save_checkpoint, write_metrics)
from .training import (finite_difference_gradcheck, joint_train_run, train_run)
from .tt import TensorTrain, param_count, random_train, reconstruct_dense

GRADCHECK_TOL = 1e-4
ROUNDTRIP_TOL = 1e-10


def _err(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def _read_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _resolve_out_dir(args, cfg: RunConfig) -> str:
    if getattr(args, "out_dir", None):
        return args.out_dir
    return os.environ.get("TTADAPT_OUT_DIR") or cfg.out_dir


def _parse_seed_list(text: str) -> tuple:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"--seeds wants comma-separated integers, got {text!r}") from None


def _train_family(args, joint: bool) -> int:
    cfg = _read_config(args.config)
    seeds = _parse_seed_list(args.seeds) if args.seeds else cfg.seeds
    out_dir = _resolve_out_dir(args, cfg)
    os.makedirs(out_dir, exist_ok=True)
    schedule = cfg.schedule
    if args.command == "dmrg-train" and schedule is None:
        schedule = default_schedule(cfg.epochs)
    model = build_frozen_model(cfg.model)
    diverged = False
    for seed in seeds:
        adapter = build(cfg.adapter, seed=seed)
        if joint:
            tasks = make_orthogonal_teacher_tasks(
                model, cfg.task.num_tasks, kind=cfg.task.kind,
                delta_rank=cfg.task.delta_rank, delta_scale=cfg.task.delta_scale,
                n_train=cfg.task.n_train, n_eval=cfg.task.n_eval, seed=seed)
            report = joint_train_run(model, adapter, tasks, cfg.optimizer,
                                     cfg.epochs, seed=seed, schedule=schedule)
            final = sum(report.final_metric(k) for k in range(len(tasks))) if report.rows else float("nan")
            label = f"joint eval metric {final:.6g} over {len(tasks)} tasks"
        else:
            task = make_teacher_task(
                model, kind=cfg.task.kind, delta_rank=cfg.task.delta_rank,
                delta_scale=cfg.task.delta_scale, n_train=cfg.task.n_train,
                n_eval=cfg.task.n_eval, seed=seed)
            report = train_run(model, adapter, task, cfg.optimizer, cfg.epochs,
                               schedule=schedule, seed=seed)
            label = f"final eval metric {report.final_metric():.6g}" if report.rows else "no epochs"
        write_metrics(report, os.path.join(out_dir, f"metrics_seed{seed}.csv"))
        save_checkpoint(adapter_tensors(adapter),
                        os.path.join(out_dir, f"adapter_seed{seed}.mttc"))
        status = "DIVERGED" if report.diverged else "ok"
        print(f"seed {seed}: {status}, {label}")
        diverged = diverged or report.diverged
    if diverged:
        _err("at least one run diverged (non-finite loss)")
        return 2
    return 0


def _cmd_train(args) -> int:
    return _train_family(args, joint=False)


def _cmd_mtl_train(args) -> int:
    return _train_family(args, joint=True)


def _cmd_gradcheck(args) -> int:
    cfg = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32,
                      vocab_size=32, max_seq_len=6, out_dim=2, seed=args.seed)
    model = build_frozen_model(cfg)
    rng = np.random.default_rng(args.seed)
    inputs = rng.integers(0, cfg.vocab_size, size=(4, cfg.max_seq_len), dtype=np.int64)
    targets = rng.normal(size=(4, cfg.out_dim))
    specs = [
        AdapterSpec(variant="tt4d", d_in=16, d_out=16, num_layers=2, bond_ranks=3),
        AdapterSpec(variant="tt5d", d_in=16, d_out=16, num_layers=2, bond_ranks=2, num_heads=2),
        AdapterSpec(variant="tt4p1d", d_in=16, d_out=16, num_layers=2, bond_ranks=2, num_tasks=2),
        AdapterSpec(variant="lora", d_in=16, d_out=16, num_layers=2, bond_ranks=2),
    ]
    worst = 0.0
    for spec in specs:
        adapter = random_adapter(spec, np.random.default_rng(args.seed + 1), scale=0.2)
        err = finite_difference_gradcheck(model, adapter, inputs, targets)
        print(f"{spec.variant}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"overall max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    return 0 if worst <= GRADCHECK_TOL else 2


def _cmd_param_count(args) -> int:
    modules = tuple(part for part in args.modules.split(",") if part)
    spec = AdapterSpec(
        variant=args.variant, d_in=args.d, d_out=args.d, num_layers=args.layers,
        target_modules=modules, bond_ranks=args.rank,
        num_heads=args.heads, num_tasks=args.tasks)
    print(f"{args.variant} r={args.rank}: {spec_param_count(spec)}")
    if args.variant != "lora":
        baseline = baseline_lora_param_count(args.layers, len(modules), args.d, args.rank)
        print(f"lora baseline r={args.rank}: {baseline}")
    return 0


def _cmd_export_merged(args) -> int:
    cfg = _read_config(args.config)
    spec = cfg.adapter
    if spec.variant == "lora":
        _err("lora adapters are already two-matrix; export-merged applies to tensor-train variants")
        return 1
    tensors = load_checkpoint(args.checkpoint)
    cores = []
    for k in range(len(spec.mode_sizes)):
        name = f"core{k}"
        if name not in tensors:
            _err(f"checkpoint {args.checkpoint} has no tensor {name!r}; wrong config?")
            return 1
        cores.append(tensors[name])
    adapter = MetaTTAdapter(spec, train=TensorTrain(cores))
    merged = merge_for_inference(adapter)
    save_checkpoint(merged_tensors(merged), args.out)
    print(f"wrote merged adapter with {len(merged.b)} site tails to {args.out}")
    return 0


def _cmd_tt_roundtrip(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    for trial in range(args.trials):
        d = int(rng.integers(3, 6))
        modes = tuple(int(n) for n in rng.integers(2, 6, size=d))
        ranks = tuple(int(r) for r in rng.integers(2, 5, size=d - 1))
        train = random_train(modes, ranks, rng)
        before = reconstruct_dense(train)
        count_before = param_count(train)
        dmrg_sweep(train, train.bond_ranks)
        after = reconstruct_dense(train)
        rel = float(np.linalg.norm(after - before) / max(np.linalg.norm(before), 1e-300))
        ok = rel <= ROUNDTRIP_TOL and param_count(train) <= count_before
        failures += 0 if ok else 1
        print(f"trial {trial}: modes={modes} ranks={ranks} "
              f"rel_err={rel:.3e} {'ok' if ok else 'FAIL'}")
    if failures:
        print(f"FAIL: {failures}/{args.trials} trials exceeded {ROUNDTRIP_TOL:.0e}")
        return 2
    print(f"PASS: {args.trials} round trips within {ROUNDTRIP_TOL:.0e}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttadapt",
        description="Tensor-train adapter laboratory: training, compression sweeps, and format tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_train(name, help_text, fn):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--out-dir", help="override the config output directory")
        p.add_argument("--seeds", help="comma-separated seed list override")
        p.set_defaults(func=fn)

    add_train("train", "single-task fine-tuning (no rank schedule unless configured)", _cmd_train)
    add_train("dmrg-train", "fine-tuning with compression sweeps (default shrink preset)", _cmd_train)
    add_train("mtl-train", "joint multi-task fine-tuning on orthogonal teacher tasks", _cmd_mtl_train)

    p = sub.add_parser("gradcheck", help="finite-difference verification of the reverse pass")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("param-count", help="trainable parameter counts for a spec")
    p.add_argument("--variant", required=True)
    p.add_argument("--d", type=int, required=True, help="model width (d_in = d_out)")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--modules", default="q,v", help="comma-joined module names")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--heads", type=int, default=0)
    p.add_argument("--tasks", type=int, default=0)
    p.set_defaults(func=_cmd_param_count)

    p = sub.add_parser("export-merged", help="precompute per-site tails from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_merged)

    p = sub.add_parser("tt-roundtrip", help="construction/sweep/reconstruction self-test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=_cmd_tt_roundtrip)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 1
        return 0 if code == 0 else 1
    try:
        return args.func(args)
    except (ConfigError, AdapterSpecError, ScheduleError, BatchError) as exc:
        _err(str(exc))
        return 1
    except (IndexError, KeyError) as exc:
        _err(str(exc))
        return 1
    except SvdConvergenceError as exc:
        _err(str(exc))
        return 2
    except CheckpointError as exc:
        _err(str(exc))
        return 3
    except OSError as exc:
        _err(str(exc))
        return 3
    except ValueError as exc:
        _err(str(exc))
        return 1
    except RuntimeError as exc:
        _err(str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
