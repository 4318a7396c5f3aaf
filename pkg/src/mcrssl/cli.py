"""Command line: ``pretrain``, ``probe``, ``gradcheck`` and ``export-curves``.

Exit codes: 0 success, 1 gradient check failure, 2 invalid config,
3 non-finite loss, 4 incompatible checkpoint version, 5 malformed metrics
file, 6 truncated checkpoint, 7 checkpoint name mismatch.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import checkpoint as ckpt
from .config import Config, ConfigError, config_from_dict, load_config

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_NAN = 3
EXIT_VERSION = 4
EXIT_METRICS = 5

CURVE_COLUMNS = ["step", "run_id", "L_pred1", "L_pred2", "L_mcr", "L_total", "τ"]


def _thread_limit():
    """Cap BLAS worker threads at ``MCR_THREADS`` (default 1)."""
    raw = os.environ.get("MCR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("MCR_THREADS", f"expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("MCR_THREADS", "must be >= 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional at runtime
        return nullcontext()
    return threadpool_limits(limits=n)


def _load(path: str | None) -> Config:
    return load_config(path) if path else Config().validate()


def _apply_overrides(cfg: Config, args) -> Config:
    train = cfg.train
    if getattr(args, "mode", None):
        train = dataclasses.replace(train, mode=args.mode)
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
    return dataclasses.replace(cfg, train=train).validate()


def cmd_pretrain(args) -> int:
    from .trainer import Trainer

    if args.resume:
        stored, _ = ckpt.load(args.resume)
        cfg = load_config(args.config) if args.config else config_from_dict(stored)
    else:
        cfg = _load(args.config)
    cfg = _apply_overrides(cfg, args)
    run_id = args.run_id or f"{cfg.train.mode}-seed{cfg.train.seed}"
    out = Path(args.out_dir or Path("runs") / run_id)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    tr = Trainer.from_checkpoint(args.resume, cfg=cfg) if args.resume else Trainer(cfg)
    until = cfg.train.total_updates if args.until is None else args.until
    tr.run(until=until, metrics_path=out / "metrics.jsonl", checkpoint_dir=out / "checkpoints", run_id=run_id)
    tr.save(out / "final.ckpt")
    print(f"{run_id}: trained to step {tr.step}; outputs in {out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    from . import probe

    cfg = load_config(args.config) if args.config else config_from_dict(ckpt.load(args.checkpoint)[0])
    pc = cfg.probe
    which = args.upstream or pc.upstream
    up = probe.load_upstream(args.checkpoint, which)
    if args.epochs is not None:
        pc = dataclasses.replace(pc, epochs=args.epochs)
    tasks = args.task or list(pc.tasks)
    out = Path(args.out_dir or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    before = probe.upstream_checksum(up.params)
    weights = {}
    metrics = out / "probe.jsonl"
    metrics.write_text("", encoding="utf-8")
    for task in tasks:
        res = probe.probe_train(up, task, probe_cfg=pc)
        probe.append_probe_metrics(metrics, res)
        weights[task] = res.weights
        print(f"{task:<12} accuracy {res.accuracy:.4f}  chance {res.chance:.4f}  "
              f"weights {[round(float(w), 4) for w in res.weights.weights]}")
    if probe.upstream_checksum(up.params) != before:
        raise RuntimeError("upstream parameters changed during probing")
    probe.export_weight_analysis(weights, out / "weights.json")
    if args.compare:
        other = probe.load_upstream(args.compare, which)
        other_weights = {t: probe.probe_train(other, t, probe_cfg=pc).weights for t in tasks}
        names = [f"{u.config.train.mode}-seed{u.config.train.seed}" for u in (up, other)]
        if names[0] == names[1]:
            names = [names[0] + "-a", names[1] + "-b"]
        runs = {names[0]: weights, names[1]: other_weights}
        doc = probe.export_weight_comparison(runs, out / "weights_comparison.json")
        for run, per_task in doc.items():
            print(run, {t: round(v["entropy"], 4) for t, v in per_task.items()})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import failing, format_table, run_suite

    results = run_suite(trials=args.trials, seed=args.seed)
    print(format_table(results))
    bad = failing(results)
    if bad:
        print(f"gradient check failed: {', '.join(bad)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def cmd_export_curves(args) -> int:
    from .trainer import read_metrics

    rows = []
    for path in args.metrics:
        header, records = read_metrics(path)
        run_id = header.get("run_id") or Path(path).stem
        for r in records:
            rows.append([r.step, run_id, r.L_pred1, r.L_pred2, r.L_mcr, r.L_total, r.tau])
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcrssl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("pretrain", help="run teacher-student pre-training")
    pre.add_argument("--config", help="JSON config file (defaults used when omitted)")
    pre.add_argument("--mode", choices=["mcr", "baseline"])
    pre.add_argument("--seed", type=int)
    pre.add_argument("--out-dir")
    pre.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    pre.add_argument("--until", type=int, help="stop at this global step (default: total_updates)")
    pre.add_argument("--run-id")
    pre.set_defaults(func=cmd_pretrain)

    pr = sub.add_parser("probe", help="frozen-upstream layer-weight probe")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--task", action="append", help="probe task (repeatable; default from config)")
    pr.add_argument("--config", help="JSON config whose probe section overrides the checkpoint's")
    pr.add_argument("--epochs", type=int)
    pr.add_argument("--upstream", choices=["student", "teacher"], help="default: probe.upstream")
    pr.add_argument("--compare", metavar="CKPT", help="second checkpoint for a side-by-side weight export")
    pr.add_argument("--out-dir")
    pr.set_defaults(func=cmd_probe)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op")
    gc.add_argument("--trials", type=int, default=10)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    ex = sub.add_parser("export-curves", help="merge metrics JSONL files into one CSV")
    ex.add_argument("metrics", nargs="+")
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_export_curves)
    return p


def main(argv: list[str] | None = None) -> int:
    from .trainer import NonFiniteLossError

    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_NAN
    except ckpt.CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return e.code
    except ValueError as e:
        if args.command == "export-curves":
            print(f"error: {e}", file=sys.stderr)
            return EXIT_METRICS
        raise


if __name__ == "__main__":
    sys.exit(main())
