"""Command-line entry point: run experiments, check gradients, compare runs,
and rank domains by frozen-source difficulty.

Exit codes: 0 success, 1 gradient-check failure, 2 config/schema error,
3 numeric blow-up mid-run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, gradcheck as gradcheck_mod, streams
from .numnet import mlp_spec
from .runner import (
    ConfigError,
    NumericBlowupError,
    RunConfig,
    compare_summaries,
    load_config,
    run_experiment,
    write_artifacts,
    write_csv,
)


def _parse_seed_overrides(pairs: list[str]) -> dict[str, list[int]]:
    """task=1 schedule=2 adapt=0:1:2 -> {"task": [1], "schedule": [2], "adapt": [0,1,2]}"""
    out: dict[str, list[int]] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError("seed-overrides", f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        if key not in ("task", "schedule", "adapt"):
            raise ConfigError("seed-overrides", f"unknown seed key {key!r}")
        try:
            out[key] = [int(part) for part in raw.split(":")]
        except ValueError as exc:
            raise ConfigError("seed-overrides", f"bad seed value in {pair!r}") from exc
        if key in ("task", "schedule") and len(out[key]) != 1:
            raise ConfigError("seed-overrides", f"{key} takes exactly one seed")
    return out


def _run_one(cfg: RunConfig, out_dir: str) -> float:
    result = run_experiment(cfg)
    write_artifacts(result, out_dir)
    return result.report.overall_error


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        overrides = _parse_seed_overrides(args.seed_overrides or [])
    except ConfigError as exc:
        print(f"config error in key '{exc.key}': {exc}", file=sys.stderr)
        return 2
    if "task" in overrides:
        cfg = dataclasses.replace(cfg, seed_task=overrides["task"][0])
    if "schedule" in overrides:
        cfg = dataclasses.replace(cfg, seed_schedule=overrides["schedule"][0])
    adapt_seeds = overrides.get("adapt", [cfg.seed_adapt])
    out_root = Path(args.out or cfg.out_dir)

    jobs = []
    for seed in adapt_seeds:
        run_cfg = dataclasses.replace(cfg, seed_adapt=seed)
        out_dir = out_root if len(adapt_seeds) == 1 else out_root / f"adapt_seed_{seed}"
        jobs.append((run_cfg, str(out_dir)))

    try:
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                errors = list(pool.map(_run_one, *zip(*jobs)))
        else:
            errors = [_run_one(run_cfg, out_dir) for run_cfg, out_dir in jobs]
    except NumericBlowupError as exc:
        print(f"numeric blow-up; last good step: {exc.last_good_step}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error in key '{exc.key}': {exc}", file=sys.stderr)
        return 2
    for (run_cfg, out_dir), err in zip(jobs, errors):
        print(f"{out_dir}: variant={run_cfg.variant} setting={run_cfg.setting} "
              f"adapt_seed={run_cfg.seed_adapt} overall_error={err:.9g}")
    return 0


def cmd_gradcheck(args) -> int:
    print(f"gradient check suite  eps={args.eps:g}  seeds={args.seeds}  version={__version__}")
    try:
        results = gradcheck_mod.run_suite(eps=args.eps, seeds=args.seeds, corrupt=args.corrupt)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    ok = True
    for res in results:
        status = "ok" if res.passed else "FAIL"
        print(f"{res.name:<14} max_rel_error={res.max_rel_error:.3e}  [{status}]")
        if not res.passed:
            print(f"  failing leaf: {res.worst_leaf}")
            ok = False
    return 0 if ok else 1


def cmd_compare(args) -> int:
    summary_a = json.loads(Path(args.summary_a).read_text(encoding="utf-8"))
    summary_b = json.loads(Path(args.summary_b).read_text(encoding="utf-8"))
    try:
        rows = compare_summaries(summary_a, summary_b)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    print(f"{'domain':<28} {'error_a':>10} {'error_b':>10} {'delta':>10}")
    for row in rows:
        print(f"{row['domain']:<28} {row['error_a']:>10.4f} {row['error_b']:>10.4f} {row['delta']:>+10.4f}")
    if args.out:
        write_csv(rows, Path(args.out))
        print(f"wrote {args.out}")
    return 0


def cmd_rank(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error in key '{exc.key}': {exc}", file=sys.stderr)
        return 2
    task = streams.make_task(cfg.seed_task, cfg.num_classes, cfg.input_dim, cfg.n_train,
                             cfg.n_eval, cfg.base_noise)
    spec = mlp_spec(cfg.input_dim, list(cfg.hidden_dims), cfg.num_classes)
    source = streams.train_source(task, spec, epochs=cfg.source_epochs, lr=cfg.source_lr,
                                  seed=cfg.seed_task, batch_size=cfg.batch_size,
                                  target_accuracy=cfg.source_target_acc)
    domains = streams.default_domains(cfg.severity)
    ranked = streams.rank_by_source_error(task, spec, source, domains)
    print(f"{'rank':<6} {'domain':<28} {'source_error':>12}")
    for i, (dom, err) in enumerate(ranked, start=1):
        print(f"{i:<6} {dom.name:<28} {err:>12.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slomofast", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="output directory (overrides config out_dir)")
    p_run.add_argument("--seed-overrides", nargs="*", default=None,
                       metavar="KEY=VAL", help="task=K schedule=K adapt=K[:K...]")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel workers for fanned-out adapt seeds")
    p_run.set_defaults(func=cmd_run)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.add_argument("--eps", type=float, default=1e-5)
    p_grad.add_argument("--seeds", type=int, default=20)
    p_grad.add_argument("--corrupt", default=None,
                        help="debug: corrupt the named check's analytic gradient")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_cmp = sub.add_parser("compare", help="per-domain error deltas between two run summaries")
    p_cmp.add_argument("summary_a")
    p_cmp.add_argument("summary_b")
    p_cmp.add_argument("--out", default=None, help="also write the delta table as CSV")
    p_cmp.set_defaults(func=cmd_compare)

    p_rank = sub.add_parser("rank", help="order domains by frozen-source error")
    p_rank.add_argument("--config", required=True)
    p_rank.set_defaults(func=cmd_rank)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
