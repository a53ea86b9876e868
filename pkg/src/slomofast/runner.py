"""Experiment runner: flat config files in, CSV/JSON artifacts out.

A run is fully determined by its config file plus the three seeds; two
runs of the same resolved config produce byte-identical artifacts. No
timestamps are written.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, metrics, streams
from .engine import AdaptationConfig, adapt_step
from .numnet import RUNNING_STATS, forward, mlp_spec
from .protostore import PrototypeStore
from .trio import BN_ONLY, FULL, ModelTrio

VARIANTS = ("slomo_fast", "slomo_fast_star", "frozen_source")


class ConfigError(Exception):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


class NumericBlowupError(RuntimeError):
    def __init__(self, last_good_step: int):
        super().__init__(f"non-finite values encountered; last good step: {last_good_step}")
        self.last_good_step = last_good_step


@dataclass
class RunConfig:
    variant: str
    setting: str
    seed_task: int
    seed_schedule: int
    seed_adapt: int
    sigma: float
    delta: float
    # task
    num_classes: int = 10
    input_dim: int = 32
    n_train: int = 2048
    n_eval: int = 640
    base_noise: float = 0.2
    hidden_dims: tuple[int, ...] = (64, 32)
    # source pre-training
    source_epochs: int = 20
    source_lr: float = 0.05
    source_target_acc: float = 0.95
    # adaptation
    alpha: float = 0.99
    tau: float = 0.1
    lambda_cl: float = 1.0
    lambda_mse: float = 1.0
    lambda_im: float = 1.0
    gamma: float | None = None  # None resolves to 1/num_classes
    queue_capacity: int = 10
    evict_interval: int = 50
    restore_prob: float = 0.01
    lr_student: float = 0.01
    lr_t2: float = 0.01
    pl_noise_ratio: float = 0.0
    batch_size: int = 64
    # schedule
    severity: int = 5
    cycles: int = 2
    cyclic_mode: str = "protocol"
    dwell: int = 1
    group_variants: int = 2
    gradual_batches_per_severity: int = 2
    # metrics
    ma_window: int = 10
    lambda_stability: float = 1.0
    forgetting_probe: bool = True
    out_dir: str = "out"

    def resolved_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["gamma"] = self.gamma if self.gamma is not None else 1.0 / self.num_classes
        d["version"] = __version__
        return d


_REQUIRED = ("variant", "setting", "seed_task", "seed_schedule", "seed_adapt", "sigma", "delta")


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


_PARSERS = {
    int: lambda raw: int(raw),
    float: lambda raw: float(raw),
    str: lambda raw: raw.strip(),
    bool: _parse_bool,
}


def _field_types() -> dict[str, type]:
    types = {}
    for f in dataclasses.fields(RunConfig):
        if f.name == "hidden_dims":
            types[f.name] = tuple
        elif f.name == "gamma":
            types[f.name] = float
        elif isinstance(f.type, str):
            types[f.name] = {"str": str, "int": int, "float": float, "bool": bool}.get(
                f.type.split("|")[0].strip(), str
            )
        else:
            types[f.name] = f.type
    return types


def parse_config_text(text: str) -> RunConfig:
    """Parse the flat key = value format with # comments into a RunConfig."""
    types = _field_types()
    values: dict[str, object] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("<line>", f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(key, f"unknown config key {key!r}")
        if key in values:
            raise ConfigError(key, f"duplicate config key {key!r}")
        try:
            if key == "hidden_dims":
                values[key] = _parse_int_list(raw)
            else:
                values[key] = _PARSERS[types[key]](raw)
        except ValueError as exc:
            raise ConfigError(key, f"bad value for {key!r}: {exc}") from exc
    for key in _REQUIRED:
        if key not in values:
            raise ConfigError(key, f"missing required config key {key!r}")
    cfg = RunConfig(**values)  # type: ignore[arg-type]
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def validate_config(cfg: RunConfig) -> None:
    if cfg.variant not in VARIANTS:
        raise ConfigError("variant", f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    if cfg.setting not in streams.SETTINGS:
        raise ConfigError("setting", f"setting must be one of {streams.SETTINGS}, got {cfg.setting!r}")
    if cfg.sigma <= 0:
        raise ConfigError("sigma", "sigma must be positive")
    if cfg.delta < 0:
        raise ConfigError("delta", "delta must be >= 0")
    if cfg.batch_size < 2:
        raise ConfigError("batch_size", "batch_size must be >= 2")
    if cfg.n_eval % cfg.batch_size == 1:
        raise ConfigError("n_eval", "n_eval leaves a trailing single-sample batch; adjust n_eval or batch_size")
    if cfg.n_eval < cfg.batch_size:
        raise ConfigError("n_eval", "n_eval must cover at least one batch")
    if not cfg.hidden_dims:
        raise ConfigError("hidden_dims", "at least one hidden layer is required")
    if cfg.severity not in (1, 2, 3, 4, 5):
        raise ConfigError("severity", "severity must lie in 1..5")
    if cfg.gamma is not None and cfg.gamma < 0:
        raise ConfigError("gamma", "gamma must be >= 0")
    if cfg.pl_noise_ratio < 0 or cfg.pl_noise_ratio > 1:
        raise ConfigError("pl_noise_ratio", "pl_noise_ratio must lie in [0, 1]")
    if cfg.group_variants < 1:
        raise ConfigError("group_variants", "group_variants must be >= 1")


def adaptation_config(cfg: RunConfig) -> AdaptationConfig:
    return AdaptationConfig(
        alpha=cfg.alpha,
        sigma=cfg.sigma,
        delta=cfg.delta,
        tau=cfg.tau,
        lambda_cl=cfg.lambda_cl,
        lambda_mse=cfg.lambda_mse,
        lambda_im=cfg.lambda_im,
        gamma=cfg.gamma,
        queue_capacity=cfg.queue_capacity,
        evict_interval=cfg.evict_interval,
        restore_prob=cfg.restore_prob,
        lr_student=cfg.lr_student,
        lr_t2=cfg.lr_t2,
        student_mode=FULL if cfg.variant == "slomo_fast_star" else BN_ONLY,
        pl_noise_ratio=cfg.pl_noise_ratio,
        batch_size=cfg.batch_size,
    )


def build_plan(cfg: RunConfig) -> streams.StreamPlan:
    if cfg.setting in ("cyclic", "cross_group"):
        groups = streams.default_groups(cfg.severity, cfg.group_variants)
        domains = [d for g in groups for d in g]
    else:
        groups = None
        domains = streams.default_domains(cfg.severity)
    return streams.StreamPlan(
        setting=cfg.setting,
        domains=domains,
        groups=groups,
        batch_size=cfg.batch_size,
        seed=cfg.seed_schedule,
        cycles=cfg.cycles,
        cyclic_mode=cfg.cyclic_mode,
        dwell=cfg.dwell,
        gradual_batches_per_severity=cfg.gradual_batches_per_severity,
    )


def _fresh_state(spec, source, cfg: RunConfig, reset_count: int):
    proj_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed_adapt, 4242, reset_count)))
    trio = ModelTrio.from_source(spec, source, proj_rng)
    store = PrototypeStore(
        num_classes=cfg.num_classes,
        feature_dim=spec.feature_dim,
        capacity=cfg.queue_capacity,
        evict_interval=cfg.evict_interval,
        sigma=cfg.sigma,
        delta=cfg.delta,
    )
    return trio, store


@dataclass
class RunResult:
    report: metrics.RunReport
    summary: dict
    csv_rows: list[dict]
    forgetting_rows: list[dict]


def run_experiment(cfg: RunConfig, task=None, source=None) -> RunResult:
    """Execute one run. task/source may be passed in to reuse across runs
    with the same task seed; they are treated as read-only."""
    spec = mlp_spec(cfg.input_dim, list(cfg.hidden_dims), cfg.num_classes)
    if task is None:
        task = streams.make_task(
            cfg.seed_task, cfg.num_classes, cfg.input_dim, cfg.n_train, cfg.n_eval, cfg.base_noise
        )
    if source is None:
        source = streams.train_source(
            task, spec, epochs=cfg.source_epochs, lr=cfg.source_lr, seed=cfg.seed_task,
            batch_size=cfg.batch_size, target_accuracy=cfg.source_target_acc,
        )
    plan = build_plan(cfg)
    event_iter, info = streams.build_schedule(plan, task, spec, source)
    events = list(event_iter)
    if not events:
        raise ConfigError("setting", "schedule produced no events")

    acfg = adaptation_config(cfg)
    adapt_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed_adapt, 1111)))
    trio = store = None
    reset_count = 0
    if cfg.variant != "frozen_source":
        trio, store = _fresh_state(spec, source, cfg, reset_count)

    initial_domain = plan.domains[events[0].domain_id]
    probe_x, probe_y = task.domain_eval(initial_domain)

    csv_rows: list[dict] = []
    forgetting_rows: list[dict] = []
    batch_errors: list[float] = []
    batch_sizes: list[int] = []
    event_domains: list[str] = []

    for step, event in enumerate(events, start=1):
        if event.reset and cfg.variant != "frozen_source" and step > 1:
            reset_count += 1
            trio, store = _fresh_state(spec, source, cfg, reset_count)
        if cfg.variant == "frozen_source":
            _, logits, _ = forward(spec, source, event.x, stats_mode=RUNNING_STATS)
            err = float(np.mean(logits.argmax(axis=1) != event.y))
            diag = None
        else:
            try:
                prediction, diag = adapt_step(trio, store, event.x, acfg, adapt_rng, labels=event.y)
            except FloatingPointError as exc:
                raise NumericBlowupError(last_good_step=step - 1) from exc
            err = diag.ensemble_error
        if not np.isfinite(err):
            raise NumericBlowupError(last_good_step=step - 1)
        batch_errors.append(err)
        batch_sizes.append(event.x.shape[0])
        event_domains.append(event.domain_name)

        row = {
            "step": step,
            "domain_id": event.domain_id,
            "domain": event.domain_name,
            "severity": event.severity,
            "reset": int(event.reset),
            "batch_size": event.x.shape[0],
            "batch_error": err,
            "loss_sce": diag.loss_sce if diag else 0.0,
            "loss_cl": diag.loss_cl if diag else 0.0,
            "loss_mse": diag.loss_mse if diag else 0.0,
            "loss_im": diag.loss_im if diag else 0.0,
            "n_selected": diag.n_selected if diag else 0,
            "contrastive_applied": int(diag.contrastive_applied) if diag else 0,
            "mse_applied": int(diag.mse_applied) if diag else 0,
        }
        outcomes = diag.insert_outcomes if diag else {}
        for name in ("inserted", "replaced_max_entropy", "rejected_criteria", "rejected_full_higher_entropy"):
            row[name] = outcomes.get(name, 0)
        sizes = diag.queue_sizes if diag else [0] * cfg.num_classes
        row["queue_total"] = int(sum(sizes))
        for c in range(cfg.num_classes):
            row[f"queue_size_c{c}"] = sizes[c]
        csv_rows.append(row)

        segment_ends = step == len(events) or events[step].domain_id != event.domain_id
        if segment_ends and cfg.forgetting_probe and cfg.variant != "frozen_source":
            probe = metrics.forgetting_probe(trio.snapshot(), probe_x, probe_y)
            forgetting_rows.append(
                {"after_step": step, "domain": event.domain_name, **probe}
            )

    forgetting = forgetting_rows if forgetting_rows else None
    report = metrics.build_report(
        batch_errors, batch_sizes, event_domains, info.cycle_bounds,
        cfg.ma_window, cfg.lambda_stability, forgetting,
    )
    summary = {
        "version": __version__,
        "config": cfg.resolved_dict(),
        "schedule": info.to_dict(),
        "report": report.to_dict(),
    }
    return RunResult(report=report, summary=summary, csv_rows=csv_rows, forgetting_rows=forgetting_rows)


def _format_cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def write_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    header = list(rows[0].keys())
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(row[col]) for col in header))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_artifacts(result: RunResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"steps": out / "steps.csv", "summary": out / "summary.json"}
    write_csv(result.csv_rows, paths["steps"])
    paths["summary"].write_text(
        json.dumps(result.summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    if result.forgetting_rows:
        paths["forgetting"] = out / "forgetting.csv"
        write_csv(result.forgetting_rows, paths["forgetting"])
    return paths


def compare_summaries(summary_a: dict, summary_b: dict) -> list[dict]:
    """Per-domain and overall error deltas between two completed runs."""
    sched_a, sched_b = summary_a["schedule"], summary_b["schedule"]
    if sched_a["setting"] != sched_b["setting"] or sched_a["domain_names"] != sched_b["domain_names"]:
        raise ValueError(
            "mismatched schedules: "
            f"a = {sched_a['setting']}:{sched_a['domain_names']} vs "
            f"b = {sched_b['setting']}:{sched_b['domain_names']}"
        )
    rows = []
    dom_a = summary_a["report"]["per_domain"]
    dom_b = summary_b["report"]["per_domain"]
    for name in dom_a:
        rows.append(
            {
                "domain": name,
                "error_a": dom_a[name]["error"],
                "error_b": dom_b[name]["error"],
                "delta": dom_b[name]["error"] - dom_a[name]["error"],
            }
        )
    rows.append(
        {
            "domain": "overall",
            "error_a": summary_a["report"]["overall_error"],
            "error_b": summary_b["report"]["overall_error"],
            "delta": summary_b["report"]["overall_error"] - summary_a["report"]["overall_error"],
        }
    )
    return rows
