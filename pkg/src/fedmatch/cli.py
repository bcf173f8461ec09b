"""Experiment driver: config parsing, run execution, metric/cost artifacts.

Configs are JSON with every hyperparameter optional; unset values fall
back to the published defaults (lr 1e-3, lambda_s 10, tau 0.85, labeled
batches of 10, unlabeled batches of 100, and so on). The L1 weight
default depends on the scenario, so it resolves late. Repetition seeds
are base_seed + rep index. All artifact writes are write-then-rename so
an interrupted run never leaves a partial file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .consistency import AugmentConfig
from .data import (
    LABELS_AT_CLIENT,
    LABELS_AT_SERVER,
    Dataset,
    PartitionPlan,
    make_blobs,
    split_iid,
    split_noniid,
    split_streaming,
)
from .decomposition import LossConfig
from .errors import ConfigError
from .federation import METHODS, ExperimentResult, RoundConfig, run_experiment

log = logging.getLogger(__name__)

PARTITION_MODES = ("iid", "noniid", "streaming")

# scenario-dependent default for the L1 weight on the unlabeled half
LAMBDA_L1_DEFAULTS = {LABELS_AT_CLIENT: 1e-4, LABELS_AT_SERVER: 1e-5}


@dataclass(frozen=True)
class RunSpec:
    """Fully resolved description of one experiment (all repetitions)."""

    method: str = "fedmatch"
    scenario: str = LABELS_AT_CLIENT
    clients: int = 10
    fraction: float = 1.0
    rounds: int = 100
    local_epochs: int = 1
    server_epochs: int = 1
    helpers: int = 2
    helper_period: int = 10
    comm_threshold: float = 2e-5
    lr: float = 1e-3
    lambda_s: float = 10.0
    lambda_iccs: float = 1e-2
    lambda_l1: Optional[float] = None
    lambda_l2: float = 10.0
    lambda_u: float = 1.0
    tau: float = 0.85
    batch_labeled: int = 10
    batch_unlabeled: int = 100
    batch_labeled_server: int = 100
    mu: float = 1e-2
    hidden_dims: tuple[int, ...] = (32,)
    activation: str = "tanh"
    psi_init_scale: float = 1e-4
    noise_sigma: float = 0.1
    mask_prob: float = 0.0
    classes: int = 4
    dim: int = 16
    n_per_class: int = 150
    spread: float = 1.0
    partition: str = "iid"
    alpha: float = 0.5
    stream_steps: int = 10
    labels_per_class: int = 5
    seed: int = 1
    repetitions: int = 3
    out: str = "runs"


_FIELD_NAMES = {f.name for f in fields(RunSpec)}


def _resolve(raw: dict) -> RunSpec:
    unknown = set(raw) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    if "hidden_dims" in raw:
        raw["hidden_dims"] = tuple(int(d) for d in raw["hidden_dims"])
    spec = RunSpec(**raw)
    if spec.lambda_l1 is None:
        spec = RunSpec(**{**asdict(spec), "lambda_l1": LAMBDA_L1_DEFAULTS[spec.scenario]})
    _validate(spec)
    return spec


def _validate(spec: RunSpec) -> None:
    if spec.method not in METHODS:
        raise ConfigError(f"unknown method {spec.method!r}, expected one of {METHODS}")
    if spec.partition not in PARTITION_MODES:
        raise ConfigError(f"unknown partition {spec.partition!r}")
    if spec.fraction <= 0:
        raise ConfigError("fraction must exceed 0")
    if spec.repetitions < 1:
        raise ConfigError("need at least one repetition")
    if spec.labels_per_class < 1:
        raise ConfigError("need at least one label per class")
    # delegate the remaining invariants to the round config
    round_config(spec, spec.seed)


def parse_config(path) -> RunSpec:
    """Load and validate a JSON run config."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return _resolve(raw)


def spec_from_dict(raw: dict) -> RunSpec:
    """Validate an in-memory config dict (same rules as parse_config)."""
    return _resolve(dict(raw))


def round_config(spec: RunSpec, seed: int) -> RoundConfig:
    loss = LossConfig(
        lambda_s=spec.lambda_s,
        lambda_iccs=spec.lambda_iccs,
        lambda_l1=spec.lambda_l1 if spec.lambda_l1 is not None else LAMBDA_L1_DEFAULTS[spec.scenario],
        lambda_l2=spec.lambda_l2,
        tau=spec.tau,
    )
    return RoundConfig(
        scenario=spec.scenario,
        n_clients=spec.clients,
        fraction=spec.fraction,
        n_rounds=spec.rounds,
        local_epochs=spec.local_epochs,
        server_epochs=spec.server_epochs,
        n_helpers=spec.helpers,
        helper_period=spec.helper_period,
        loss=loss,
        comm_threshold=spec.comm_threshold,
        seed=seed,
        lr=spec.lr,
        batch_labeled=spec.batch_labeled,
        batch_unlabeled=spec.batch_unlabeled,
        batch_labeled_server=spec.batch_labeled_server,
        mu=spec.mu,
        lambda_u=spec.lambda_u,
        hidden_dims=spec.hidden_dims,
        activation=spec.activation,
        augment=AugmentConfig(noise_sigma=spec.noise_sigma, mask_prob=spec.mask_prob),
        psi_init_scale=spec.psi_init_scale,
    )


def build_data(spec: RunSpec) -> tuple[Dataset, PartitionPlan]:
    """Dataset and partition are shared by every repetition (base seed)."""
    ds = make_blobs(spec.classes, spec.dim, spec.n_per_class, spec.spread, spec.seed)
    if spec.partition == "iid":
        plan = split_iid(ds, spec.clients, spec.labels_per_class, spec.seed)
    else:
        plan = split_noniid(ds, spec.clients, spec.labels_per_class, spec.seed, spec.alpha)
        if spec.partition == "streaming":
            plan = split_streaming(plan, spec.stream_steps)
    return ds, plan


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _spec_json(spec: RunSpec) -> str:
    payload = asdict(spec)
    payload["hidden_dims"] = list(spec.hidden_dims)
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def _summarize(results: list[ExperimentResult]) -> dict:
    def stats(values):
        arr = np.asarray(values, dtype=np.float64)
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    return {
        "repetitions": len(results),
        "final_test_acc": stats([r.final.test_acc for r in results]),
        "final_labeled_acc": stats([r.final.labeled_acc for r in results]),
        "final_loss_s": stats([r.final.loss_s for r in results]),
        "mean_s2c_pct": stats([np.mean([m.s2c_pct for m in r.rounds]) for r in results]),
        "mean_c2s_pct": stats([np.mean([m.c2s_pct for m in r.rounds]) for r in results]),
        "final_nnz_psi_frac": stats([r.final.nnz_psi_frac for r in results]),
    }


def _run_repetitions(spec: RunSpec, method: str, ds, plan) -> list[ExperimentResult]:
    results = []
    for rep in range(spec.repetitions):
        cfg = round_config(spec, spec.seed + rep)
        log.info("running %s rep %d (seed %d)", method, rep, cfg.seed)
        results.append(run_experiment(cfg, method, ds, plan))
    return results


def run(spec: RunSpec) -> int:
    """Execute all repetitions, write metrics, summary and resolved config."""
    out_dir = Path(spec.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds, plan = build_data(spec)
    results = _run_repetitions(spec, spec.method, ds, plan)
    for rep, result in enumerate(results):
        rep_dir = out_dir / f"rep_{rep}"
        rep_dir.mkdir(exist_ok=True)
        _atomic_write(rep_dir / "metrics.csv", result.csv_text())
    _atomic_write(out_dir / "summary.json", json.dumps(_summarize(results), indent=1) + "\n")
    _atomic_write(out_dir / "resolved_config.json", _spec_json(spec))
    log.info("wrote artifacts to %s", out_dir)
    return 0


def compare(spec: RunSpec, methods: list[str]) -> int:
    """Run several methods on the same data and merge their metric series."""
    for method in methods:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
    out_dir = Path(spec.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds, plan = build_data(spec)
    lines = ["method,rep,round,test_acc,labeled_acc,loss_s,loss_u,s2c_pct,c2s_pct,nnz_psi_frac"]
    summary = {}
    for method in methods:
        results = _run_repetitions(spec, method, ds, plan)
        summary[method] = _summarize(results)
        for rep, result in enumerate(results):
            for m in result.rounds:
                lines.append(
                    f"{method},{rep},{m.round_no},{m.test_acc!r},{m.labeled_acc!r},"
                    f"{m.loss_s!r},{m.loss_u!r},{m.s2c_pct!r},{m.c2s_pct!r},{m.nnz_psi_frac!r}"
                )
    _atomic_write(out_dir / "compare.csv", "\n".join(lines) + "\n")
    _atomic_write(out_dir / "compare_summary.json", json.dumps(summary, indent=1) + "\n")
    _atomic_write(out_dir / "resolved_config.json", _spec_json(spec))
    return 0


def _setup_logging() -> None:
    level = os.environ.get("FEDMATCH_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        print(f"FEDMATCH_LOG must be one of {tuple(levels)}", file=sys.stderr)
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "compare", "validate"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument(
            "--method",
            action="append",
            default=None,
            help="method name (repeatable for compare)",
        )
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="base seed override")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        spec = parse_config(args.config) if args.config else RunSpec()
        overrides = {}
        if args.method:
            overrides["method"] = args.method[0]
        if args.out is not None:
            overrides["out"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            spec = spec_from_dict({**asdict(spec), **overrides})
        if args.command == "validate":
            print(_spec_json(spec), end="")
            return 0
        if args.command == "compare":
            methods = args.method if args.method else list(METHODS)
            return compare(spec, methods)
        return run(spec)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
