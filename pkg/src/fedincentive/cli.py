"""Command line entry points.

    fedincentive run --config exp.json --out runs/a [--seed N] [--rounds T] [--workers W]
    fedincentive compare --config exp.json --strategies fedavg,krum,mechanism \\
        --fractions 0.3,0.4,0.5 --out runs/grid

Relative IDX paths resolve against ``$FEDINCENTIVE_DATA_DIR`` when set, else
against the config file's directory.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .adversary import ClientType
from .config import ConfigError, config_to_dict, parse_config
from .engine import STRATEGIES, ExperimentConfig, RunResult, compare_strategies, run_experiment
from .mechanism import (
    empirical_pass_rates,
    expected_utilities,
    format_number,
    ir_holds,
    mean_utility_by_type,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME = 0, 2, 3, 4
DATA_DIR_ENV = "FEDINCENTIVE_DATA_DIR"

METRICS_HEADER = (
    "round",
    "test_loss",
    "test_accuracy",
    "n_verified",
    "n_verified_honest",
    "n_verified_malicious",
    "mean_honest_utility",
    "server_expenditure",
)

log = logging.getLogger("fedincentive")


@dataclass(frozen=True)
class RunManifest:
    config: dict[str, Any]
    artifacts: dict[str, str]
    duration_seconds: float
    version: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "artifacts": self.artifacts,
                "duration_seconds": self.duration_seconds,
                "version": self.version,
            },
            indent=2,
        )


def _num(x: float | None) -> str:
    # Blank marks "not applicable" (e.g. utilities in a FedAvg run).
    return "" if x is None else format_number(x)


def metrics_csv(result: RunResult) -> str:
    lines = [",".join(METRICS_HEADER)]
    for r in result.records:
        lines.append(
            ",".join(
                [
                    str(r.round),
                    _num(r.test_loss),
                    _num(r.test_accuracy),
                    str(r.n_verified),
                    str(r.n_verified_honest),
                    str(r.n_verified_malicious),
                    _num(r.mean_honest_utility),
                    _num(r.server_expenditure),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def summarize(config: ExperimentConfig, result: RunResult) -> dict[str, Any]:
    last = result.records[-1]
    summary: dict[str, Any] = {
        "strategy": config.strategy,
        "malicious_fraction": config.malicious_fraction,
        "rounds": len(result.records),
        "final_test_accuracy": last.test_accuracy,
        "final_test_loss": last.test_loss,
        "final_mean_honest_utility": last.mean_honest_utility,
        "server_expenditure": result.ledger.server_expenditure,
        "n_verified_total": result.ledger.n_verified_total,
        "pass_rates": None,
        "individual_rationality": None,
        "incentive_compatibility": None,
    }
    if config.strategy == "krum":
        summary["krum_selected"] = [r.selected_client for r in result.records]
    if config.strategy != "mechanism":
        return summary
    params = config.mechanism
    p_h, p_m = empirical_pass_rates(result.ledger)
    summary["pass_rates"] = {"honest": p_h, "malicious": p_m}
    summary["mean_utility"] = {
        "honest": mean_utility_by_type(result.ledger, ClientType.BENEVOLENT),
        "malicious": mean_utility_by_type(result.ledger, ClientType.MALICIOUS),
    }
    if p_h is not None:
        holds, min_reward = ir_holds(params, p_h)
        summary["individual_rationality"] = {
            "holds": holds,
            "min_reward": min_reward if min_reward != float("inf") else None,
            "p_verify_honest": p_h,
        }
    if p_h is not None or p_m is not None:
        e_h, e_m, dominated = expected_utilities(params, p_h or 0.0, p_m or 0.0)
        summary["incentive_compatibility"] = {
            "expected_utility_honest": e_h if p_h is not None else None,
            "expected_utility_malicious": e_m if p_m is not None else None,
            "poisoning_dominated": dominated if p_m is not None else None,
        }
    return summary


def _base_dir(config_path: Path) -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else config_path.parent


def load_config_file(path: str | Path, seed: int | None = None, rounds: int | None = None,
                     workers: int | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    cfg = parse_config(text)
    overrides = {k: v for k, v in (("seed", seed), ("rounds", rounds), ("workers", workers)) if v is not None}
    if overrides:
        try:
            cfg = replace(cfg, **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def run_command(config_path: str | Path, out_dir: str | Path, *, seed: int | None = None,
                rounds: int | None = None, workers: int | None = None) -> RunManifest:
    """Run one experiment and write metrics.csv, ledger.csv, summary.json, model.bin, manifest.json."""
    start = time.perf_counter()
    config_path = Path(config_path)
    cfg = load_config_file(config_path, seed, rounds, workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(cfg, _base_dir(config_path))

    artifacts = {
        "metrics": out / "metrics.csv",
        "ledger": out / "ledger.csv",
        "summary": out / "summary.json",
        "model": out / "model.bin",
        "manifest": out / "manifest.json",
    }
    artifacts["metrics"].write_text(metrics_csv(result))
    artifacts["ledger"].write_text(result.ledger.to_csv())
    artifacts["summary"].write_text(json.dumps(summarize(cfg, result), indent=2) + "\n")
    artifacts["model"].write_bytes(result.final.to_bytes())
    manifest = RunManifest(
        config=config_to_dict(cfg),
        artifacts={k: str(v) for k, v in artifacts.items()},
        duration_seconds=time.perf_counter() - start,
        version=__version__,
    )
    artifacts["manifest"].write_text(manifest.to_json() + "\n")
    return manifest


def compare_command(config_path: str | Path, strategies: Sequence[str], fractions: Sequence[float],
                    out_dir: str | Path, *, seed: int | None = None, rounds: int | None = None,
                    workers: int | None = None) -> Path:
    """Write comparison.csv (one row per strategy and fraction) and degradation.csv (one row per strategy)."""
    config_path = Path(config_path)
    cfg = load_config_file(config_path, seed, rounds, workers)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"--strategies: unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ConfigError(f"--fractions: {f} is outside [0, 1]")
    table = compare_strategies(cfg, strategies, fractions, _base_dir(config_path))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "comparison.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "malicious_fraction", "final_accuracy", "degradation"])
        for s, f, acc in table.rows:
            w.writerow([s, format_number(f), format_number(acc), format_number(table.degradation[s])])
    lo, hi = min(fractions), max(fractions)
    with (out / "degradation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "accuracy_at_min_fraction", "accuracy_at_max_fraction", "degradation"])
        for s in strategies:
            w.writerow([s, format_number(table.accuracy(s, lo)), format_number(table.accuracy(s, hi)),
                        format_number(table.degradation[s])])
    return path


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; keep it explicit
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedincentive", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--workers", type=int)

    common(sub.add_parser("run", help="run one experiment"))
    cmp = sub.add_parser("compare", help="grid over strategies and malicious fractions")
    common(cmp)
    cmp.add_argument("--strategies", type=_csv_list(str), default=list(STRATEGIES))
    cmp.add_argument("--fractions", type=_csv_list(float), default=[0.3, 0.4, 0.5])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = dict(seed=args.seed, rounds=args.rounds, workers=args.workers)
    try:
        if args.command == "run":
            manifest = run_command(args.config, args.out, **overrides)
            print(manifest.artifacts["summary"])
        else:
            print(compare_command(args.config, args.strategies, args.fractions, args.out, **overrides))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - top-level boundary reports and maps to an exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
