"""``mgt-lab`` command line.

    mgt-lab <verify|train|rank-scan|ablate|beta-stats|depth-scale> --config PATH [--out DIR] [key=value ...]

Exit status is 0 on success, 1 on a failed check or aborted run (a JSON
failure object goes to stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional

from .config import echo_text, parse_config
from .errors import ConfigParseError, MGTLabError
from .harness.experiments import PROTOCOLS, run_single, worker_count
from .model import save_params
from .records import (BETA_HEADER, RANK_HEADER, atomic_write, csv_text, ensure_writable, metrics_csv,
                      summary_json)

SUBCOMMANDS = ("verify",) + tuple(PROTOCOLS)

log = logging.getLogger("mgtlab")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgt-lab", description="Delta-gated transformer experiment lab.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", metavar="PATH", help="flat key=value config file (defaults if omitted)")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v progress, -vv per-eval detail")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel training processes (default: $MGT_LAB_WORKERS or 1)")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, applied after the file")
    return p


def _fail(subcommand: str, reason: str, **extra) -> int:
    doc = {"status": "failed", "subcommand": subcommand, "reason": reason, **extra}
    print(json.dumps(doc, sort_keys=True, default=str), file=sys.stderr)
    return 1


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def cmd_verify() -> int:
    from .verify import run_all

    results = run_all()
    for r in results:
        print(f"{r.name:20s} {r.passed:4d}/{r.total:<4d} worst={r.worst:.3e} {r.seconds:7.3f}s "
              f"{'PASS' if r.ok else 'FAIL'}")
    failed = [r.as_dict() for r in results if not r.ok]
    if failed:
        return _fail("verify", "property family failed", families=failed)
    return 0


def write_outputs(out_dir: str, cfg, result) -> None:
    atomic_write(os.path.join(out_dir, "metrics.csv"), metrics_csv(result.records))
    atomic_write(os.path.join(out_dir, "rank.csv"), csv_text(RANK_HEADER, result.rank_rows))
    atomic_write(os.path.join(out_dir, "beta.csv"), csv_text(BETA_HEADER, result.beta_rows))
    atomic_write(os.path.join(out_dir, "summary.json"), summary_json(result.summary))


def check_result(subcommand: str, cfg, result) -> Optional[dict]:
    """Failure details for ``result``, or ``None`` if every check passed."""
    aborted = [{"run_id": r.run_id, "error": r.error} for r in result.runs if r.aborted]
    if aborted:
        return {"reason": "run aborted", "runs": aborted}
    derived = result.summary.get("derived", {})
    if subcommand == "rank-scan" and derived.get("hypothesis_rho_mgt_ge_standard") is False:
        return {"reason": "seed-averaged rho(mgt_full) < rho(standard) at the deepest setting",
                "max_depth": derived.get("max_depth"), "rho_mgt_full": derived.get("rho_mgt_full"),
                "rho_standard": derived.get("rho_standard")}
    if subcommand == "train" and cfg.task == "copy":
        threshold = cfg.experiment.accuracy_threshold
        short = {seed: row["best_accuracy"] for seed, row in derived.get("per_seed", {}).items()
                 if row["best_accuracy"] is None or row["best_accuracy"] < threshold}
        if short:
            return {"reason": "copy accuracy below threshold", "threshold": threshold, "best_accuracy": short}
    return None


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    _setup_logging(args.verbose)
    if args.subcommand == "verify":
        return cmd_verify()

    try:
        cfg = parse_config(args.config, args.overrides, output_dir=args.out)
    except ConfigParseError as exc:
        return _fail(args.subcommand, "invalid configuration", key=exc.key, message=str(exc))
    try:
        ensure_writable(args.out)
    except OSError as exc:
        return _fail(args.subcommand, "output directory not writable", path=args.out, message=str(exc))
    atomic_write(os.path.join(args.out, "config.echo"), echo_text(cfg))

    workers = worker_count(args.workers)
    try:
        if args.subcommand == "train":
            result = run_single(cfg, workers, keep_params=True)
        else:
            result = PROTOCOLS[args.subcommand](cfg, workers)
    except MGTLabError as exc:
        return _fail(args.subcommand, type(exc).__name__, message=str(exc))
    write_outputs(args.out, cfg, result)
    if args.subcommand == "train":
        for run in result.runs:
            if run.params is not None:
                vocab = run.params["embed.token"].shape[0]
                save_params(run.params, os.path.join(args.out, f"params-s{run.seed}.json"),
                            cfg.model.replace(seed=run.seed, vocab=vocab))

    failure = check_result(args.subcommand, cfg, result)
    if failure:
        return _fail(args.subcommand, **failure)
    print(f"{args.subcommand}: {len(result.runs)} runs, outputs in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
