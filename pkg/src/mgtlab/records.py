"""Metric rows, CSV/JSON sinks and seed aggregation.

Every file written here is a pure function of the records, so the JSON
summary can be rebuilt from ``metrics.csv`` alone.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from collections import defaultdict
from dataclasses import astuple, dataclass, fields
from typing import Iterable, Optional

import numpy as np

from .errors import ContractError
from .metrics import mean_std, sample_variance, synergy_coefficient
from .model import VARIANTS

METRICS_HEADER = ("run_id", "experiment", "variant", "depth", "seed", "index", "metric", "value")
RANK_HEADER = ("layer", "variant", "depth", "seed", "rank_eff")
BETA_HEADER = ("step", "layer", "variant", "depth", "seed", "mean", "var", "neg_frac")


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    experiment: str
    variant: str
    depth: int
    seed: int
    index: int
    metric: str
    value: float

    @property
    def key(self) -> tuple:
        return self.run_id, self.index, self.metric


def fmt_float(x: float) -> str:
    """17 significant digits: parses back to the identical float64."""
    return format(float(x), ".17g")


def records_for_run(experiment: str, run) -> list:
    """Flatten a :class:`~mgtlab.harness.train.RunResult` into metric rows."""
    rows = []

    def add(index, metric, value):
        rows.append(MetricsRecord(run.run_id, experiment, run.variant, run.depth, run.seed,
                                  int(index), metric, float(value)))

    add(0, "aborted", 1.0 if run.aborted else 0.0)
    add(0, "param_count", run.param_count)
    add(0, "width", run.width)
    add(0, "batch_digest", run.batch_digest)
    for r in run.records:
        add(r.step, "train_loss", r.train_loss)
        add(r.step, "val_loss", r.val_loss)
        add(r.step, "accuracy", r.accuracy)
    if run.aborted or not run.records:
        return rows
    final = run.records[-1]
    add(final.step, "final_val_loss", final.val_loss)
    add(final.step, "final_accuracy", final.accuracy)
    for snap in run.snapshots:
        is_final = snap is run.snapshots[-1]
        suffix = "" if is_final else f"@{snap.step}"
        if is_final and snap.rank is not None:
            for layer, value in enumerate(snap.rank.ranks):
                add(layer, "rank_eff", value)
            add(snap.step, "rho", snap.rank.preservation_ratio)
            add(snap.step, "decay_rate", snap.rank.decay_rate)
        if snap.beta is not None:
            for layer in range(len(snap.beta)):
                add(layer, "beta_mean" + suffix, snap.beta.mean[layer])
                add(layer, "beta_var" + suffix, snap.beta.var[layer])
                add(layer, "beta_neg_frac" + suffix, snap.beta.neg_frac[layer])
    return rows


def rank_rows(runs) -> list:
    return [(layer, r.variant, r.depth, r.seed, v)
            for r in runs if not r.aborted and r.rank is not None
            for layer, v in enumerate(r.rank.ranks)]


def beta_rows(runs) -> list:
    return [(s.step, layer, r.variant, r.depth, r.seed, s.beta.mean[layer], s.beta.var[layer],
             s.beta.neg_frac[layer])
            for r in runs if not r.aborted
            for s in r.snapshots if s.beta is not None
            for layer in range(len(s.beta))]


def check_records(records: Iterable[MetricsRecord]) -> None:
    seen = set()
    for rec in records:
        if not math.isfinite(rec.value):
            raise ContractError(f"non-finite value for {rec.key}")
        if rec.key in seen:
            raise ContractError(f"duplicate metric row {rec.key}")
        seen.add(rec.key)


# -- CSV ----------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def metrics_csv(records) -> str:
    records = list(records)
    check_records(records)
    return csv_text(METRICS_HEADER, (astuple(r) for r in records))


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
        types = {f.name: f.type for f in fields(MetricsRecord)}
        conv = {"int": int, "float": float, "str": str}
        return [MetricsRecord(**{k: conv[types[k]](v) for k, v in row.items()}) for row in reader]


def atomic_write(path, text: str) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def ensure_writable(directory) -> None:
    os.makedirs(directory, exist_ok=True)
    fd, probe = tempfile.mkstemp(dir=directory, prefix=".probe-")
    os.close(fd)
    os.unlink(probe)


# -- aggregation ------------------------------------------------------------------


def _variant_order(v: str) -> int:
    return VARIANTS.index(v) if v in VARIANTS else len(VARIANTS)


def _json_num(x: Optional[float]):
    return None if x is None or not math.isfinite(x) else float(x)


def _good_runs(records) -> dict:
    """``run_id -> {(index, metric): value}`` for runs that did not abort."""
    by_run: dict = defaultdict(dict)
    meta = {}
    for r in records:
        by_run[r.run_id][(r.index, r.metric)] = r.value
        meta[r.run_id] = (r.variant, r.depth, r.seed)
    return {rid: (meta[rid], vals) for rid, vals in by_run.items() if vals.get((0, "aborted"), 0.0) == 0.0}


def _groups(records, good) -> list:
    acc: dict = defaultdict(list)
    for r in records:
        if r.run_id in good and r.metric not in ("aborted", "batch_digest"):
            acc[(r.variant, r.depth, r.metric, r.index)].append((r.seed, r.value))
    out = []
    for (variant, depth, metric, index) in sorted(acc, key=lambda k: (_variant_order(k[0]), k[1], k[2], k[3])):
        vals = [v for _, v in sorted(acc[(variant, depth, metric, index)])]
        m, s = mean_std(vals)
        out.append({"variant": variant, "depth": depth, "metric": metric, "index": index,
                    "mean": _json_num(m), "std": _json_num(s), "n": len(vals)})
    return out


def _seed_values(good, variant, depth, metric) -> list:
    vals = []
    for (v, d, seed), table in good.values():
        if v != variant or d != depth:
            continue
        for (_, name), value in table.items():
            if name == metric:
                vals.append((seed, value))
    return [v for _, v in sorted(vals)]


def _configs(good) -> list:
    return sorted({(v, d) for (v, d, _), _t in good.values()}, key=lambda k: (_variant_order(k[0]), k[1]))


def steps_to_target(curve: dict, target: float) -> Optional[int]:
    for step in sorted(curve):
        if curve[step] <= target:
            return step
    return None


def summarize(experiment: str, records, target_val_loss: Optional[float] = None) -> dict:
    """Seed aggregates (mean, sample std, n) plus experiment-specific derived fields."""
    records = list(records)
    good = _good_runs(records)
    all_runs = {r.run_id for r in records}
    summary = {
        "experiment": experiment,
        "runs": len(all_runs),
        "aborted_runs": sorted(all_runs - set(good)),
        "groups": _groups(records, good),
    }
    configs = _configs(good)

    def seed_mean(variant, depth, metric):
        vals = _seed_values(good, variant, depth, metric)
        return float(np.mean(vals)) if vals else None

    if experiment == "rank-scan":
        rho = {v: {str(d): seed_mean(v, d, "rho") for vv, d in configs if vv == v}
               for v in dict.fromkeys(v for v, _ in configs)}
        depths = sorted({d for _, d in configs})
        derived = {"rho": rho}
        if depths:
            top = depths[-1]
            r_mgt, r_std = seed_mean("mgt_full", top, "rho"), seed_mean("standard", top, "rho")
            derived.update(max_depth=top, rho_mgt_full=_json_num(r_mgt), rho_standard=_json_num(r_std),
                           hypothesis_rho_mgt_ge_standard=(None if r_mgt is None or r_std is None
                                                           else bool(r_mgt >= r_std)))
        summary["derived"] = derived
    elif experiment == "ablate":
        losses = {v: seed_mean(v, d, "final_val_loss") for v, d in configs}
        derived = {"final_val_loss": {v: _json_num(x) for v, x in losses.items()}, "synergy": None}
        if all(losses.get(v) is not None for v in VARIANTS):
            s = synergy_coefficient(losses["standard"], losses["mhc_only"], losses["ddl_only"], losses["mgt_full"])
            derived["synergy"] = s
            derived["synergy_sign"] = "positive" if s > 0 else ("negative" if s < 0 else "zero")
        summary["derived"] = derived
    elif experiment == "beta-stats":
        curves: dict = {}
        for r in records:
            if r.run_id not in good or not r.metric.startswith("beta_mean"):
                continue
            step = r.metric.split("@", 1)[1] if "@" in r.metric else "final"
            curves.setdefault(step, defaultdict(list))[r.index].append((r.seed, r.value))
        transition = {}
        for step, layers in curves.items():
            means = [float(np.mean([v for _, v in sorted(layers[i])])) for i in sorted(layers)]
            flips = [i for i in range(1, len(means)) if np.sign(means[i]) != np.sign(means[i - 1])
                     and np.sign(means[i]) != 0]
            transition[step] = flips[0] if flips else None
        summary["derived"] = {"transition_layer": transition}
    elif experiment == "depth-scale":
        finals = {(v, d): _seed_values(good, v, d, "final_val_loss") for v, d in configs}
        provenance = "configured"
        target = target_val_loss
        if target is None:
            base = [(d, vals) for (v, d), vals in finals.items() if v == "standard" and vals]
            if base:
                d0, vals = min(base)
                target = float(np.median(vals))
                provenance = f"derived: median final val_loss of standard at depth {d0}"
        rows = []
        for (v, d), vals in finals.items():
            hits = []
            for (vv, dd, seed), table in sorted(good.values()):
                if (vv, dd) != (v, d):
                    continue
                curve = {i: x for (i, name), x in table.items() if name == "val_loss"}
                hits.append(None if target is None else steps_to_target(curve, target))
            reached = [h for h in hits if h is not None]
            pc = _seed_values(good, v, d, "param_count")
            rows.append({
                "variant": v, "depth": d,
                "width": int(_seed_values(good, v, d, "width")[0]),
                "param_count": int(pc[0]) if pc else None,
                "final_val_loss_mean": _json_num(float(np.mean(vals))) if vals else None,
                "final_val_loss_variance": _json_num(sample_variance(vals)),
                "steps_to_target_mean": _json_num(float(np.mean(reached))) if reached else None,
                "runs_reaching_target": len(reached),
                "n": len(vals),
            })
        summary["derived"] = {"target_val_loss": _json_num(target), "target_provenance": provenance,
                              "table": rows}
    elif experiment == "train":
        per_seed = {}
        for (_, _, seed), table in sorted(good.values()):
            acc = [x for (i, name), x in sorted(table.items()) if name == "accuracy"]
            per_seed[str(seed)] = {
                "final_val_loss": next((x for (_, n), x in table.items() if n == "final_val_loss"), None),
                "final_accuracy": next((x for (_, n), x in table.items() if n == "final_accuracy"), None),
                "best_accuracy": max(acc) if acc else None,
                "first_step_at_best": next((i for (i, n), x in sorted(table.items())
                                            if n == "accuracy" and acc and x == max(acc)), None),
            }
        summary["derived"] = {"per_seed": per_seed}
    return summary


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + "\n"
