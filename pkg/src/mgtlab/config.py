"""Flat ``key=value`` experiment configuration.

One setting per line, ``#`` starts a comment, sections are dotted key
prefixes (``model.depth=8``).  Every key has a default in :data:`SCHEMA`;
unknown keys are rejected.  Command-line overrides use the same syntax and
are applied after the file.
"""

from __future__ import annotations

import hashlib
import math
import os
import re
from dataclasses import dataclass, replace
from typing import Optional

from .errors import ConfigParseError, InvalidConfigurationError
from .harness.optim import AdamHyper
from .model import VARIANTS, ModelConfig


def _int_list(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _float_list(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip() == "" else float(text)


def _finite_float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


_PARSERS = {
    "int": int,
    "float": _finite_float,
    "str": str,
    "ints": _int_list,
    "floats": _float_list,
    "opt_float": _opt_float,
}

# key: (type, default text, description)
SCHEMA = {
    "model.depth": ("int", "4", "layers (attention+FFN block pairs)"),
    "model.width": ("int", "64", "hidden width D"),
    "model.heads": ("int", "4", "attention heads; must divide width"),
    "model.ffn_mult": ("int", "4", "FFN hidden size = ffn_mult * width"),
    "model.vocab": ("int", "16", "vocabulary size (char_lm: replaced by corpus vocabulary)"),
    "model.seq_len": ("int", "17", "maximum sequence length S"),
    "model.variant": ("str", "mgt_full", "standard | mhc_only | ddl_only | mgt_full"),
    "model.lam": ("float", "1.0", "gate range scale lambda"),
    "model.epsilon": ("float", "0.0", "gate offset epsilon"),
    "model.alpha_init": ("float", "0.0", "initial erasure strength alpha"),
    "task.name": ("str", "copy", "copy | char_lm"),
    "task.copy_m": ("int", "8", "copy task half length m (sequence length 2m+1)"),
    "task.corpus": ("str", "", "UTF-8 text file for char_lm"),
    "optim.learning_rate": ("float", "0.001", "Adam step size"),
    "optim.beta1": ("float", "0.9", "Adam first-moment decay"),
    "optim.beta2": ("float", "0.999", "Adam second-moment decay"),
    "optim.eps": ("float", "1e-08", "Adam denominator stabiliser"),
    "optim.grad_clip": ("float", "1.0", "global gradient-norm clip (<= 0 disables)"),
    "train.batch_size": ("int", "32", "sequences per optimisation step"),
    "train.total_steps": ("int", "1000", "optimisation steps per run"),
    "train.eval_every": ("int", "250", "evaluation interval in steps"),
    "train.eval_batch_size": ("int", "128", "fixed validation set size (sequences)"),
    "train.probe_batch_size": ("int", "16", "probe batch for rank / gate traces (drawn with seed 0)"),
    "train.seeds": ("ints", "0,1,2", "run seeds"),
    "experiment.rank_depths": ("ints", "4,8,16,24", "rank-scan depths"),
    "experiment.ablation_depth": ("int", "8", "ablation depth"),
    "experiment.beta_depth": ("int", "16", "beta-stats depth"),
    "experiment.beta_checkpoints": ("floats", "0,0.25,0.5,1", "beta-stats snapshot fractions of training"),
    "experiment.scale_depths": ("ints", "4,8,16", "depth-scale depths"),
    "experiment.param_budget": ("int", "500000", "depth-scale parameter budget"),
    "experiment.target_val_loss": ("opt_float", "", "depth-scale convergence target (empty: derived)"),
    "experiment.accuracy_threshold": ("float", "0.99", "train: required final-eval accuracy on copy task (<= 0 disables)"),
}


@dataclass(frozen=True)
class ExperimentSettings:
    rank_depths: tuple = (4, 8, 16, 24)
    ablation_depth: int = 8
    beta_depth: int = 16
    beta_checkpoints: tuple = (0.0, 0.25, 0.5, 1.0)
    scale_depths: tuple = (4, 8, 16)
    param_budget: int = 500_000
    target_val_loss: Optional[float] = None
    accuracy_threshold: float = 0.99


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    task: str = "copy"
    copy_m: int = 8
    corpus: str = ""
    optimizer: AdamHyper = AdamHyper()
    batch_size: int = 32
    total_steps: int = 1000
    eval_every: int = 250
    eval_batch_size: int = 128
    probe_batch_size: int = 16
    seeds: tuple = (0, 1, 2)
    experiment: ExperimentSettings = ExperimentSettings()
    output_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in ("copy", "char_lm"):
            raise ConfigParseError("task.name", f"must be copy or char_lm, got {self.task!r}")
        if not self.seeds:
            raise ConfigParseError("train.seeds", "needs at least one seed")
        if self.eval_every < 1:
            raise ConfigParseError("train.eval_every", "must be >= 1")
        if self.total_steps < 0:
            raise ConfigParseError("train.total_steps", "must be >= 0")
        if self.total_steps and self.total_steps < self.eval_every:
            raise ConfigParseError("train.eval_every", "must not exceed train.total_steps")
        for key, val in (("train.batch_size", self.batch_size), ("train.eval_batch_size", self.eval_batch_size),
                         ("train.probe_batch_size", self.probe_batch_size)):
            if val < 1:
                raise ConfigParseError(key, "must be >= 1")
        if self.task == "copy":
            if self.copy_m < 1:
                raise ConfigParseError("task.copy_m", "must be >= 1")
            if 2 * self.copy_m + 1 > self.model.seq_len:
                raise ConfigParseError("task.copy_m", f"copy length 2m+1={2 * self.copy_m + 1} exceeds "
                                                      f"model.seq_len={self.model.seq_len}")
            if self.model.vocab < 3:
                raise ConfigParseError("model.vocab", "copy task needs vocab >= 3")
        elif not self.corpus:
            raise ConfigParseError("task.corpus", "char_lm needs a corpus path")
        if self.optimizer.learning_rate <= 0:
            raise ConfigParseError("optim.learning_rate", "must be positive")
        ex = self.experiment
        if any(f < 0 or f > 1 for f in ex.beta_checkpoints):
            raise ConfigParseError("experiment.beta_checkpoints", "fractions must lie in [0, 1]")
        if any(d < 0 for d in ex.rank_depths + ex.scale_depths):
            raise ConfigParseError("experiment.rank_depths", "depths must be >= 0")
        if ex.param_budget < 1:
            raise ConfigParseError("experiment.param_budget", "must be positive")

    def with_model(self, **changes) -> "ExperimentConfig":
        return replace(self, model=self.model.replace(**changes))


def _split_assignment(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigParseError(line.strip() or where, f"expected key=value ({where})")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


def parse_assignments(lines, where: str = "config") -> dict:
    values = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split_assignment(line, f"{where} line {n}")
        if key not in SCHEMA:
            raise ConfigParseError(key, "unknown key")
        values[key] = value
    return values


def resolve(values: dict) -> dict:
    """Defaults overlaid with ``values``; each entry converted to its schema type."""
    out = {}
    for key, (kind, default, _) in SCHEMA.items():
        text = values.get(key, default)
        try:
            out[key] = _PARSERS[kind](text)
        except (TypeError, ValueError) as exc:
            raise ConfigParseError(key, f"cannot parse {text!r} as {kind}") from exc
    return out


def build_config(resolved: dict, output_dir: str = "out") -> ExperimentConfig:
    r = resolved
    if r["model.variant"] not in VARIANTS:
        raise ConfigParseError("model.variant", f"must be one of {VARIANTS}")
    try:
        model = ModelConfig(
            depth=r["model.depth"], width=r["model.width"], heads=r["model.heads"],
            ffn_mult=r["model.ffn_mult"], vocab=r["model.vocab"], seq_len=r["model.seq_len"],
            variant=r["model.variant"], lam=r["model.lam"], epsilon=r["model.epsilon"],
            alpha_init=r["model.alpha_init"],
        )
    except InvalidConfigurationError as exc:
        found = re.match(r"model\.\w+", str(exc))
        key = found.group(0) if found else "model"
        raise ConfigParseError(key, str(exc)) from exc
    return ExperimentConfig(
        model=model, task=r["task.name"], copy_m=r["task.copy_m"], corpus=r["task.corpus"],
        optimizer=AdamHyper(learning_rate=r["optim.learning_rate"], beta1=r["optim.beta1"],
                            beta2=r["optim.beta2"], eps=r["optim.eps"], grad_clip=r["optim.grad_clip"]),
        batch_size=r["train.batch_size"], total_steps=r["train.total_steps"], eval_every=r["train.eval_every"],
        eval_batch_size=r["train.eval_batch_size"], probe_batch_size=r["train.probe_batch_size"],
        seeds=r["train.seeds"],
        experiment=ExperimentSettings(
            rank_depths=r["experiment.rank_depths"], ablation_depth=r["experiment.ablation_depth"],
            beta_depth=r["experiment.beta_depth"], beta_checkpoints=r["experiment.beta_checkpoints"],
            scale_depths=r["experiment.scale_depths"], param_budget=r["experiment.param_budget"],
            target_val_loss=r["experiment.target_val_loss"],
            accuracy_threshold=r["experiment.accuracy_threshold"],
        ),
        output_dir=output_dir,
    )


def parse_config(path=None, overrides=(), output_dir: str = "out") -> ExperimentConfig:
    """Read ``path`` (optional), apply ``key=value`` overrides, validate.

    Raises :class:`ConfigParseError` naming the offending key.
    """
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_assignments(fh, where=os.fspath(path)))
        except OSError as exc:
            raise ConfigParseError("--config", f"cannot read {path}: {exc}") from exc
    values.update(parse_assignments(overrides, where="override"))
    return build_config(resolve(values), output_dir=output_dir)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def to_flat(cfg: ExperimentConfig) -> dict:
    m, o, e = cfg.model, cfg.optimizer, cfg.experiment
    return {
        "model.depth": m.depth, "model.width": m.width, "model.heads": m.heads,
        "model.ffn_mult": m.ffn_mult, "model.vocab": m.vocab, "model.seq_len": m.seq_len,
        "model.variant": m.variant, "model.lam": m.lam, "model.epsilon": m.epsilon,
        "model.alpha_init": m.alpha_init,
        "task.name": cfg.task, "task.copy_m": cfg.copy_m, "task.corpus": cfg.corpus,
        "optim.learning_rate": o.learning_rate, "optim.beta1": o.beta1, "optim.beta2": o.beta2,
        "optim.eps": o.eps, "optim.grad_clip": o.grad_clip,
        "train.batch_size": cfg.batch_size, "train.total_steps": cfg.total_steps,
        "train.eval_every": cfg.eval_every, "train.eval_batch_size": cfg.eval_batch_size,
        "train.probe_batch_size": cfg.probe_batch_size, "train.seeds": cfg.seeds,
        "experiment.rank_depths": e.rank_depths, "experiment.ablation_depth": e.ablation_depth,
        "experiment.beta_depth": e.beta_depth, "experiment.beta_checkpoints": e.beta_checkpoints,
        "experiment.scale_depths": e.scale_depths, "experiment.param_budget": e.param_budget,
        "experiment.target_val_loss": e.target_val_loss,
        "experiment.accuracy_threshold": e.accuracy_threshold,
    }


def echo_text(cfg: ExperimentConfig) -> str:
    """Canonical, re-parseable rendering of the resolved config (sorted keys)."""
    flat = to_flat(cfg)
    return "".join(f"{k}={_fmt(flat[k])}\n" for k in sorted(flat))


def config_hash(cfg: ExperimentConfig, seed: Optional[int] = None) -> str:
    text = echo_text(cfg) + ("" if seed is None else f"run.seed={seed}\n")
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def defaults_table() -> str:
    """Markdown table of every key, its type and default."""
    rows = ["| key | type | default | meaning |", "|---|---|---|---|"]
    rows += [f"| `{k}` | {t} | `{d}` | {doc} |" for k, (t, d, doc) in SCHEMA.items()]
    return "\n".join(rows)
