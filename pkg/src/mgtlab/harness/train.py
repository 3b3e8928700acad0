"""Single training runs: data stream, evaluation, trace capture."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import tensor as T
from ..config import ExperimentConfig, config_hash
from ..errors import NumericalError
from ..metrics import BetaStats, RankProfile, beta_stats, copy_accuracy, rank_profile
from ..model import forward_model, has_ddl, init_params, layer_states
from .data import (PROBE_STREAM, TRAIN_STREAM, VAL_STREAM, char_lm_batch, gen_copy_batch,
                   load_char_corpus, next_token_targets)
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalRecord:
    step: int
    train_loss: float
    val_loss: float
    accuracy: float


@dataclass
class Snapshot:
    step: int
    rank: Optional[RankProfile]
    beta: Optional[BetaStats]


@dataclass
class RunResult:
    config_hash: str
    seed: int
    variant: str
    depth: int
    width: int
    param_count: int
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    wall_seconds: float = 0.0
    aborted: bool = False
    error: str = ""
    batch_digest: int = 0
    params: Optional[dict] = field(default=None, repr=False)

    @property
    def run_id(self) -> str:
        return f"{self.variant}-L{self.depth}-D{self.width}-s{self.seed}-{self.config_hash[:8]}"

    @property
    def final(self) -> Optional[EvalRecord]:
        return self.records[-1] if self.records else None

    @property
    def rank(self) -> Optional[RankProfile]:
        return self.snapshots[-1].rank if self.snapshots else None

    @property
    def beta(self) -> Optional[BetaStats]:
        return self.snapshots[-1].beta if self.snapshots else None


class TaskData:
    """Training batches keyed by ``(seed, step)`` plus seed-independent val/probe sets.

    Batches depend only on the task settings, never on the model, so runs
    of different variants with the same seed see identical data.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.corpus = load_char_corpus(cfg.corpus) if cfg.task == "char_lm" else None

    @property
    def vocab(self) -> int:
        return self.corpus.vocab_size if self.corpus is not None else self.cfg.model.vocab

    def _draw(self, size: int, seed: int, index: int, stream: int, split: str = "train"):
        c = self.cfg
        if self.corpus is None:
            return gen_copy_batch(c.model.vocab, c.copy_m, size, seed, index, stream=stream,
                                  seq_len=c.model.seq_len)
        ids = self.corpus.train if split == "train" else self.corpus.val
        return char_lm_batch(ids, c.model.seq_len, size, seed, index, stream=stream)

    def train_batch(self, seed: int, step: int):
        return self._draw(self.cfg.batch_size, seed, step, TRAIN_STREAM)

    def val_batch(self):
        return self._draw(self.cfg.eval_batch_size, 0, 0, VAL_STREAM, split="val")

    def probe_batch(self):
        return self._draw(self.cfg.probe_batch_size, 0, 0, PROBE_STREAM, split="val")


def batch_loss(tokens, mask, model_cfg, params):
    targets, loss_mask = next_token_targets(tokens, mask)
    logits, _ = forward_model(tokens, model_cfg, params)
    return T.softmax_cross_entropy(logits, targets, loss_mask)


def evaluate(tokens, mask, model_cfg, params) -> tuple[float, float]:
    """Validation ``(loss, accuracy)`` without recording a tape."""
    targets, loss_mask = next_token_targets(tokens, mask)
    logits, _ = forward_model(tokens, model_cfg, params)
    loss = T.softmax_cross_entropy(logits, targets, loss_mask).item()
    return loss, copy_accuracy(logits, targets, loss_mask)


def capture(tokens, model_cfg, params, step: int) -> Snapshot:
    _, traces, x0 = forward_model(tokens, model_cfg, params, return_embedded=True)
    states = layer_states(traces, x0)
    betas = beta_stats(traces) if has_ddl(model_cfg.variant) and model_cfg.depth > 0 else None
    # a depth-0 stack has a single state and no profile
    rank = rank_profile(states) if len(states) > 1 else None
    return Snapshot(step, rank, betas)


def snapshot_steps(total_steps: int, fractions) -> list:
    return sorted({int(round(f * total_steps)) for f in fractions})


def train_run(cfg: ExperimentConfig, seed: int, snapshot_at=(), data: Optional[TaskData] = None,
              keep_params: bool = False) -> RunResult:
    """Train one model from scratch and evaluate it.

    Evaluates at step 0, every ``eval_every`` steps and at the final step.
    Rank and gate statistics are captured on the seed-0 probe batch at the
    end of training and at any step listed in ``snapshot_at``.  A numerical
    failure ends the run early with ``aborted`` set; records gathered so far
    are kept.  ``keep_params`` attaches the trained parameters to the result.
    """
    started = time.perf_counter()
    data = data or TaskData(cfg)
    model_cfg = cfg.model.replace(seed=seed, vocab=data.vocab)
    params = init_params(model_cfg)
    result = RunResult(config_hash=config_hash(cfg, seed), seed=seed, variant=model_cfg.variant,
                       depth=model_cfg.depth, width=model_cfg.width,
                       param_count=int(sum(p.size for p in params.values())))
    val_tokens, val_mask = data.val_batch()
    probe_tokens, _ = data.probe_batch()
    wanted = set(snapshot_at) - {cfg.total_steps}
    state = AdamState()
    interval_losses = []
    digest = hashlib.sha256()

    def eval_and_record(step: int, train_loss: float) -> None:
        vl, acc = evaluate(val_tokens, val_mask, model_cfg, params)
        if not (math.isfinite(vl) and math.isfinite(train_loss)):
            raise NumericalError(f"non-finite loss at step {step}")
        result.records.append(EvalRecord(step, float(train_loss), vl, acc))
        log.debug("%s step %d train %.4f val %.4f acc %.3f", result.run_id, step, train_loss, vl, acc)

    try:
        tokens, mask = data.train_batch(seed, 1)
        eval_and_record(0, batch_loss(tokens, mask, model_cfg, params).item())
        if 0 in wanted:
            result.snapshots.append(capture(probe_tokens, model_cfg, params, 0))
        for step in range(1, cfg.total_steps + 1):
            tokens, mask = data.train_batch(seed, step)
            digest.update(np.ascontiguousarray(tokens, dtype=np.int64).tobytes())
            digest.update(np.ascontiguousarray(mask).tobytes())
            with T.GradTape():
                loss = batch_loss(tokens, mask, model_cfg, params)
            grads = T.backward(loss)
            adam_step(params, {t.name: g for t, g in grads.items()}, state, cfg.optimizer)
            interval_losses.append(loss.item())
            if step % cfg.eval_every == 0 or step == cfg.total_steps:
                eval_and_record(step, float(np.mean(interval_losses)))
                interval_losses = []
            if step in wanted:
                result.snapshots.append(capture(probe_tokens, model_cfg, params, step))
        result.snapshots.append(capture(probe_tokens, model_cfg, params, cfg.total_steps))
    except NumericalError as exc:
        result.aborted = True
        result.error = f"{type(exc).__name__}: {exc}"
        log.warning("run %s aborted: %s", result.run_id, result.error)
    # 52 bits: exactly representable as a float64 metric value
    result.batch_digest = int(digest.hexdigest()[:13], 16)
    result.wall_seconds = time.perf_counter() - started
    if keep_params:
        result.params = params
    return result
