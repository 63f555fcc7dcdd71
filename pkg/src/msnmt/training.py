"""Prefix-to-prefix training with Adam and early stopping on dev BLEU."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import PAD, Batch, ImageFeatureStore, SentencePair, Vocab, make_batches
from .decoding import translate_pairs
from .evaluation import bleu
from .model import ModelParams, teacher_forced_logits
from .policy import Policy
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss or gradient; carries the last good model."""

    def __init__(self, message: str, last_good: ModelParams | None = None, report: "TrainReport | None" = None):
        super().__init__(message)
        self.last_good = last_good
        self.report = report


@dataclass
class TrainConfig:
    lr: float = 0.0004
    batch_size: int = 64
    patience: int = 15
    policy: str = "full"
    seed: int = 0
    max_epochs: int = 100
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("lr, batch_size, patience and max_epochs must be positive")
        Policy.parse(self.policy)

    @property
    def wait(self) -> Policy:
        return Policy.parse(self.policy)


# settings of the three regimes: SNMT, MSNMT pre-training on zero features, MSNMT fine-tuning
SNMT_DEFAULTS = TrainConfig(batch_size=64, patience=15)
PRETRAIN_DEFAULTS = TrainConfig(batch_size=64, patience=10)
FINETUNE_DEFAULTS = TrainConfig(batch_size=32, patience=5)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dev_bleu: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_bleu: float = -1.0
    stop_reason: str = ""

    def write_jsonl(self, path, stage: str | None = None) -> None:
        with open(path, "a", encoding="utf-8") as f:
            for rec in self.epochs:
                row = {"epoch": rec.epoch, "loss": rec.loss, "dev_bleu": rec.dev_bleu}
                if stage:
                    row["stage"] = stage
                f.write(json.dumps(row) + "\n")


def prefix_loss(params: ModelParams, batch: Batch, policy: Policy, rng: np.random.Generator | None = None) -> Tensor:
    """Mean token NLL where target step t only attends to source tokens 1..g(t)."""
    images = batch.images if params.config.multimodal else None
    logits = teacher_forced_logits(params, batch.src, batch.src_len, batch.tgt_in, policy, images, rng)
    return T.cross_entropy_loss(logits, batch.tgt_out.T.reshape(-1), ignore_index=PAD)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Tensor] | ModelParams,
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place. Parameters without a gradient are left alone."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def clip_gradients(grads: Mapping[str, np.ndarray | None], max_norm: float) -> dict[str, np.ndarray | None]:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
    if total <= max_norm:
        return dict(grads)
    scale = max_norm / (total + 1e-12)
    return {k: None if g is None else g * g.dtype.type(scale) for k, g in grads.items()}


class EarlyStopping:
    """Stop after ``patience`` epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def dev_bleu(
    params: ModelParams,
    vocab: Vocab,
    dev: Sequence[SentencePair],
    policy: Policy,
    feature_mode: str,
    store: ImageFeatureStore | None,
) -> float:
    hyps = translate_pairs(params, vocab, dev, policy, feature_mode, store)
    return bleu([vocab.decode(h.tokens) for h in hyps], [p.tgt for p in dev]).score


def train_stage(
    params: ModelParams,
    train: Sequence[SentencePair],
    dev: Sequence[SentencePair],
    vocab: Vocab,
    config: TrainConfig,
    feature_mode: str = "none",
    store: ImageFeatureStore | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Train a copy of ``params`` until dev BLEU stops improving; returns the best snapshot.

    ``feature_mode`` is "none" for a text-only model, "zeros" for the
    zero-feature regime (the store is never read) or "real".
    """
    if not dev:
        raise ValueError("early stopping needs a non-empty dev set")
    params = params.copy()
    cfg = params.config
    if cfg.multimodal and feature_mode == "none":
        raise ValueError("multimodal model needs feature_mode 'zeros' or 'real'")
    if not cfg.multimodal:
        feature_mode = "none"
    decode_mode = "zeros" if feature_mode == "zeros" else "real"
    policy = config.wait
    rng = np.random.default_rng(config.seed)
    adam = AdamState()
    stopper = EarlyStopping(config.patience)
    report = TrainReport()
    best = params.copy()
    names = list(params.tensors)

    for epoch in range(1, config.max_epochs + 1):
        batches = make_batches(
            train, vocab, config.batch_size, seed=config.seed * 100_003 + epoch,
            feature_mode=feature_mode, features=store,
            feature_shape=(cfg.image_len, cfg.feature_dim), dtype=cfg.dtype,
        )
        total, tokens = 0.0, 0
        for batch in batches:
            T.zero_grad(params)
            with Tape() as tape:
                loss = prefix_loss(params, batch, policy, rng)
            if not np.isfinite(loss.item()):
                report.stop_reason = "diverged"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best, report)
            T.backward(loss, tape)
            grads = {n: params[n].grad for n in names}
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            try:
                adam_step(params, grads, adam, config.lr, config.beta1, config.beta2, config.eps)
            except TrainingDiverged as exc:
                report.stop_reason = "diverged"
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best, report) from None
            n_tok = int((batch.tgt_out != PAD).sum())
            total += loss.item() * n_tok
            tokens += n_tok
        T.zero_grad(params)
        score = dev_bleu(params, vocab, dev, policy, decode_mode if cfg.multimodal else "none", store)
        report.epochs.append(EpochRecord(epoch, total / max(tokens, 1), score))
        if stopper.update(epoch, score):
            best = params.copy()
        log.info("epoch %d loss %.4f dev BLEU %.2f", epoch, total / max(tokens, 1), score)
        if stopper.should_stop:
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"
    report.best_epoch, report.best_bleu = stopper.best_epoch, stopper.best
    return best, report


def train_msnmt_pipeline(
    params: ModelParams,
    train: Sequence[SentencePair],
    dev: Sequence[SentencePair],
    vocab: Vocab,
    store: ImageFeatureStore,
    pretrain: TrainConfig = PRETRAIN_DEFAULTS,
    finetune: TrainConfig = FINETUNE_DEFAULTS,
) -> tuple[ModelParams, TrainReport, TrainReport]:
    """Pre-train on zero image features, then fine-tune from the best snapshot on real ones."""
    if not params.config.multimodal:
        raise ValueError("the two-stage pipeline trains a multimodal model")
    stage1, report1 = train_stage(params, train, dev, vocab, pretrain, "zeros")
    stage2, report2 = train_stage(stage1, train, dev, vocab, finetune, "real", store)
    return stage2, report1, report2


def save_report(reports: Sequence[tuple[str, TrainReport]], path) -> None:
    Path(path).write_text("", encoding="utf-8")
    for stage, rep in reports:
        rep.write_jsonl(path, stage)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
