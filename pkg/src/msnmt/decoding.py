"""Greedy simultaneous decoding with a recorded read/write schedule."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BOS, EOS, PAD, ImageFeatureStore, SentencePair, Vocab
from .model import ModelParams, decoder_step, encode, initial_state
from .policy import Policy
from .tensor import ContractError

log = logging.getLogger(__name__)

MAX_DECODE_LEN = 200


@dataclass
class DecodeTrace:
    """g(t) for every emitted token (EOS excluded) and the source length."""

    g: list[int]
    n: int

    @property
    def target_len(self) -> int:
        return len(self.g)

    def to_line(self) -> str:
        return ",".join(str(x) for x in self.g) + f"|{self.n}"

    @classmethod
    def from_line(cls, line: str) -> "DecodeTrace":
        head, sep, tail = line.strip().rpartition("|")
        if not sep:
            raise ValueError(f"trace line without '|': {line!r}")
        g = [int(x) for x in head.split(",")] if head else []
        return cls(g, int(tail))


@dataclass
class Hypothesis:
    tokens: list[int]
    trace: DecodeTrace = field(default_factory=lambda: DecodeTrace([], 0))


def default_max_len(n: int) -> int:
    return min(3 * n + 5, MAX_DECODE_LEN)


def translate(
    params: ModelParams,
    src_ids: Sequence[int],
    image,
    policy: Policy,
    max_len: int | None = None,
) -> Hypothesis:
    """Greedy decoding where step t sees only the first g(t) source tokens.

    ``image`` is an ``[m, D]`` block for a multimodal model (zeros for the
    text-only regime) and must be None for a text-only model.
    """
    n = len(src_ids)
    if n < 1:
        raise ValueError("cannot translate an empty source sentence")
    cfg = params.config
    if cfg.multimodal and image is None:
        raise ContractError("multimodal model needs an image (pass zeros for the zero-feature regime)")
    if not cfg.multimodal and image is not None:
        raise ContractError("text-only model cannot take an image")
    features = None if image is None else np.asarray(image, dtype=cfg.dtype)[None]
    enc = encode(params, np.asarray(src_ids, dtype=np.int64)[None], features)
    limit = default_max_len(n) if max_len is None else max_len
    state = initial_state(params, 1)
    y_prev = BOS
    tokens, g_record = [], []
    for t in range(1, limit + 1):
        g_t = policy.g(t, n)
        state, logits, _ = decoder_step(params, state, y_prev, enc, g_t)
        scores = logits.data[0].copy()
        scores[[PAD, BOS]] = -np.inf
        y = int(np.argmax(scores))
        if y == EOS:
            break
        tokens.append(y)
        g_record.append(g_t)
        y_prev = y
    return Hypothesis(tokens, DecodeTrace(g_record, n))


def translate_corpus(
    params: ModelParams,
    sources: Sequence[Sequence[int]],
    images: Sequence | None,
    policy: Policy,
    max_len: int | None = None,
) -> list[Hypothesis]:
    if images is not None and len(images) != len(sources):
        raise ContractError(f"{len(sources)} sentences but {len(images)} images")
    return [
        translate(params, src, None if images is None else images[i], policy, max_len)
        for i, src in enumerate(sources)
    ]


def corpus_images(
    pairs: Sequence[SentencePair],
    params: ModelParams,
    feature_mode: str,
    store: ImageFeatureStore | None = None,
    permutation: Sequence[int] | None = None,
) -> list[np.ndarray] | None:
    """Image block per sentence for ``feature_mode`` in {"real", "zeros"}.

    ``permutation[i]`` names the sentence whose image goes with sentence i.
    Text-only models get None regardless of the mode.
    """
    cfg = params.config
    if not cfg.multimodal:
        return None
    if feature_mode == "zeros":
        zeros = np.zeros((cfg.image_len, cfg.feature_dim), dtype=cfg.dtype)
        return [zeros] * len(pairs)
    if feature_mode != "real" or store is None:
        raise ContractError(f"feature mode {feature_mode!r} needs a feature store")
    order = range(len(pairs)) if permutation is None else permutation
    return [store[pairs[j].image_id] for j in order]


def translate_pairs(
    params: ModelParams,
    vocab: Vocab,
    pairs: Sequence[SentencePair],
    policy: Policy,
    feature_mode: str = "real",
    store: ImageFeatureStore | None = None,
    permutation: Sequence[int] | None = None,
) -> list[Hypothesis]:
    images = corpus_images(pairs, params, feature_mode, store, permutation)
    return translate_corpus(params, [vocab.encode(p.src) for p in pairs], images, policy)


def check_policy(trained: str | None, policy: Policy) -> None:
    if trained is not None and str(trained) != str(policy):
        log.warning("decoding with k=%s but the model was trained with k=%s", policy, trained)


def write_hypotheses(hyps: Sequence[Hypothesis], vocab: Vocab, path, trace_path=None) -> None:
    Path(path).write_text("".join(" ".join(vocab.decode(h.tokens)) + "\n" for h in hyps), encoding="utf-8")
    if trace_path is not None:
        Path(trace_path).write_text("".join(h.trace.to_line() + "\n" for h in hyps), encoding="utf-8")


def read_traces(path) -> list[DecodeTrace]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [DecodeTrace.from_line(line) for line in lines]


def read_tokens(path) -> list[list[str]]:
    """Hypothesis/reference file reader; blank lines are empty hypotheses."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.split() for line in lines]
