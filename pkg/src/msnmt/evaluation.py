"""Translation quality, latency, significance and the modality/entity analyses."""
from __future__ import annotations

import configparser
import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DataFormatError, EntityAnnotation, Entity, ImageFeatureStore, SentencePair, Vocab
from .decoding import DecodeTrace, Hypothesis, translate_pairs
from .model import ModelParams
from .policy import Policy
from .tensor import ContractError

log = logging.getLogger(__name__)

MAX_ORDER = 4


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


# ---------------------------------------------------------------------- BLEU


@dataclass
class BleuScore:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self) -> str:
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        return f"BLEU = {self.score:.2f}, {p} (BP={self.brevity_penalty:.3f}, hyp_len={self.hyp_len}, ref_len={self.ref_len})"


def sentence_stats(hyp, ref) -> np.ndarray:
    """``[matches_1..4, totals_1..4, hyp_len, ref_len]`` for one pair."""
    hyp, ref = _tokens(hyp), _tokens(ref)
    stats = np.zeros(2 * MAX_ORDER + 2, dtype=np.int64)
    for n in range(1, MAX_ORDER + 1):
        h = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        stats[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        stats[MAX_ORDER + n - 1] = max(len(hyp) - n + 1, 0)
    stats[-2], stats[-1] = len(hyp), len(ref)
    return stats


def _bleu_vector(stats: np.ndarray) -> np.ndarray:
    """Corpus BLEU for each row of summed statistics ``[..., 10]``."""
    stats = np.asarray(stats, dtype=np.float64)
    matches, totals = stats[..., :MAX_ORDER], stats[..., MAX_ORDER:2 * MAX_ORDER]
    hyp_len, ref_len = stats[..., -2], stats[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(totals > 0, matches / np.where(totals > 0, totals, 1), 0.0)
        ok = np.all(prec > 0, axis=-1)
        log_mean = np.where(ok, np.log(np.where(prec > 0, prec, 1)).mean(axis=-1), 0.0)
        bp = np.where(hyp_len < ref_len, np.exp(1 - ref_len / np.where(hyp_len > 0, hyp_len, 1)), 1.0)
    return np.where(ok & (hyp_len > 0), 100 * bp * np.exp(log_mean), 0.0)


def bleu_from_stats(stats: np.ndarray) -> BleuScore:
    stats = np.asarray(stats)
    matches, totals = stats[:MAX_ORDER], stats[MAX_ORDER:2 * MAX_ORDER]
    hyp_len, ref_len = int(stats[-2]), int(stats[-1])
    precisions = [float(m) / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1 - ref_len / hyp_len)
    else:
        bp = 1.0
    if all(p > 0 for p in precisions) and hyp_len > 0:
        score = 100 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    else:
        score = 0.0
    return BleuScore(score, precisions, bp, hyp_len, ref_len)


def corpus_stats(hypotheses: Sequence, references: Sequence) -> np.ndarray:
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    return np.array([sentence_stats(h, r) for h, r in zip(hypotheses, references)], dtype=np.int64).reshape(
        len(hypotheses), 2 * MAX_ORDER + 2
    )


def bleu(hypotheses: Sequence, references: Sequence) -> BleuScore:
    """Corpus BLEU-4 with multi-bleu.perl semantics (no smoothing, one reference)."""
    return bleu_from_stats(corpus_stats(hypotheses, references).sum(axis=0))


# ------------------------------------------------------------------- latency


def average_lagging(trace: DecodeTrace) -> float:
    """Average Lagging of one sentence, in source tokens.

    Sums up to the first step whose g(t) covers the whole source; when the
    hypothesis stops before that, every emitted step counts.
    """
    if trace.target_len == 0:
        raise ValueError("average lagging is undefined for an empty hypothesis")
    n = trace.n
    r = trace.target_len / n
    tau = next((t for t, g in enumerate(trace.g, 1) if g == n), trace.target_len)
    return sum(trace.g[t - 1] - (t - 1) / r for t in range(1, tau + 1)) / tau


@dataclass
class ALScore:
    per_sentence: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_sentence)) if self.per_sentence else 0.0


def corpus_al(traces: Sequence[DecodeTrace]) -> ALScore:
    """Mean AL; empty hypotheses have no defined lag and are skipped."""
    return ALScore([average_lagging(t) for t in traces if t.target_len > 0])


# -------------------------------------------------------------- significance


@dataclass
class SignificanceResult:
    bleu_a: float
    bleu_b: float
    difference: float
    p_value: float
    significant: bool
    alpha: float
    resamples: int


def bootstrap_significance(
    hyps_a: Sequence,
    hyps_b: Sequence,
    references: Sequence,
    resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> SignificanceResult:
    """Paired bootstrap resampling over sentences.

    The p-value is the share of resampled corpora on which BLEU(A) - BLEU(B)
    does not keep the sign of the observed difference (zero counts as a flip).
    """
    if not (len(hyps_a) == len(hyps_b) == len(references)):
        raise ContractError(f"misaligned inputs: {len(hyps_a)}, {len(hyps_b)}, {len(references)} lines")
    if resamples < 100:
        raise ValueError(f"need at least 100 resamples, got {resamples}")
    stats_a = corpus_stats(hyps_a, references)
    stats_b = corpus_stats(hyps_b, references)
    observed = bleu_from_stats(stats_a.sum(0)).score - bleu_from_stats(stats_b.sum(0)).score
    n = len(references)
    rng = np.random.default_rng(seed)
    flips = 0
    for start in range(0, resamples, 200):
        idx = rng.integers(0, n, size=(min(200, resamples - start), n))
        diff = _bleu_vector(stats_a[idx].sum(axis=1)) - _bleu_vector(stats_b[idx].sum(axis=1))
        flips += int(np.count_nonzero(diff * np.sign(observed) <= 0))
    p = flips / resamples
    return SignificanceResult(
        bleu_from_stats(stats_a.sum(0)).score,
        bleu_from_stats(stats_b.sum(0)).score,
        observed,
        p,
        p < alpha,
        alpha,
        resamples,
    )


# --------------------------------------------------------------- adversarial


def reversal_permutation(n: int) -> list[int]:
    """Sentence i gets the image of sentence n-1-i.

    For odd n the middle sentence would keep its own image; it swaps partners
    with its right-hand neighbour so no sentence sees its congruent image.
    """
    if n < 2:
        raise ValueError("incongruent pairing needs at least 2 sentences")
    perm = list(range(n - 1, -1, -1))
    if n % 2:
        mid = n // 2
        perm[mid], perm[mid + 1] = perm[mid + 1], perm[mid]
        log.info("odd test set: sentence %d paired with image %d instead of its own", mid, perm[mid])
    return perm


@dataclass
class AdversarialResult:
    congruent: BleuScore
    incongruent: BleuScore
    significance: SignificanceResult
    permutation: list[int]
    congruent_hyps: list[Hypothesis] = field(repr=False, default_factory=list)
    incongruent_hyps: list[Hypothesis] = field(repr=False, default_factory=list)


def adversarial_eval(
    params: ModelParams,
    vocab: Vocab,
    pairs: Sequence[SentencePair],
    store: ImageFeatureStore,
    policy: Policy,
    resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> AdversarialResult:
    """Decode with each sentence's own image, then with the images reversed."""
    if not params.config.multimodal:
        raise ContractError("adversarial evaluation needs a multimodal model")
    perm = reversal_permutation(len(pairs))
    refs = [p.tgt for p in pairs]
    cong = translate_pairs(params, vocab, pairs, policy, "real", store)
    incong = translate_pairs(params, vocab, pairs, policy, "real", store, perm)
    cong_tok = [vocab.decode(h.tokens) for h in cong]
    incong_tok = [vocab.decode(h.tokens) for h in incong]
    sig = bootstrap_significance(cong_tok, incong_tok, refs, resamples, alpha, seed)
    return AdversarialResult(bleu(cong_tok, refs), bleu(incong_tok, refs), sig, perm, cong, incong)


# ------------------------------------------------------------------ entities


@dataclass(frozen=True)
class CountableEntity:
    sentence: int          # position in the test set
    sid: str
    entity: Entity
    target_tokens: tuple[str, ...]


def count_total_entities(
    pairs: Sequence[SentencePair],
    annotations: Sequence[EntityAnnotation],
    k: int,
) -> list[CountableEntity]:
    """Entities whose target starts before wait-k has read all their source tokens.

    An entity counts when the largest source index of its span exceeds
    g(t_start), t_start being the first target position of its reference span.
    Entity ids occurring more than once in a sentence are skipped.
    """
    policy = Policy.wait(k)
    position = {p.sid: i for i, p in enumerate(pairs)}
    out = []
    for ann in annotations:
        if ann.sid not in position:
            raise DataFormatError(f"annotation for unknown sentence {ann.sid!r}")
        i = position[ann.sid]
        pair = pairs[i]
        n = len(pair.src)
        for ent in ann.usable():
            if ent.src_span[1] > n or ent.tgt_span[1] > len(pair.tgt):
                raise DataFormatError(f"sentence {ann.sid}: entity {ent.entity_id} span does not fit the sentence")
            t_start = ent.tgt_span[0]
            if ent.src_span[1] > policy.g(t_start, n):
                tokens = tuple(pair.tgt[ent.tgt_span[0] - 1:ent.tgt_span[1]])
                out.append(CountableEntity(i, ann.sid, ent, tokens))
    return out


def _contains(seq: Sequence[str], sub: Sequence[str]) -> bool:
    m = len(sub)
    return any(tuple(seq[i:i + m]) == tuple(sub) for i in range(len(seq) - m + 1))


def count_correct_entities(hypotheses: Sequence, countable: Sequence[CountableEntity]) -> int:
    """Countable entities whose reference tokens appear contiguously in the hypothesis."""
    return sum(1 for ce in countable if _contains(_tokens(hypotheses[ce.sentence]), ce.target_tokens))


@dataclass
class EntityRow:
    k: int
    total: int
    correct: dict[str, int]
    upper_bound: dict[str, int]


@dataclass
class EntityReport:
    rows: list[EntityRow]

    def systems(self) -> list[str]:
        names: list[str] = []
        for row in self.rows:
            for name in list(row.correct) + list(row.upper_bound):
                if name not in names:
                    names.append(name)
        return names

    def to_table(self) -> str:
        systems = self.systems()
        header = ["k", "total"] + [f"{s}_wait_k" for s in systems] + [f"{s}_full" for s in systems]
        lines = ["\t".join(header)]
        for row in self.rows:
            cells = [str(row.k), str(row.total)]
            cells += [str(row.correct.get(s, "")) for s in systems]
            cells += [str(row.upper_bound.get(s, "")) for s in systems]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def entity_report(
    pairs: Sequence[SentencePair],
    annotations: Sequence[EntityAnnotation],
    ks: Sequence[int],
    wait_hyps: Mapping[str, Mapping[int, Sequence]],
    full_hyps: Mapping[str, Sequence] | None = None,
) -> EntityReport:
    """Rows shaped like (k, total, correct per wait-k system, correct per Full system)."""
    rows = []
    for k in ks:
        countable = count_total_entities(pairs, annotations, k)
        correct = {name: count_correct_entities(by_k[k], countable) for name, by_k in wait_hyps.items() if k in by_k}
        upper = {name: count_correct_entities(h, countable) for name, h in (full_hyps or {}).items()}
        rows.append(EntityRow(k, len(countable), correct, upper))
    return EntityReport(rows)


# ------------------------------------------------------------------- reports


def write_report(sections: Mapping[str, Mapping[str, object]], path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    for name, values in sections.items():
        parser[name] = {k: _fmt(v) for k, v in values.items()}
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return str(v)


def read_report(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    return {s: dict(parser[s]) for s in parser.sections()}


def average_reports(paths: Sequence) -> dict[str, dict[str, object]]:
    """Average every numeric field across reports (e.g. one per seed)."""
    reports = [read_report(p) for p in paths]
    if not reports:
        raise ValueError("no reports to average")
    out: dict[str, dict[str, object]] = {}
    for section, values in reports[0].items():
        merged: dict[str, object] = {}
        for key, value in values.items():
            try:
                nums = [float(r[section][key]) for r in reports]
            except (KeyError, ValueError):
                merged[key] = value
                continue
            merged[key] = float(np.mean(nums))
        merged["runs"] = len(reports)
        out[section] = merged
    return out


PLOT_COLUMNS = ("k", "bleu_snmt", "bleu_msnmt", "al_snmt", "al_msnmt")


def update_plot_csv(path, k: str, system: str, bleu_score: float, al: float) -> None:
    """Insert or update the row for ``k`` with one system's BLEU and AL."""
    if system not in ("snmt", "msnmt"):
        raise ValueError(f"system must be 'snmt' or 'msnmt', got {system!r}")
    path = Path(path)
    rows: dict[str, dict[str, str]] = {}
    if path.exists():
        with open(path, newline="", encoding="utf-8") as f:
            rows = {r["k"]: r for r in csv.DictReader(f)}
    row = rows.setdefault(str(k), {c: "" for c in PLOT_COLUMNS} | {"k": str(k)})
    row[f"bleu_{system}"] = f"{bleu_score:.4f}"
    row[f"al_{system}"] = f"{al:.4f}"

    def order(key: str):
        return (1, 0) if key == "full" else (0, int(key))

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=PLOT_COLUMNS)
        writer.writeheader()
        for key in sorted(rows, key=order):
            writer.writerow(rows[key])
