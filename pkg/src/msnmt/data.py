"""Corpora, vocabularies, image features, entity annotations and batching."""
from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_LEN = 100
FEATURE_MAGIC = b"MMFT"
FEATURE_VERSION = 1


class DataFormatError(ValueError):
    pass


# --------------------------------------------------------------------- vocab


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    def tokens(self) -> list[str]:
        """Non-reserved entries in id order."""
        return self.itos[len(RESERVED):]


def build_vocab(corpus: Iterable[Sequence[str]], cap: int = 10_000) -> Vocab:
    """Keep the ``cap - 4`` most frequent tokens; ties go to the earliest seen."""
    if cap < 5:
        raise ValueError(f"vocabulary cap must be >= 5, got {cap}")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for sentence in corpus:
        for tok in sentence:
            if tok in RESERVED:
                continue
            counts[tok] += 1
            first_seen.setdefault(tok, len(first_seen))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return Vocab(ranked[: cap - len(RESERVED)])


def save_vocab(vocab: Vocab, path) -> None:
    Path(path).write_text("".join(t + "\n" for t in vocab.tokens()), encoding="utf-8")


def load_vocab(path) -> Vocab:
    return Vocab([line for line in Path(path).read_text(encoding="utf-8").splitlines() if line])


# ------------------------------------------------------------------- corpora


@dataclass
class SentencePair:
    src: list[str]
    tgt: list[str]
    sid: str
    image_id: str


def _read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def read_sentences(path, max_len: int | None = None) -> list[list[str]]:
    """One whitespace-tokenized sentence per line; blank lines are rejected."""
    out = []
    for lineno, line in enumerate(_read_lines(path), 1):
        tokens = line.split()
        if not tokens:
            raise DataFormatError(f"{path}: empty line {lineno}")
        if max_len is not None and len(tokens) > max_len:
            raise DataFormatError(f"{path}: line {lineno} has {len(tokens)} tokens, limit is {max_len}")
        out.append(tokens)
    return out


def load_parallel_corpus(src_path, tgt_path, image_ids_path=None, max_len: int = MAX_LEN) -> list[SentencePair]:
    src = read_sentences(src_path, max_len)
    tgt = read_sentences(tgt_path)
    if len(src) != len(tgt):
        raise DataFormatError(f"line count mismatch: {src_path} has {len(src)}, {tgt_path} has {len(tgt)}")
    if image_ids_path is not None:
        image_ids = [line.strip() for line in _read_lines(image_ids_path)]
        if len(image_ids) != len(src):
            raise DataFormatError(f"line count mismatch: {image_ids_path} has {len(image_ids)}, corpus has {len(src)}")
    else:
        image_ids = [str(i) for i in range(len(src))]
    return [SentencePair(s, t, str(i), img) for i, (s, t, img) in enumerate(zip(src, tgt, image_ids))]


def write_parallel_corpus(pairs: Sequence[SentencePair], src_path, tgt_path, image_ids_path=None) -> None:
    Path(src_path).write_text("".join(" ".join(p.src) + "\n" for p in pairs), encoding="utf-8")
    Path(tgt_path).write_text("".join(" ".join(p.tgt) + "\n" for p in pairs), encoding="utf-8")
    if image_ids_path is not None:
        Path(image_ids_path).write_text("".join(p.image_id + "\n" for p in pairs), encoding="utf-8")


# ------------------------------------------------------------ image features


@dataclass
class ImageFeatureStore:
    """Image id -> ``[m, D]`` float32 block."""

    m: int
    dim: int
    features: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.features)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.features

    def __getitem__(self, image_id: str) -> np.ndarray:
        try:
            return self.features[image_id]
        except KeyError:
            raise LookupError(f"no image features for id {image_id!r}") from None

    def add(self, image_id: str, block) -> None:
        block = np.asarray(block, dtype=np.float32).reshape(self.m, self.dim)
        if not np.all(np.isfinite(block)):
            raise DataFormatError(f"non-finite feature values for image {image_id!r}")
        self.features[image_id] = block


def save_image_features(store: ImageFeatureStore, path) -> None:
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIII", FEATURE_VERSION, len(store), store.m, store.dim))
        for image_id, block in store.features.items():
            raw = image_id.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def load_image_features(path, expected_dim: int | None = None) -> ImageFeatureStore:
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {buf[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(buf) < 20:
        raise DataFormatError(f"{path}: truncated header")
    version, count, m, dim = struct.unpack_from("<IIII", buf, 4)
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported feature format version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise DataFormatError(f"{path}: feature dimension {dim} does not match configured {expected_dim}")
    store = ImageFeatureStore(m, dim)
    pos = 20
    payload = 4 * m * dim
    for i in range(count):
        if pos + 2 > len(buf):
            raise DataFormatError(f"{path}: truncated at record {i} of {count}")
        (id_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + id_len + payload > len(buf):
            raise DataFormatError(f"{path}: truncated at record {i} of {count}")
        image_id = buf[pos:pos + id_len].decode("utf-8")
        pos += id_len
        block = np.frombuffer(buf, dtype="<f4", count=m * dim, offset=pos).astype(np.float32)
        pos += payload
        store.add(image_id, block)
    if pos != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - pos} trailing bytes after {count} records")
    return store


# ------------------------------------------------------- entity annotations


@dataclass(frozen=True)
class Entity:
    entity_id: str
    tag: str
    src_span: tuple[int, int]
    tgt_span: tuple[int, int]


@dataclass
class EntityAnnotation:
    sid: str
    entities: list[Entity] = field(default_factory=list)
    excluded_ids: frozenset[str] = frozenset()

    def usable(self) -> list[Entity]:
        """Entities whose id occurs exactly once in the sentence."""
        counts = Counter(e.entity_id for e in self.entities)
        return [e for e in self.entities if counts[e.entity_id] == 1 and e.entity_id not in self.excluded_ids]


def _parse_span(text: str, where: str) -> tuple[int, int]:
    try:
        a, b = text.split("-")
        span = int(a), int(b)
    except ValueError:
        raise DataFormatError(f"{where}: bad span {text!r}") from None
    if span[0] < 1 or span[1] < span[0]:
        raise DataFormatError(f"{where}: span {text!r} out of bounds")
    return span


def load_entity_annotations(path, pairs: Sequence[SentencePair] | None = None) -> list[EntityAnnotation]:
    """Parse ``sid<TAB>id:tag:s-e:s-e ...`` records.

    When ``pairs`` is given, spans are checked against the sentence lengths.
    """
    lengths = {p.sid: (len(p.src), len(p.tgt)) for p in pairs} if pairs is not None else None
    out = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        sid, _, rest = line.partition("\t")
        sid = sid.strip()
        entities = []
        for field_ in rest.split():
            parts = field_.split(":")
            if len(parts) != 4:
                raise DataFormatError(f"{where}: malformed entity {field_!r}")
            eid, tag, src, tgt = parts
            ent = Entity(eid, tag, _parse_span(src, where), _parse_span(tgt, where))
            if lengths is not None:
                if sid not in lengths:
                    raise DataFormatError(f"{where}: unknown sentence id {sid!r}")
                n_src, n_tgt = lengths[sid]
                if ent.src_span[1] > n_src or ent.tgt_span[1] > n_tgt:
                    raise DataFormatError(f"{where}: entity {eid} span out of bounds for sentence {sid}")
            entities.append(ent)
        counts = Counter(e.entity_id for e in entities)
        out.append(EntityAnnotation(sid, entities, frozenset(i for i, c in counts.items() if c > 1)))
    return out


def save_entity_annotations(annotations: Sequence[EntityAnnotation], path) -> None:
    lines = []
    for ann in annotations:
        ents = " ".join(
            f"{e.entity_id}:{e.tag}:{e.src_span[0]}-{e.src_span[1]}:{e.tgt_span[0]}-{e.tgt_span[1]}"
            for e in ann.entities
        )
        lines.append(f"{ann.sid}\t{ents}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    src: np.ndarray        # [B, n_max] ids, PAD after each length
    src_len: np.ndarray    # [B]
    tgt_in: np.ndarray     # [B, T_max] BOS y_1 .. y_|Y|
    tgt_out: np.ndarray    # [B, T_max] y_1 .. y_|Y| EOS
    tgt_len: np.ndarray    # [B] |Y| + 1
    images: np.ndarray | None  # [B, m, D]
    index: np.ndarray      # positions of the pairs in the input list

    @property
    def size(self) -> int:
        return len(self.src_len)

    @property
    def src_mask(self) -> np.ndarray:
        return np.arange(self.src.shape[1])[None, :] < self.src_len[:, None]


FEATURE_MODES = ("none", "zeros", "real")


def encode_batch(
    pairs: Sequence[SentencePair],
    vocab: Vocab,
    index: Sequence[int],
    feature_mode: str = "none",
    features: ImageFeatureStore | None = None,
    feature_shape: tuple[int, int] | None = None,
    dtype=np.float32,
) -> Batch:
    if feature_mode not in FEATURE_MODES:
        raise ValueError(f"feature_mode must be one of {FEATURE_MODES}, got {feature_mode!r}")
    rows = [pairs[i] for i in index]
    src = [vocab.encode(p.src) for p in rows]
    tgt = [vocab.encode(p.tgt) for p in rows]
    b = len(rows)
    n_max = max(len(s) for s in src)
    t_max = max(len(t) for t in tgt) + 1
    src_ids = np.full((b, n_max), PAD, dtype=np.int64)
    tgt_in = np.full((b, t_max), PAD, dtype=np.int64)
    tgt_out = np.full((b, t_max), PAD, dtype=np.int64)
    for r, (s, t) in enumerate(zip(src, tgt)):
        src_ids[r, : len(s)] = s
        tgt_in[r, : len(t) + 1] = [BOS] + t
        tgt_out[r, : len(t) + 1] = t + [EOS]
    images = None
    if feature_mode == "zeros":
        if feature_shape is None:
            raise ValueError("zero-feature mode needs feature_shape=(m, D)")
        images = np.zeros((b, *feature_shape), dtype=dtype)
    elif feature_mode == "real":
        if features is None:
            raise ValueError("real-feature mode needs a feature store")
        images = np.stack([features[p.image_id] for p in rows]).astype(dtype)
    return Batch(
        src=src_ids,
        src_len=np.array([len(s) for s in src], dtype=np.int64),
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        tgt_len=np.array([len(t) + 1 for t in tgt], dtype=np.int64),
        images=images,
        index=np.asarray(index, dtype=np.int64),
    )


def make_batches(
    pairs: Sequence[SentencePair],
    vocab: Vocab,
    batch_size: int,
    seed: int,
    feature_mode: str = "none",
    features: ImageFeatureStore | None = None,
    feature_shape: tuple[int, int] | None = None,
    dtype=np.float32,
    shuffle: bool = True,
) -> list[Batch]:
    """Split ``pairs`` into padded batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(pairs))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(pairs))
    return [
        encode_batch(pairs, vocab, order[i:i + batch_size], feature_mode, features, feature_shape, dtype)
        for i in range(0, len(pairs), batch_size)
    ]


# ----------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    """Shape of a synthetic SVO -> SOV corpus.

    Source: ``s v m* o .``; target: ``O M* S V .``. ``min_len``/``max_len``
    count content tokens (subject, verb, modifiers, object), the final period
    comes on top. With ``image_informative`` the image of a sentence has the
    block of its object class switched on.
    """

    size: int = 200
    n_subjects: int = 6
    n_verbs: int = 6
    n_modifiers: int = 4
    n_objects: int = 8
    min_len: int = 3
    max_len: int = 4
    feature_dim: int = 32
    noise: float = 0.1
    image_informative: bool = True

    def validate(self) -> None:
        if self.min_len < 3:
            raise ValueError(f"sentences need at least subject, verb and object: min_len={self.min_len} < 3")
        if self.max_len < self.min_len:
            raise ValueError(f"max_len {self.max_len} < min_len {self.min_len}")
        if self.max_len - 3 > 0 and self.n_modifiers < 1:
            raise ValueError("max_len > 3 needs at least one modifier word")
        if min(self.n_subjects, self.n_verbs, self.n_objects) < 1 or self.size < 0:
            raise ValueError("word-class sizes must be positive and size non-negative")
        if self.feature_dim < self.n_objects:
            raise ValueError(f"feature_dim {self.feature_dim} cannot hold {self.n_objects} object blocks")
        if self.max_len + 1 > MAX_LEN:
            raise ValueError(f"max_len exceeds the source length limit {MAX_LEN}")


@dataclass
class SyntheticDataset:
    pairs: list[SentencePair]
    features: ImageFeatureStore
    annotations: list[EntityAnnotation]
    object_class: list[int]

    def split(self, start: int, stop: int) -> "SyntheticDataset":
        """Slice ``[start, stop)`` with sentence ids renumbered from 0."""
        pairs, anns = [], []
        for new, old in enumerate(range(start, stop)):
            p = self.pairs[old]
            pairs.append(SentencePair(p.src, p.tgt, str(new), p.image_id))
            a = self.annotations[old]
            anns.append(EntityAnnotation(str(new), a.entities, a.excluded_ids))
        store = ImageFeatureStore(self.features.m, self.features.dim)
        for p in pairs:
            store.features[p.image_id] = self.features[p.image_id]
        return SyntheticDataset(pairs, store, anns, self.object_class[start:stop])


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int) -> SyntheticDataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    block = spec.feature_dim // spec.n_objects
    store = ImageFeatureStore(1, spec.feature_dim)
    pairs, anns, classes = [], [], []
    for i in range(spec.size):
        subj = int(rng.integers(spec.n_subjects))
        verb = int(rng.integers(spec.n_verbs))
        obj = int(rng.integers(spec.n_objects))
        n_mods = int(rng.integers(spec.min_len, spec.max_len + 1)) - 3
        mods = [int(m) for m in rng.integers(spec.n_modifiers, size=n_mods)] if n_mods else []
        src = [f"s{subj}", f"v{verb}"] + [f"m{m}" for m in mods] + [f"o{obj}", "."]
        tgt = [f"O{obj}"] + [f"M{m}" for m in mods] + [f"S{subj}", f"V{verb}", "."]
        image_id = f"img{i}"
        feat = rng.normal(0.0, spec.noise, spec.feature_dim)
        if spec.image_informative:
            feat[obj * block:(obj + 1) * block] += 1.0
        store.add(image_id, feat)
        obj_pos = len(src) - 1
        subj_tgt = 2 + n_mods
        ents = [
            Entity("1", "subject", (1, 1), (subj_tgt, subj_tgt)),
            Entity("2", "object", (obj_pos, obj_pos), (1, 1)),
        ]
        pairs.append(SentencePair(src, tgt, str(i), image_id))
        anns.append(EntityAnnotation(str(i), ents))
        classes.append(obj)
    return SyntheticDataset(pairs, store, anns, classes)


def index_annotations(annotations: Sequence[EntityAnnotation]) -> Mapping[str, EntityAnnotation]:
    return {a.sid: a for a in annotations}
