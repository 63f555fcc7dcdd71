"""Multimodal wait-k GRU encoder-decoder.

Layout: a shared token embedding (source, target and the transposed output
projection), a 2-layer unidirectional GRU encoder, additive attention per
modality, a second attention that mixes the text and image contexts, and a
conditional GRU decoder whose two transitions sandwich the attention.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BOS
from .policy import Policy
from .tensor import ContractError, ShapeError, Tensor

CHECKPOINT_MAGIC = b"MSNM"
CHECKPOINT_VERSION = 1
EMB_INIT_STD = 1.0


@dataclass
class ModelConfig:
    vocab_size: int = 10_000
    emb_dim: int = 200
    hidden_dim: int = 400
    feature_dim: int = 2048
    image_len: int = 1
    att_dim: int | None = None  # None -> hidden_dim
    dropout_emb: float = 0.4
    dropout_enc: float = 0.5
    dropout_out: float = 0.5
    multimodal: bool = True
    seed: int = 0
    precision: str = "standard"

    def __post_init__(self):
        if self.att_dim is None:
            self.att_dim = self.hidden_dim
        for name in ("vocab_size", "emb_dim", "hidden_dim", "feature_dim", "image_len", "att_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("dropout_emb", "dropout_enc", "dropout_out"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        T.dtype_for(self.precision)

    @property
    def dtype(self):
        return T.dtype_for(self.precision)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, E, H, A, D = config.vocab_size, config.emb_dim, config.hidden_dim, config.att_dim, config.feature_dim
    shapes: dict[str, tuple[int, ...]] = {"emb": (V, E)}
    for name, n_in in (("enc0", E), ("enc1", H), ("dec0", E), ("dec1", H)):
        shapes[f"{name}.W"] = (n_in, 3 * H)
        shapes[f"{name}.U"] = (H, 3 * H)
        shapes[f"{name}.b"] = (3 * H,)
    att = ["att_txt"]
    if config.multimodal:
        att.append("att_img")
        shapes["img_proj.W"] = (D, H)
        shapes["img_proj.b"] = (H,)
    for name in att:
        shapes[f"{name}.Ws"] = (H, A)
        shapes[f"{name}.Wh"] = (H, A)
        shapes[f"{name}.b"] = (A,)
        shapes[f"{name}.v"] = (A, 1)
    if config.multimodal:
        shapes["fusion.Ws"] = (H, A)
        shapes["fusion.Wc"] = (H, A)
        shapes["fusion.b"] = (A,)
        shapes["fusion.v"] = (A, 1)
        shapes["proj_txt"] = (H, H)
        shapes["proj_img"] = (H, H)
    shapes["out.W"] = (H, E)
    shapes["out.b"] = (E,)
    shapes["out.bias"] = (V,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            replace(self.config),
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
        )

    def astype(self, precision: str) -> "ModelParams":
        dtype = T.dtype_for(precision)
        return ModelParams(
            replace(self.config, precision=precision),
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()},
        )

    def text_only(self) -> "ModelParams":
        """View sharing this model's text-path tensors with fusion bypassed."""
        cfg = replace(self.config, multimodal=False)
        names = param_shapes(cfg)
        return ModelParams(cfg, {k: self.tensors[k] for k in names})


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded initialisation.

    Biases start at zero, the shared embedding at N(0, 1), and the image
    projection weight at zero so a model that only ever sees zero features
    keeps ignoring the image content. Other matrices are Glorot-uniform.
    """
    rng = np.random.default_rng(config.seed)
    dtype = config.dtype
    tensors = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1 or name == "img_proj.W":
            data = np.zeros(shape)
        elif name == "emb":
            data = rng.normal(0.0, EMB_INIT_STD, shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


# ------------------------------------------------------------------ encoder


def _gru_cell(params: ModelParams, prefix: str, xw: Tensor, h: Tensor) -> Tensor:
    """One GRU transition; ``xw`` is the input already multiplied by W plus b."""
    H = params.config.hidden_dim
    hu = h @ params[f"{prefix}.U"]
    rz = T.sigmoid(xw[:, : 2 * H] + hu[:, : 2 * H])
    r, z = rz[:, :H], rz[:, H:]
    cand = T.tanh(xw[:, 2 * H:] + r * hu[:, 2 * H:])
    return cand + z * (h - cand)


def _run_gru(params: ModelParams, prefix: str, inputs: Tensor) -> Tensor:
    b, n = inputs.shape[:2]
    xw = inputs @ params[f"{prefix}.W"] + params[f"{prefix}.b"]
    h = Tensor(np.zeros((b, params.config.hidden_dim), dtype=inputs.dtype))
    states = []
    for j in range(n):
        h = _gru_cell(params, prefix, xw[:, j], h)
        states.append(h)
    return T.stack(states, axis=1)


def _as_batch_ids(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    return ids[None, :] if ids.ndim == 1 else ids


def encode_source(params: ModelParams, src_ids, rng: np.random.Generator | None = None) -> Tensor:
    """Text states ``[B, n, H]``. State j only depends on tokens 1..j.

    Passing ``rng`` switches on training-mode dropout.
    """
    ids = _as_batch_ids(src_ids)
    if ids.shape[1] == 0:
        raise ValueError("cannot encode an empty source sentence")
    cfg = params.config
    emb = T.dropout(T.embedding(params["emb"], ids), cfg.dropout_emb, rng)
    states = _run_gru(params, "enc1", _run_gru(params, "enc0", emb))
    return T.dropout(states, cfg.dropout_enc, rng)


def encode_image(params: ModelParams, features) -> Tensor:
    """Project ``[B, m, D]`` (or ``[m, D]``) features into ``[B, m, H]`` states."""
    cfg = params.config
    if not cfg.multimodal:
        raise ContractError("text-only model has no image encoder")
    feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=cfg.dtype))
    if feats.ndim == 2:
        feats = T.reshape(feats, (1, *feats.shape))
    if feats.shape[-1] != cfg.feature_dim:
        raise ShapeError(f"image feature dim {feats.shape[-1]} does not match model feature_dim {cfg.feature_dim}")
    return feats @ params["img_proj.W"] + params["img_proj.b"]


@dataclass
class EncoderStates:
    txt: Tensor                  # [B, n, H]
    src_len: np.ndarray          # [B]
    img: Tensor | None = None    # [B, m, H]
    txt_keys: Tensor | None = None
    img_keys: Tensor | None = None


def attention_keys(params: ModelParams, states: Tensor, modality: str) -> Tensor:
    return states @ params[f"att_{modality}.Wh"] + params[f"att_{modality}.b"]


def encode(params: ModelParams, src_ids, features=None, rng=None, src_len=None) -> EncoderStates:
    ids = _as_batch_ids(src_ids)
    txt = encode_source(params, ids, rng)
    lengths = np.full(ids.shape[0], ids.shape[1], dtype=np.int64) if src_len is None else np.asarray(src_len)
    img = None
    if params.config.multimodal:
        if features is None:
            raise ContractError("multimodal model needs image features (use zeros for the text-only regime)")
        img = encode_image(params, features)
        if img.shape[0] != ids.shape[0]:
            raise ShapeError(f"{ids.shape[0]} sentences but {img.shape[0]} image blocks")
    elif features is not None:
        raise ContractError("text-only model was given image features")
    enc = EncoderStates(txt, lengths, img)
    enc.txt_keys = attention_keys(params, txt, "txt")
    if img is not None:
        enc.img_keys = attention_keys(params, img, "img")
    return enc


# ---------------------------------------------------------------- attention


def modality_attention(
    params: ModelParams,
    s: Tensor,
    states: Tensor,
    modality: str,
    keys: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Additive attention of decoder state ``s [B, H]`` over ``states [B, L, H]``.

    Returns the context ``[B, H]`` and the weights ``[B, L]``. Positions with
    ``mask`` False get weight exactly 0.
    """
    if states.ndim != 3 or states.shape[1] == 0:
        raise ValueError(f"attention over an empty {modality} sequence")
    b, length, _ = states.shape
    if keys is None:
        keys = attention_keys(params, states, modality)
    query = T.reshape(s @ params[f"att_{modality}.Ws"], (b, 1, -1))
    energy = T.reshape(T.tanh(keys + query) @ params[f"att_{modality}.v"], (b, length))
    if mask is not None:
        energy = T.masked_fill(energy, mask, -np.inf)
    alpha = T.softmax(energy, axis=-1)
    context = T.sum(T.reshape(alpha, (b, length, 1)) * states, axis=1)
    return context, alpha


def prefix_mask(g_t, src_len, width: int) -> np.ndarray:
    g_t = np.broadcast_to(np.asarray(g_t, dtype=np.int64), np.shape(src_len))
    if np.any(g_t < 1) or np.any(g_t > src_len):
        raise ContractError(f"prefix length {g_t.tolist()} outside [1, source length {np.asarray(src_len).tolist()}]")
    return np.arange(width)[None, :] < g_t[:, None]


def masked_text_context(
    params: ModelParams,
    s: Tensor,
    h_txt: Tensor,
    g_t,
    keys: Tensor | None = None,
    src_len=None,
) -> tuple[Tensor, Tensor]:
    """Text context over the first ``g_t`` source states only."""
    b, n = h_txt.shape[:2]
    lengths = np.full(b, n, dtype=np.int64) if src_len is None else np.asarray(src_len)
    mask = prefix_mask(g_t, lengths, n)
    return modality_attention(params, s, h_txt, "txt", keys, mask)


def hierarchical_fusion(
    params: ModelParams,
    s: Tensor,
    c_txt: Tensor,
    c_img: Tensor | None,
) -> tuple[Tensor, Tensor]:
    """Second-level attention over the two contexts.

    Returns the fused context and ``beta [B, 2]`` ordered (image, text). A
    text-only model passes the text context through with beta = (0, 1).
    """
    b = c_txt.shape[0]
    if not params.config.multimodal:
        beta = np.zeros((b, 2), dtype=c_txt.dtype)
        beta[:, 1] = 1
        return c_txt, Tensor(beta)
    if c_img is None:
        raise ContractError("multimodal fusion needs an image context")
    query = s @ params["fusion.Ws"]
    energies = [
        T.tanh(query + c @ params["fusion.Wc"] + params["fusion.b"]) @ params["fusion.v"]
        for c in (c_img, c_txt)
    ]
    beta = T.softmax(T.concat(energies, axis=-1), axis=-1)
    fused = beta[:, 0:1] * (c_img @ params["proj_img"]) + beta[:, 1:2] * (c_txt @ params["proj_txt"])
    return fused, beta


# ------------------------------------------------------------------ decoder


@dataclass
class DecoderState:
    """Both transition outputs of the last step; ``layers[1]`` is the recurrent state."""

    layers: tuple[Tensor, Tensor]
    prev_token: np.ndarray


def initial_state(params: ModelParams, batch: int = 1) -> DecoderState:
    zeros = Tensor(np.zeros((batch, params.config.hidden_dim), dtype=params.config.dtype))
    return DecoderState((zeros, zeros), np.full(batch, BOS, dtype=np.int64))


@dataclass
class StepInfo:
    alpha_txt: Tensor
    alpha_img: Tensor | None
    beta: Tensor


def _decoder_step(
    params: ModelParams,
    prev: Tensor,
    xw: Tensor,
    enc: EncoderStates,
    mask: np.ndarray,
    out_weight: Tensor,
    rng,
) -> tuple[Tensor, Tensor, Tensor, StepInfo]:
    cfg = params.config
    h1 = _gru_cell(params, "dec0", xw, prev)
    c_txt, alpha_txt = modality_attention(params, h1, enc.txt, "txt", enc.txt_keys, mask)
    c_img = alpha_img = None
    if cfg.multimodal:
        c_img, alpha_img = modality_attention(params, h1, enc.img, "img", enc.img_keys)
    fused, beta = hierarchical_fusion(params, h1, c_txt, c_img)
    h2 = _gru_cell(params, "dec1", fused @ params["dec1.W"] + params["dec1.b"], h1)
    hidden = T.dropout(T.tanh(h2 @ params["out.W"] + params["out.b"]), cfg.dropout_out, rng)
    logits = hidden @ out_weight + params["out.bias"]
    return h1, h2, logits, StepInfo(alpha_txt, alpha_img, beta)


def decoder_step(
    params: ModelParams,
    state: DecoderState,
    y_prev,
    enc: EncoderStates,
    g_t,
    rng: np.random.Generator | None = None,
) -> tuple[DecoderState, Tensor, StepInfo]:
    """Consume ``y_prev`` and emit logits ``[B, V]`` with text read up to ``g_t``."""
    y_prev = np.atleast_1d(np.asarray(y_prev, dtype=np.int64))
    emb = T.embedding(params["emb"], y_prev)
    xw = emb @ params["dec0.W"] + params["dec0.b"]
    mask = prefix_mask(g_t, enc.src_len, enc.txt.shape[1])
    h1, h2, logits, info = _decoder_step(params, state.layers[1], xw, enc, mask, T.transpose(params["emb"]), rng)
    return DecoderState((h1, h2), y_prev), logits, info


def prefix_lengths(policy: Policy, t: int, src_len: np.ndarray) -> np.ndarray:
    if policy.k is None:
        return src_len.copy()
    return np.minimum(policy.k + t - 1, src_len)


def teacher_forced_logits(
    params: ModelParams,
    src,
    src_len: np.ndarray,
    tgt_in: np.ndarray,
    policy: Policy,
    images=None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits for every target position, time-major: ``[T * B, V]``.

    Step t attends to the first g(t) source states of each sentence.
    """
    enc = encode(params, src, images, rng, src_len)
    b, steps = tgt_in.shape
    xw_all = T.embedding(params["emb"], tgt_in) @ params["dec0.W"] + params["dec0.b"]
    out_weight = T.transpose(params["emb"])
    width = enc.txt.shape[1]
    state = initial_state(params, b).layers[1]
    logits = []
    for t in range(1, steps + 1):
        mask = np.arange(width)[None, :] < prefix_lengths(policy, t, enc.src_len)[:, None]
        _, state, step_logits, _ = _decoder_step(params, state, xw_all[:, t - 1], enc, mask, out_weight, rng)
        logits.append(step_logits)
    return T.concat(logits, axis=0)


# --------------------------------------------------------------- checkpoint


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    header = json.dumps({"model": asdict(params.config), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(header)), header]
    chunks.append(struct.pack("<I", len(params.tensors)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, precision: str | None = None) -> tuple[ModelParams, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, header_len = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(buf[pos:pos + header_len].decode("utf-8"))
        pos += header_len
        config = ModelConfig.from_dict(header["model"])
        if precision is not None:
            config = replace(config, precision=precision)
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = math.prod(shape)
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            tensors[name] = Tensor(data.astype(config.dtype), requires_grad=True, name=name)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    expected = param_shapes(config)
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise CheckpointError(f"{path}: parameter set does not match its model config")
    return ModelParams(config, {k: tensors[k] for k in expected}), header.get("meta", {})

