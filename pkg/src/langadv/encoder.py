"""A small post-LN transformer encoder (BERT layout) on top of :mod:`autodiff`."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn_width: int | None = None
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.ffn_width is None:
            object.__setattr__(self, "ffn_width", 4 * self.hidden)
        for field in ("vocab_size", "hidden", "layers", "heads", "ffn_width", "max_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


@dataclass
class TokenBatch:
    ids: np.ndarray  # (B, S) int
    mask: np.ndarray  # (B, S) {0, 1}

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.int64)
        if self.ids.ndim != 2 or self.ids.shape != self.mask.shape:
            raise ValueError(f"ids {self.ids.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if np.any(self.mask.sum(axis=1) == 0):
            raise ValueError("every row needs at least one unmasked position")

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]], pad_id: int = 0) -> "TokenBatch":
        """Right-pad variable-length id sequences."""
        width = max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = 1
        return cls(ids, mask)

    def __len__(self):
        return self.ids.shape[0]


class EncoderParameters:
    """Every encoder weight, keyed by a stable dotted name."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, Parameter]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator | None = None) -> "EncoderParameters":
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        H, F = config.hidden, config.ffn_width
        t: dict[str, Parameter] = {}

        def normal(name, *shape):
            t[name] = Parameter(name, rng.normal(0.0, 0.02, size=shape))

        def const(name, value, *shape):
            t[name] = Parameter(name, np.full(shape, value))

        normal("embed.tokens", config.vocab_size, H)
        normal("embed.positions", config.max_len, H)
        const("embed.ln.gain", 1.0, H)
        const("embed.ln.bias", 0.0, H)
        for i in range(config.layers):
            p = f"layer{i}."
            for proj in ("query", "key", "value", "out"):
                normal(p + f"attn.{proj}.weight", H, H)
                const(p + f"attn.{proj}.bias", 0.0, H)
            const(p + "attn.ln.gain", 1.0, H)
            const(p + "attn.ln.bias", 0.0, H)
            normal(p + "ffn.in.weight", H, F)
            const(p + "ffn.in.bias", 0.0, F)
            normal(p + "ffn.out.weight", F, H)
            const(p + "ffn.out.bias", 0.0, H)
            const(p + "ffn.ln.gain", 1.0, H)
            const(p + "ffn.ln.bias", 0.0, H)
        return cls(config, t)

    def __getitem__(self, name: str) -> Parameter:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)


def _linear(x: Tensor, params: EncoderParameters, prefix: str) -> Tensor:
    return ad.matmul(x, params[prefix + ".weight"]) + params[prefix + ".bias"]


def _split_heads(x: Tensor, B: int, S: int, config: EncoderConfig) -> Tensor:
    return ad.transpose(x.reshape(B, S, config.heads, config.head_dim), (0, 2, 1, 3))


def encode(params: EncoderParameters, batch: TokenBatch, return_attention: bool = False):
    """Per-token final-layer states, shape (B, S, hidden).

    With ``return_attention`` the per-layer attention maps (B, heads, S, S) are
    returned alongside.
    """
    config = params.config
    B, S = batch.ids.shape
    if S > config.max_len:
        raise ValueError(f"sequence length {S} exceeds max_len {config.max_len}")
    if batch.ids.min() < 0 or batch.ids.max() >= config.vocab_size:
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")

    pos = params["embed.positions"]
    x = ad.embedding(params["embed.tokens"], batch.ids) + ad.embedding(pos, np.arange(S))
    x = ad.layer_norm(x, params["embed.ln.gain"], params["embed.ln.bias"])

    key_mask = batch.mask[:, None, None, :]
    scale = 1.0 / math.sqrt(config.head_dim)
    maps = []
    for i in range(config.layers):
        p = f"layer{i}."
        q = _split_heads(_linear(x, params, p + "attn.query"), B, S, config)
        k = _split_heads(_linear(x, params, p + "attn.key"), B, S, config)
        v = _split_heads(_linear(x, params, p + "attn.value"), B, S, config)
        scores = ad.matmul(q, ad.transpose(k)) * scale
        attn = ad.softmax(scores, mask=key_mask)
        maps.append(attn.data)
        ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)).reshape(B, S, config.hidden)
        x = ad.layer_norm(x + _linear(ctx, params, p + "attn.out"), params[p + "attn.ln.gain"], params[p + "attn.ln.bias"])
        ff = _linear(ad.gelu(_linear(x, params, p + "ffn.in")), params, p + "ffn.out")
        x = ad.layer_norm(x + ff, params[p + "ffn.ln.gain"], params[p + "ffn.ln.bias"])
    if return_attention:
        return x, maps
    return x


def mean_pool(h: Tensor, mask) -> Tensor:
    """Mean of the unmasked token states per row, shape (B, hidden)."""
    return ad.masked_mean(h, mask)


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"LADVCKPT"
#   4 bytes   uint32 header length N
#   N bytes   UTF-8 JSON header: {"encoder": EncoderConfig fields, "meta": {...},
#             "tensors": [{"name", "shape", "offset"}, ...]}
#   payload   each tensor's values as float64 '<f8', row-major, at its offset
#             (bytes from the start of the payload)

MAGIC = b"LADVCKPT"


def write_checkpoint(fh: BinaryIO, config: EncoderConfig, params: Sequence[Parameter], meta: dict | None = None):
    entries, offset = [], 0
    for p in params:
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        offset += p.data.size * 8
    header = json.dumps(
        {"encoder": asdict(config), "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    for p in params:
        fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(fh: BinaryIO) -> tuple[EncoderConfig, dict[str, np.ndarray], dict]:
    if fh.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<I", fh.read(4))
    header = json.loads(fh.read(n).decode("utf-8"))
    payload = fh.read()
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        raw = payload[e["offset"]: e["offset"] + 8 * count]
        if len(raw) != 8 * count:
            raise ValueError(f"truncated checkpoint at tensor {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return EncoderConfig(**header["encoder"]), arrays, header["meta"]
