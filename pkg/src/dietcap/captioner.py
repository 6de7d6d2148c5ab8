"""Dual-stream transformer captioner with ablation variants.

The encoder runs two streams: a global one (a small trainable convolutional
image encoder, or a frozen precomputed vector behind a projection, each
followed by one transformer encoder layer) and a local one (projected
regional feature rows through a stack of encoder layers). Their outputs are
concatenated, global row first, into the visual embedding the decoder
cross-attends to. Regions carry no positional encoding: they are an
unordered set, and the tests pin permutation equivariance. The decoder is a
standard autoregressive transformer with sinusoidal positions, causal
masking, and teacher-forced mean cross entropy.

Variants: "gl" (both streams), "g" (global only), "l" (local only), and
"gl-frozen" (precomputed global vector, projection trained, conv stack
absent). A variant only ever owns the parameters it uses, so ablation
containment is structural, not a runtime switch.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigError,
    DataError,
    FileFormatError,
    LengthError,
    NumericError,
    ShapeError,
)
from .vocab import BOS, EOS

VARIANTS = ("gl", "g", "l", "gl-frozen")
FFN_MULT = 4
CHECKPOINT_MAGIC = b"GLTC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    n_regions: int = 8
    feature_dim: int = 16
    global_feature_dim: int = 16
    image_size: int = 32
    image_channels: int = 3
    max_caption_len: int = 30
    variant: str = "gl"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant {self.variant!r} not one of {VARIANTS}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.max_caption_len < 2:
            raise ConfigError(f"max_caption_len must be >= 2, got {self.max_caption_len}")
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size must cover the 4 reserved ids, got {self.vocab_size}")
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "n_regions",
                     "feature_dim", "global_feature_dim", "image_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.uses_image() and self.image_size < 15:
            raise ConfigError(
                f"image_size must be >= 15 for the 3-stage conv encoder, got {self.image_size}"
            )

    def uses_image(self) -> bool:
        return self.variant in ("gl", "g")

    def uses_frozen_global(self) -> bool:
        return self.variant == "gl-frozen"

    def uses_local(self) -> bool:
        return self.variant in ("gl", "l", "gl-frozen")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_heads": self.n_heads, "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers, "n_regions": self.n_regions,
            "feature_dim": self.feature_dim, "global_feature_dim": self.global_feature_dim,
            "image_size": self.image_size, "image_channels": self.image_channels,
            "max_caption_len": self.max_caption_len, "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown model config fields {sorted(extra)}")
        return cls(**raw)


class RegionalFeatures:
    """Exactly n_regions rows; short inputs get zero rows plus a mask."""

    def __init__(self, rows: np.ndarray, padding: np.ndarray) -> None:
        self.rows = np.asarray(rows, dtype=np.float64)
        self.padding = np.asarray(padding, dtype=bool)
        if self.rows.ndim != 2:
            raise ShapeError(f"feature rows must be 2-D, got {self.rows.shape}")
        if self.padding.shape != (self.rows.shape[0],):
            raise ShapeError("padding mask length must equal the row count")
        if not np.isfinite(self.rows).all():
            raise NumericError("regional features must be finite")

    @classmethod
    def from_array(cls, arr: np.ndarray, n_regions: int) -> "RegionalFeatures":
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeError(f"features must be [k, width], got {a.shape}")
        k = a.shape[0]
        if k > n_regions:
            raise DataError(f"{k} feature rows exceed the configured {n_regions} regions")
        rows = np.zeros((n_regions, a.shape[1]) if k else (n_regions, a.shape[1]), dtype=np.float64)
        rows[:k] = a
        padding = np.arange(n_regions) >= k
        return cls(rows, padding)

    @property
    def all_padding(self) -> bool:
        return bool(self.padding.all())


@dataclass(frozen=True)
class GlobalFeature:
    """Either a raw image raster or a precomputed vector, never both."""

    image: np.ndarray | None = None
    vector: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.image is None) == (self.vector is None):
            raise ConfigError("global feature needs exactly one of image or vector")
        if self.image is not None and self.image.ndim != 3:
            raise ShapeError(f"image raster must be [C, H, W], got {self.image.shape}")
        if self.vector is not None and self.vector.ndim != 1:
            raise ShapeError(f"global vector must be 1-D, got {self.vector.shape}")


@dataclass
class CaptionTokens:
    """Decoded ids, BOS first and EOS last; truncated marks a forced stop."""

    ids: list[int]
    truncated: bool = False

    def __post_init__(self) -> None:
        if len(self.ids) < 2 or self.ids[0] != BOS or self.ids[-1] != EOS:
            raise DataError(f"caption ids must be BOS ... EOS, got {self.ids}")

    @property
    def body(self) -> list[int]:
        return self.ids[1:-1]


@dataclass
class VisualEncoding:
    """Encoder output rows plus which of them the decoder may attend to."""

    rows: ad.Tensor
    key_padding: np.ndarray
    all_padding: bool = False


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, name: str,
                 gain: float = 1.0) -> None:
        self.name = name
        self.w = ad.parameter(ad.xavier_uniform(rng, d_in, d_out, (d_in, d_out), gain))
        self.b = ad.parameter(np.zeros(d_out))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def named_params(self) -> list[tuple[str, ad.Tensor]]:
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class LayerNormParams:
    def __init__(self, d: int, name: str) -> None:
        self.name = name
        self.g = ad.parameter(np.ones(d))
        self.b = ad.parameter(np.zeros(d))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.layer_norm(x, self.g, self.b)

    def named_params(self) -> list[tuple[str, ad.Tensor]]:
        return [(f"{self.name}.g", self.g), (f"{self.name}.b", self.b)]


class MultiHeadAttention:
    """Scaled dot-product attention; per-head scale is sqrt(d_model/n_heads)."""

    def __init__(self, rng, d_model: int, n_heads: int, name: str) -> None:
        self.name = name
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.d_model = d_model
        self.wq = Linear(rng, d_model, d_model, f"{name}.wq")
        self.wk = Linear(rng, d_model, d_model, f"{name}.wk")
        self.wv = Linear(rng, d_model, d_model, f"{name}.wv")
        self.wo = Linear(rng, d_model, d_model, f"{name}.wo")
        self.last_weights: np.ndarray | None = None

    def _split(self, x: ad.Tensor, s: int) -> ad.Tensor:
        return ad.permute(ad.reshape(x, (s, self.n_heads, self.head_dim)), (1, 0, 2))

    def __call__(self, query: ad.Tensor, keyval: ad.Tensor,
                 mask: np.ndarray | None = None, record: bool = False) -> ad.Tensor:
        sq, sk = query.shape[0], keyval.shape[0]
        q = self._split(self.wq(query), sq)
        k = self._split(self.wk(keyval), sk)
        v = self._split(self.wv(keyval), sk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            full = np.broadcast_to(mask, (self.n_heads, sq, sk)).copy()
            scores = ad.add(scores, ad.constant(full))
        attn = ad.softmax(scores, axis=-1)
        if record:
            self.last_weights = np.array(attn.data, copy=True)
        ctx = ad.matmul(attn, v)
        merged = ad.reshape(ad.permute(ctx, (1, 0, 2)), (sq, self.d_model))
        return self.wo(merged)

    def named_params(self) -> list[tuple[str, ad.Tensor]]:
        out = []
        for lin in (self.wq, self.wk, self.wv, self.wo):
            out.extend(lin.named_params())
        return out


class FeedForward:
    def __init__(self, rng, d_model: int, name: str) -> None:
        self.w1 = Linear(rng, d_model, FFN_MULT * d_model, f"{name}.w1")
        self.w2 = Linear(rng, FFN_MULT * d_model, d_model, f"{name}.w2")

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return self.w2(ad.relu(self.w1(x)))

    def named_params(self) -> list[tuple[str, ad.Tensor]]:
        return self.w1.named_params() + self.w2.named_params()


class EncoderLayer:
    """Post-LN: self-attention and feed-forward, each behind residual+LN."""

    def __init__(self, rng, d_model: int, n_heads: int, name: str) -> None:
        self.attn = MultiHeadAttention(rng, d_model, n_heads, f"{name}.attn")
        self.ln1 = LayerNormParams(d_model, f"{name}.ln1")
        self.ffn = FeedForward(rng, d_model, f"{name}.ffn")
        self.ln2 = LayerNormParams(d_model, f"{name}.ln2")

    def __call__(self, x: ad.Tensor, mask: np.ndarray | None, record: bool) -> ad.Tensor:
        x = self.ln1(ad.add(x, self.attn(x, x, mask, record)))
        return self.ln2(ad.add(x, self.ffn(x)))

    def named_params(self) -> list[tuple[str, ad.Tensor]]:
        return (self.attn.named_params() + self.ln1.named_params()
                + self.ffn.named_params() + self.ln2.named_params())


class DecoderLayer:
    def __init__(self, rng, d_model: int, n_heads: int, name: str) -> None:
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads, f"{name}.self")
        self.ln1 = LayerNormParams(d_model, f"{name}.ln1")
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads, f"{name}.cross")
        self.ln2 = LayerNormParams(d_model, f"{name}.ln2")
        self.ffn = FeedForward(rng, d_model, f"{name}.ffn")
        self.ln3 = LayerNormParams(d_model, f"{name}.ln3")

    def __call__(self, x: ad.Tensor, enc: ad.Tensor, causal: np.ndarray,
                 cross_mask: np.ndarray | None, record: bool) -> ad.Tensor:
        x = self.ln1(ad.add(x, self.self_attn(x, x, causal, record)))
        x = self.ln2(ad.add(x, self.cross_attn(x, enc, cross_mask, record)))
        return self.ln3(ad.add(x, self.ffn(x)))

    def named_params(self) -> list[tuple[str, ad.Tensor]]:
        return (self.self_attn.named_params() + self.ln1.named_params()
                + self.cross_attn.named_params() + self.ln2.named_params()
                + self.ffn.named_params() + self.ln3.named_params())


class ConvImageEncoder:
    """Three strided 3x3 conv stages, ReLU, global average pool to d_model.

    Convolution is im2col patch gathering (a single flat-index take per
    stage) followed by an ordinary matmul, so the tape needs no conv op.
    """

    def __init__(self, rng, cfg: ModelConfig, name: str) -> None:
        self.name = name
        channels = [cfg.image_channels, max(4, cfg.d_model // 4),
                    max(8, cfg.d_model // 2), cfg.d_model]
        self.stages: list[Linear] = []
        for i in range(3):
            c_in, c_out = channels[i], channels[i + 1]
            self.stages.append(Linear(rng, c_in * 9, c_out, f"{name}.conv{i}"))
        self.channels = channels
        self._idx_cache: dict[tuple[int, int, int], tuple[np.ndarray, int, int]] = {}

    def _im2col(self, c: int, h: int, w: int) -> tuple[np.ndarray, int, int]:
        key = (c, h, w)
        if key not in self._idx_cache:
            oh = (h - 3) // 2 + 1
            ow = (w - 3) // 2 + 1
            oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
            ky, kx = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
            rows = (oy.reshape(-1, 1) * 2 + ky.reshape(-1)) * w
            cols = ox.reshape(-1, 1) * 2 + kx.reshape(-1)
            patch = rows + cols  # [oh*ow, 9]
            chan = (np.arange(c) * h * w).reshape(1, -1, 1)
            idx = (patch[:, None, :] + chan).reshape(oh * ow, c * 9)
            self._idx_cache[key] = (idx.astype(np.int64), oh, ow)
        return self._idx_cache[key]

    def __call__(self, image: np.ndarray) -> ad.Tensor:
        x = ad.constant(image)
        c, h, w = image.shape
        for stage in self.stages:
            idx, oh, ow = self._im2col(c, h, w)
            cols = ad.take(x, idx)
            y = ad.relu(stage(cols))
            c = stage.w.shape[1]
            x = ad.permute(ad.reshape(y, (oh, ow, c)), (2, 0, 1))
            h, w = oh, ow
        pooled = ad.mean_(ad.reshape(x, (c, h * w)), axis=1, keepdims=True)
        return ad.transpose(pooled)  # [1, d_model]

    def named_params(self) -> list[tuple[str, ad.Tensor]]:
        out = []
        for s in self.stages:
            out.extend(s.named_params())
        return out


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d_model)
    pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


class GLTransformer:
    """The captioner; construction draws every parameter from one Philox
    stream, so (config, seed) fully determines the initial weights."""

    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        self.cfg = cfg
        rng = np.random.Generator(np.random.Philox(seed))
        self.record_attention = False
        self._pe = sinusoidal_positions(cfg.max_caption_len + 1, cfg.d_model)

        self.local_proj: Linear | None = None
        self.local_layers: list[EncoderLayer] = []
        if cfg.uses_local():
            self.local_proj = Linear(rng, cfg.feature_dim, cfg.d_model, "local.proj")
            self.local_layers = [
                EncoderLayer(rng, cfg.d_model, cfg.n_heads, f"local.enc{i}")
                for i in range(cfg.n_enc_layers)
            ]

        self.image_encoder: ConvImageEncoder | None = None
        self.frozen_proj: Linear | None = None
        self.global_layer: EncoderLayer | None = None
        if cfg.uses_image():
            self.image_encoder = ConvImageEncoder(rng, cfg, "global.image")
        elif cfg.uses_frozen_global():
            self.frozen_proj = Linear(rng, cfg.global_feature_dim, cfg.d_model, "global.proj")
        if cfg.variant != "l":
            self.global_layer = EncoderLayer(rng, cfg.d_model, cfg.n_heads, "global.enc")

        self.embedding = ad.parameter(
            ad.xavier_uniform(rng, cfg.vocab_size, cfg.d_model, (cfg.vocab_size, cfg.d_model))
        )
        self.dec_layers = [
            DecoderLayer(rng, cfg.d_model, cfg.n_heads, f"dec.layer{i}")
            for i in range(cfg.n_dec_layers)
        ]
        # small output gain keeps initial logits near uniform
        self.out_proj = Linear(rng, cfg.d_model, cfg.vocab_size, "dec.out", gain=0.1)

    def parameters(self) -> dict[str, ad.Tensor]:
        named: list[tuple[str, ad.Tensor]] = []
        if self.local_proj is not None:
            named.extend(self.local_proj.named_params())
        for layer in self.local_layers:
            named.extend(layer.named_params())
        if self.image_encoder is not None:
            named.extend(self.image_encoder.named_params())
        if self.frozen_proj is not None:
            named.extend(self.frozen_proj.named_params())
        if self.global_layer is not None:
            named.extend(self.global_layer.named_params())
        named.append(("dec.embedding", self.embedding))
        for layer in self.dec_layers:
            named.extend(layer.named_params())
        named.extend(self.out_proj.named_params())
        return dict(named)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # encoding

    def encode_local(self, features: RegionalFeatures) -> ad.Tensor:
        if self.local_proj is None:
            raise ConfigError(f"variant {self.cfg.variant!r} has no local stream")
        if features.rows.shape != (self.cfg.n_regions, self.cfg.feature_dim):
            raise ShapeError(
                f"features shape {features.rows.shape} != "
                f"({self.cfg.n_regions}, {self.cfg.feature_dim})"
            )
        x = self.local_proj(ad.constant(features.rows))
        mask = None
        if features.padding.any() and not features.all_padding:
            n = self.cfg.n_regions
            mask = np.zeros((n, n))
            mask[:, features.padding] = -np.inf
        elif features.all_padding:
            mask = np.full((self.cfg.n_regions, self.cfg.n_regions), -np.inf)
        for layer in self.local_layers:
            x = layer(x, mask, self.record_attention)
        return x

    def encode_global(self, g: GlobalFeature) -> ad.Tensor:
        if self.image_encoder is not None:
            if g.image is None:
                raise ConfigError(f"variant {self.cfg.variant!r} expects an image raster")
            img = np.asarray(g.image, dtype=np.float64)
            expect = (self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size)
            if img.shape != expect:
                raise ShapeError(f"image shape {img.shape} != {expect}")
            if not np.isfinite(img).all():
                raise DataError("image raster must be finite")
            row = self.image_encoder(img)
        elif self.frozen_proj is not None:
            if g.vector is None:
                raise ConfigError(f"variant {self.cfg.variant!r} expects a frozen global vector")
            vec = np.asarray(g.vector, dtype=np.float64)
            if vec.shape != (self.cfg.global_feature_dim,):
                raise ShapeError(
                    f"global vector shape {vec.shape} != ({self.cfg.global_feature_dim},)"
                )
            row = self.frozen_proj(ad.constant(vec.reshape(1, -1)))
        else:
            raise ConfigError(f"variant {self.cfg.variant!r} has no global stream")
        assert self.global_layer is not None
        return self.global_layer(row, None, self.record_attention)

    def encode(self, image: np.ndarray | None = None,
               features: RegionalFeatures | None = None,
               global_vec: np.ndarray | None = None) -> VisualEncoding:
        """Variant-consistent fusion: global row 0, local rows after."""
        v = self.cfg.variant
        if v in ("gl", "g") and image is None:
            raise ConfigError(f"variant {v!r} requires an image")
        if v == "gl-frozen" and global_vec is None:
            raise ConfigError("variant 'gl-frozen' requires a precomputed global vector")
        if self.cfg.uses_local() and features is None:
            raise ConfigError(f"variant {v!r} requires regional features")
        if v == "g" and features is not None:
            raise ConfigError("variant 'g' takes no regional features")
        if v == "l" and (image is not None or global_vec is not None):
            raise ConfigError("variant 'l' takes no image or global vector")

        parts: list[ad.Tensor] = []
        padding: list[np.ndarray] = []
        all_padding = False
        if v in ("gl", "g"):
            parts.append(self.encode_global(GlobalFeature(image=image)))
            padding.append(np.array([False]))
        elif v == "gl-frozen":
            parts.append(self.encode_global(GlobalFeature(vector=global_vec)))
            padding.append(np.array([False]))
        if self.cfg.uses_local():
            assert features is not None
            parts.append(self.encode_local(features))
            padding.append(features.padding)
            all_padding = features.all_padding  # no real region rows at all
        rows = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return VisualEncoding(rows, np.concatenate(padding), all_padding)

    # decoding

    def _decoder_logits(self, enc: VisualEncoding, input_ids: np.ndarray) -> ad.Tensor:
        t = input_ids.shape[0]
        if t > self.cfg.max_caption_len + 1:
            raise LengthError(
                f"decoder input length {t} exceeds max_caption_len + 1 = "
                f"{self.cfg.max_caption_len + 1}"
            )
        emb = ad.take_rows(self.embedding, input_ids)
        # scale embeddings by sqrt(d_model) so unit-amplitude sinusoids do
        # not drown token identity at Xavier init
        emb = ad.mul(emb, math.sqrt(self.cfg.d_model))
        x = ad.add(emb, ad.constant(self._pe[:t]))
        causal = np.triu(np.full((t, t), -np.inf), k=1)
        cross_mask = None
        if enc.key_padding.any():
            cross_mask = np.zeros((t, enc.key_padding.shape[0]))
            cross_mask[:, enc.key_padding] = -np.inf
        for layer in self.dec_layers:
            x = layer(x, enc.rows, causal, cross_mask, self.record_attention)
        return self.out_proj(x)

    def loss(self, enc: VisualEncoding, caption_ids: Sequence[int]) -> ad.Tensor:
        ids = np.asarray(caption_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.shape[0] < 2 or ids[0] != BOS or ids[-1] != EOS:
            raise DataError(f"caption ids must be BOS ... EOS, got shape {ids.shape}")
        logits = self._decoder_logits(enc, ids[:-1])
        return ad.cross_entropy(logits, ids[1:])

    def decode_step(self, enc: VisualEncoding, prefix: Sequence[int]) -> np.ndarray:
        """Next-token logits for a BOS-prefixed id sequence."""
        ids = np.asarray(prefix, dtype=np.int64)
        if ids.shape[0] < 1 or ids[0] != BOS:
            raise DataError(f"prefix must start with BOS, got {list(ids[:3])}...")
        with ad.no_grad():
            logits = self._decoder_logits(enc, ids)
        return np.array(logits.data[-1], dtype=np.float64)

    def greedy_decode(self, enc: VisualEncoding, max_len: int | None = None) -> CaptionTokens:
        limit = self.cfg.max_caption_len if max_len is None else max_len
        if limit < 1:
            raise ConfigError(f"max_len must be >= 1, got {limit}")
        ids = [BOS]
        for _ in range(limit):
            logits = self.decode_step(enc, ids)
            ids.append(int(np.argmax(logits)))  # ties go to the lowest id
            if ids[-1] == EOS:
                return CaptionTokens(ids)
        ids.append(EOS)
        return CaptionTokens(ids, truncated=True)

    def beam_decode(self, enc: VisualEncoding, beam_width: int,
                    max_len: int | None = None) -> CaptionTokens:
        """Length-normalized beam search; width 1 reproduces greedy exactly.

        Hypotheses are ranked by mean token log-prob; final ties go to the
        lexicographically smallest id sequence.
        """
        if beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {beam_width}")
        limit = self.cfg.max_caption_len if max_len is None else max_len
        beams: list[tuple[tuple[int, ...], float, bool]] = [((BOS,), 0.0, False)]
        for _ in range(limit):
            candidates: list[tuple[tuple[int, ...], float, bool]] = []
            for ids, logp, done in beams:
                if done:
                    candidates.append((ids, logp, done))
                    continue
                logits = self.decode_step(enc, list(ids))
                lse = float(np.max(logits) + np.log(np.exp(logits - np.max(logits)).sum()))
                logprobs = logits - lse
                top = sorted(range(len(logprobs)), key=lambda i: (-logprobs[i], i))[:beam_width]
                for tok in top:
                    candidates.append((ids + (tok,), logp + float(logprobs[tok]), tok == EOS))
            candidates.sort(key=lambda c: (-c[1] / (len(c[0]) - 1), c[0]))
            beams = candidates[:beam_width]
            if all(done for _, _, done in beams):
                break
        ids, _, done = beams[0]
        if done:
            return CaptionTokens(list(ids))
        return CaptionTokens(list(ids) + [EOS], truncated=True)

    def attention_maps(self) -> dict[str, np.ndarray]:
        """Recorded weights from the last forward with record_attention on."""
        out = {}
        modules: list[MultiHeadAttention] = []
        for layer in self.local_layers:
            modules.append(layer.attn)
        if self.global_layer is not None:
            modules.append(self.global_layer.attn)
        for layer in self.dec_layers:
            modules.extend([layer.self_attn, layer.cross_attn])
        for m in modules:
            if m.last_weights is not None:
                out[m.name] = m.last_weights
        return out


@dataclass
class TrainSample:
    """One (visual input, caption) pair; unused fields stay None."""

    caption_ids: np.ndarray
    image: np.ndarray | None = None
    features: RegionalFeatures | None = None
    global_vec: np.ndarray | None = None

    def encode_with(self, model: GLTransformer) -> VisualEncoding:
        return model.encode(image=self.image, features=self.features,
                            global_vec=self.global_vec)


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    first_batch_loss: float | None = None


def train_captioner(model: GLTransformer, dataset: Sequence[TrainSample],
                    epochs: int = 10, batch_size: int = 10, lr: float = 5e-4,
                    seed: int = 0,
                    log_fn: Callable[[int, float], None] | None = None) -> TrainResult:
    """Teacher-forced Adam training; per-epoch mean sample loss recorded.

    Shuffling comes from its own Philox stream keyed by seed, so the same
    (model seed, train seed, data) always yields the same loss curve.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    vsize = model.cfg.vocab_size
    for s in dataset:
        ids = np.asarray(s.caption_ids)
        if ids.max() >= vsize or ids.min() < 0:
            raise DataError(f"caption id {ids.max()} outside vocabulary of size {vsize}")
    opt = ad.Adam(model.parameters(), lr=lr)
    rng = np.random.Generator(np.random.Philox(seed))
    result = TrainResult()
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            batch = [dataset[int(i)] for i in order[start:start + batch_size]]
            losses = [model.loss(s.encode_with(model), s.caption_ids) for s in batch]
            mean_loss = ad.mul(ad.stack_sum(losses), 1.0 / len(losses))
            mean_loss.backward()
            opt.step()
            opt.zero_grad()
            value = float(mean_loss.data)
            if result.first_batch_loss is None:
                result.first_batch_loss = value
            total += value * len(batch)
        epoch_mean = total / n
        result.epoch_losses.append(epoch_mean)
        if log_fn is not None:
            log_fn(epoch, epoch_mean)
    return result


# checkpoint container

_DTYPE_TAGS = {0: np.float32}


def save_checkpoint(model: GLTransformer, path: str | Path) -> None:
    """Parameters as float32 records behind a length-prefixed config blob."""
    blob = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, p in model.parameters().items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", 0, p.data.ndim))
            for dim in p.data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> GLTransformer:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FileFormatError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        try:
            cfg = ModelConfig.from_dict(json.loads(fh.read(blob_len).decode("utf-8")))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise FileFormatError(f"{path}: bad config blob ({e})") from e
        records: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            tag, rank = struct.unpack("<BB", fh.read(2))
            if tag not in _DTYPE_TAGS:
                raise FileFormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise FileFormatError(f"{path}: truncated payload for {name!r}")
            records[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)
    model = GLTransformer(cfg, seed=0)
    params = model.parameters()
    missing = params.keys() - records.keys()
    extra = records.keys() - params.keys()
    if missing or extra:
        raise FileFormatError(
            f"{path}: parameter table mismatch (missing {sorted(missing)[:3]}, "
            f"extra {sorted(extra)[:3]})"
        )
    for name, arr in records.items():
        p = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise FileFormatError(
                f"{path}: {name!r} has shape {arr.shape}, expected {p.data.shape}"
            )
        p.data = arr.astype(ad.default_dtype())
    return model
