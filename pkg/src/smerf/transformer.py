"""SD-map transformer encoder and BEV map cross-attention.

The encoder projects the polyline-sequence tensor to width ``H`` and applies
``L`` post-norm blocks::

    x = LN(x + MHSA(x));  x = LN(x + FFN(x)),   FFN = W2 . GELU(W1 . x)

Padded polylines are excluded as attention keys. Fusion is a plain multi-head
cross-attention from BEV queries to map features plus a residual add.

All forward code is written against :mod:`smerf.autodiff`, so the same
functions give inference (under :func:`~smerf.autodiff.no_grad`) and exact
reverse-mode gradients.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    L: int = 6
    H: int = 256
    heads: int = 4
    ffn_width: int | None = None  # defaults to 2*H
    input_width: int = 11 * 32 + 7

    def __post_init__(self):
        if self.ffn_width is None:
            object.__setattr__(self, "ffn_width", 2 * self.H)
        for name in ("L", "H", "heads", "ffn_width", "input_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be >= 1")
        if self.H % self.heads:
            raise ValueError(f"H={self.H} is not divisible by heads={self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MapFeatures:
    data: np.ndarray  # (M, H)
    mask: np.ndarray  # (M,) bool, True = valid row

    @property
    def M(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def _linear(rng, fan_in: int, fan_out: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    bound = math.sqrt(1.0 / fan_in)
    W = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    return W, np.zeros(fan_out, dtype=dtype)


def attention_weight_shapes(prefix: str, H: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for p in ("q", "k", "v", "o"):
        out += [(f"{prefix}W{p}", (H, H)), (f"{prefix}b{p}", (H,))]
    return out


def _init_attention(rng, prefix: str, H: int, dtype) -> dict[str, np.ndarray]:
    w = {}
    for p in ("q", "k", "v", "o"):
        w[f"{prefix}W{p}"], w[f"{prefix}b{p}"] = _linear(rng, H, H, dtype)
    return w


def _init_layer_norm(prefix: str, H: int, dtype) -> dict[str, np.ndarray]:
    return {f"{prefix}gamma": np.ones(H, dtype=dtype), f"{prefix}beta": np.zeros(H, dtype=dtype)}


def init_weights(config: EncoderConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Encoder weights; linear layers ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    H, F = config.H, config.ffn_width
    w: dict[str, np.ndarray] = {}
    w["input.W"], w["input.b"] = _linear(rng, config.input_width, H, dtype)
    for layer in range(config.L):
        p = f"layers.{layer}."
        w.update(_init_attention(rng, p + "attn.", H, dtype))
        w.update(_init_layer_norm(p + "ln1.", H, dtype))
        w[p + "ffn.W1"], w[p + "ffn.b1"] = _linear(rng, H, F, dtype)
        w[p + "ffn.W2"], w[p + "ffn.b2"] = _linear(rng, F, H, dtype)
        w.update(_init_layer_norm(p + "ln2.", H, dtype))
    return w


def init_fusion_weights(H: int, seed: int, dtype=np.float32, prefix: str = "") -> dict[str, np.ndarray]:
    """Weights of one map cross-attention site (query/key/value/output projections)."""
    return _init_attention(np.random.default_rng(seed), prefix, H, dtype)


# ---------------------------------------------------------------------------
# Graph-building forward functions
# ---------------------------------------------------------------------------

def linear(x, W: Tensor, b: Tensor) -> Tensor:
    return ad.matmul(x, W) + b


def multi_head_attention(queries, keys, params: Mapping[str, Tensor], prefix: str, heads: int,
                         key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads; returns the output projection.

    ``queries`` is ``(..., Q, H)``, ``keys`` is ``(..., M, H)`` (used for keys and
    values) and ``key_mask`` is ``(..., M)``; leading batch axes must agree.
    """
    H = queries.shape[-1]
    dh = H // heads
    lead = tuple(queries.shape[:-2])
    nq, nk = queries.shape[-2], keys.shape[-2]
    b = len(lead)
    perm = tuple(range(b)) + (b + 1, b, b + 2)

    def split(t, n):
        return ad.transpose(ad.reshape(t, lead + (n, heads, dh)), perm)  # (..., heads, n, dh)

    q = split(linear(queries, params[prefix + "Wq"], params[prefix + "bq"]), nq)
    k = split(linear(keys, params[prefix + "Wk"], params[prefix + "bk"]), nk)
    v = split(linear(keys, params[prefix + "Wv"], params[prefix + "bv"]), nk)
    logits = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, None, :]
    attn = ad.masked_softmax(logits, mask)
    ctx = ad.matmul(attn, v)  # (..., heads, nq, dh)
    ctx = ad.reshape(ad.transpose(ctx, perm), lead + (nq, H))
    return linear(ctx, params[prefix + "Wo"], params[prefix + "bo"])


def attention_weights(queries: np.ndarray, keys: np.ndarray, params: Mapping[str, np.ndarray],
                      prefix: str, heads: int, key_mask=None) -> np.ndarray:
    """Attention probabilities ``(heads, Q, M)``; used for inspection and tests."""
    p = {k: Tensor(v) for k, v in params.items()}
    H = queries.shape[-1]
    dh = H // heads
    with ad.no_grad():
        q = linear(Tensor(queries), p[prefix + "Wq"], p[prefix + "bq"]).data
        k = linear(Tensor(keys), p[prefix + "Wk"], p[prefix + "bk"]).data
    q = q.reshape(len(q), heads, dh).transpose(1, 0, 2)
    k = k.reshape(len(k), heads, dh).transpose(1, 0, 2)
    mask = None if key_mask is None else np.asarray(key_mask, bool)[None, None, :]
    return ad.masked_softmax(Tensor(q @ k.transpose(0, 2, 1) / math.sqrt(dh)), mask).data


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {where}")


def encode_graph(x, mask: np.ndarray, params: Mapping[str, Tensor], config: EncoderConfig,
                 prefix: str = "") -> Tensor:
    """Encoder forward pass on the tape; ``x`` is ``(M, input_width)`` or ``(B, M, input_width)``."""
    x = ad.as_tensor(x)
    if x.data.ndim not in (2, 3) or x.shape[-1] != config.input_width:
        raise ValueError(f"encoder input must be (M, {config.input_width}), got {x.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(x.shape[:-1]):
        raise ValueError(f"mask shape {mask.shape} does not match input rows {tuple(x.shape[:-1])}")
    h = linear(x, params[prefix + "input.W"], params[prefix + "input.b"])
    _check_finite(h, "encoder input projection")
    for layer in range(config.L):
        p = f"{prefix}layers.{layer}."
        a = multi_head_attention(h, h, params, p + "attn.", config.heads, mask)
        h = ad.layer_norm(h + a, params[p + "ln1.gamma"], params[p + "ln1.beta"])
        f = linear(ad.gelu(linear(h, params[p + "ffn.W1"], params[p + "ffn.b1"])),
                   params[p + "ffn.W2"], params[p + "ffn.b2"])
        h = ad.layer_norm(h + f, params[p + "ln2.gamma"], params[p + "ln2.beta"])
        _check_finite(h, f"encoder layer {layer}")
    return h


def cross_attention_graph(bev, map_features, map_mask, params: Mapping[str, Tensor], heads: int,
                          prefix: str = "") -> Tensor:
    """Residual map cross-attention on the tape. No valid map row -> ``bev`` itself.

    Batched inputs (``bev`` of shape ``(B, Q, H)``) gate the update per item, so
    an item without valid rows gets ``bev + 0`` (bitwise ``bev``).
    """
    bev = ad.as_tensor(bev)
    map_features = ad.as_tensor(map_features)
    if map_features.shape[-1] != bev.shape[-1]:
        raise ValueError(
            f"map feature width {map_features.shape[-1]} != BEV query width {bev.shape[-1]}")
    mask = (np.ones(map_features.shape[:-1], dtype=bool) if map_mask is None
            else np.asarray(map_mask, dtype=bool))
    if map_features.shape[-2] == 0 or not mask.any():
        return bev
    update = multi_head_attention(bev, map_features, params, prefix, heads, mask)
    if mask.ndim > 1 and not mask.any(axis=-1).all():
        update = update * mask.any(axis=-1).astype(bev.dtype)[..., None, None]
    return bev + update


# ---------------------------------------------------------------------------
# Inference entry points
# ---------------------------------------------------------------------------

def encode(tensor, mask, weights: Mapping[str, np.ndarray], config: EncoderConfig) -> MapFeatures:
    """Map features ``(M, H)`` for a polyline-sequence tensor (array or object with ``.data``)."""
    data = np.asarray(getattr(tensor, "data", tensor))
    dtype = next(iter(weights.values())).dtype
    M = data.shape[0] if data.ndim else 0
    mask = np.ones(M, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if data.ndim != 2 or data.shape[1] != config.input_width:
        raise ValueError(f"encoder input must be (M, {config.input_width}), got {data.shape}")
    if M == 0:
        return MapFeatures(np.zeros((0, config.H), dtype=dtype), mask)
    params = {k: Tensor(v) for k, v in weights.items()}
    with ad.no_grad():
        out = encode_graph(Tensor(data.astype(dtype, copy=False)), mask, params, config)
    return MapFeatures(out.data, mask)


def map_cross_attention(bev_queries, map_features: MapFeatures, fusion_weights: Mapping[str, np.ndarray],
                        heads: int = 4, prefix: str = "") -> np.ndarray:
    """Fuse map features into BEV queries; returns the updated ``(Q, H)`` array."""
    bev = np.asarray(bev_queries)
    params = {k: Tensor(v) for k, v in fusion_weights.items()}
    with ad.no_grad():
        out = cross_attention_graph(Tensor(bev), map_features.data, map_features.mask, params, heads, prefix)
    return out.data


def parameter_count(weights: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in weights.values()))
