"""Polyline-sequence representation of a local SD map.

Each polyline becomes one row of width ``N*d + K``: ``N`` evenly spaced
points, each encoded as ``[E(x) | E(y)]`` with ``d/2`` sinusoidal features
per coordinate, followed by the ``K`` road-type flags.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .sdmap import NUM_ROAD_TYPES, BevRange, LocalSDMap

TWO_PI = 2.0 * math.pi


class DomainError(ValueError):
    """A coordinate lies outside the BEV range it is normalized against."""


@dataclass(frozen=True)
class EncodingConfig:
    N: int = 11
    d: int = 32
    T: float = 1000.0
    K: int = NUM_ROAD_TYPES
    bev_range: BevRange = field(default_factory=BevRange)

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.d <= 0 or self.d % 4:
            # d/2 per coordinate, itself split into sin/cos pairs
            raise ValueError("d must be a positive multiple of 4")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    @property
    def width(self) -> int:
        return self.N * self.d + self.K

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bev_range"] = asdict(self.bev_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingConfig":
        d = dict(d)
        if isinstance(d.get("bev_range"), dict):
            d["bev_range"] = BevRange(**d["bev_range"])
        return cls(**d)


@dataclass(frozen=True)
class PolylineSequenceTensor:
    data: np.ndarray  # (M, N*d + K) float32
    row_polyline_ids: np.ndarray  # (M,) int

    @property
    def M(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def resample_polyline(points, N: int) -> np.ndarray:
    """Resample a chain to ``N`` points evenly spaced in arc length.

    Endpoints are kept. Works for any point dimension. A single point, or a
    chain of zero length, comes back as its first point repeated ``N`` times.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if len(pts) == 0:
        raise ValueError("cannot resample an empty polyline")
    if N < 1:
        raise ValueError("N must be >= 1")
    seg = np.sqrt(np.sum(np.diff(pts, axis=0) ** 2, axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if len(pts) == 1 or total == 0.0:
        return np.repeat(pts[:1], N, axis=0)
    if N == 1:
        return pts[:1].copy()

    targets = total * np.arange(N) / (N - 1)
    # segment index whose [cum[k], cum[k+1]] contains each target, skipping zero-length segments
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(pts) - 2)
    out = np.empty((N, pts.shape[1]))
    for i, (t, k) in enumerate(zip(targets, idx)):
        while seg[k] == 0.0 and k > 0:
            k -= 1
        alpha = 0.0 if seg[k] == 0.0 else (t - cum[k]) / seg[k]
        out[i] = pts[k] + min(max(alpha, 0.0), 1.0) * (pts[k + 1] - pts[k])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def normalize_to_bev(point, bev_range: BevRange) -> np.ndarray:
    """Affinely map ego-frame ``(x, y)`` onto ``[0, 2*pi]`` per axis.

    ``x = -backward`` maps to 0 and ``x = forward`` to ``2*pi``; ``y`` runs
    from ``-right`` to ``left``.
    """
    pts = np.asarray(point, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    if (np.any(x < -bev_range.backward) or np.any(x > bev_range.forward)
            or np.any(y < -bev_range.right) or np.any(y > bev_range.left)):
        raise DomainError("point outside the BEV range; clip the map first")
    nx = TWO_PI * (x + bev_range.backward) / (bev_range.backward + bev_range.forward)
    ny = TWO_PI * (y + bev_range.right) / (bev_range.right + bev_range.left)
    return np.stack([nx, ny], axis=-1)


def embedding_frequencies(d: int, T: float) -> np.ndarray:
    """Divisors ``T**(2j/d)`` for ``j = 0 .. d/2 - 1``."""
    if d % 2:
        raise ValueError("embedding dimension must be even")
    j = np.arange(d // 2, dtype=np.float64)
    return np.power(float(T), 2.0 * j / d)


def sinusoidal_embed(p, d: int, T: float = 1000.0) -> np.ndarray:
    """Interleaved sin/cos embedding; entry ``2j`` is ``sin(p / T**(2j/d))``.

    ``p`` may be a scalar or an array; the embedding axis is appended last.
    """
    p = np.asarray(p, dtype=np.float64)
    arg = p[..., None] / embedding_frequencies(d, T)
    out = np.empty(p.shape + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def encode_points(points_normalized: np.ndarray, config: EncodingConfig) -> np.ndarray:
    """``(..., N, 2)`` normalized points -> ``(..., N*d)`` embedding."""
    half = config.d // 2
    ex = sinusoidal_embed(points_normalized[..., 0], half, config.T)
    ey = sinusoidal_embed(points_normalized[..., 1], half, config.T)
    per_point = np.concatenate([ex, ey], axis=-1)
    return per_point.reshape(per_point.shape[:-2] + (config.N * config.d,))


def build_sequence_tensor(local_map: LocalSDMap, config: EncodingConfig | None = None) -> PolylineSequenceTensor:
    """Encode every polyline of ``local_map`` as one tensor row, in input order."""
    config = config or EncodingConfig()
    rows = np.zeros((local_map.M, config.width), dtype=np.float32)
    for i, pl in enumerate(local_map.polylines):
        if len(pl.road_type) != config.K:
            raise ValueError(f"polyline {i} has {len(pl.road_type)} road-type flags, expected {config.K}")
        pts = resample_polyline(pl.points, config.N)
        emb = encode_points(normalize_to_bev(pts, config.bev_range), config)
        rows[i, : config.N * config.d] = emb
        rows[i, config.N * config.d:] = pl.road_type
    return PolylineSequenceTensor(rows, np.arange(local_map.M))
