"""Standard-definition map ingestion and local map queries.

Tiles hold road polylines in a local metric frame together with their raw
OSM tags. A :class:`LocalSDMap` is the same data cut to the BEV rectangle
around the ego vehicle and expressed in the ego frame (+x forward, +y left).
"""

from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0

ROAD_TYPES = (
    "pedestrian",
    "highway",
    "residential",
    "service",
    "bus_way",
    "truck_road",
    "other",
)
NUM_ROAD_TYPES = len(ROAD_TYPES)

# highway=<value> -> category. "_link" suffixes are folded onto their base value.
HIGHWAY_VALUE_TO_TYPE = {
    "footway": "pedestrian",
    "path": "pedestrian",
    "crossing": "pedestrian",
    "pedestrian": "pedestrian",
    "steps": "pedestrian",
    "motorway": "highway",
    "trunk": "highway",
    "primary": "highway",
    "secondary": "highway",
    "tertiary": "highway",
    "residential": "residential",
    "living_street": "residential",
    "service": "service",
    "busway": "bus_way",
    "bus_guideway": "bus_way",
}
# Non-highway keys that designate a category on top of the highway value.
EXTRA_TAG_TO_TYPE = {
    ("hgv", "designated"): "truck_road",
    ("truck", "designated"): "truck_road",
    ("busway", "lane"): "bus_way",
    ("bus", "designated"): "bus_way",
    ("footway", "crossing"): "pedestrian",
}


class MapError(Exception):
    """Base class for map ingestion and query failures."""


class MapParseError(MapError):
    """Input is not well-formed XML/JSON."""


class MapStructureError(MapError):
    """Input is well-formed but references data that does not exist."""


class OutOfCoverageError(MapError):
    """Ego position lies outside the tile."""


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class EgoPose:
    """Global 3-DoF pose: position in meters, heading in radians (CCW from +x)."""

    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))

    @classmethod
    def parse(cls, text: str) -> "EgoPose":
        """Parse ``"x,y,heading"``."""
        parts = [float(v) for v in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"pose must be 'x,y,heading', got {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class BevRange:
    forward: float = 50.0
    backward: float = 50.0
    left: float = 25.0
    right: float = 25.0

    def __post_init__(self):
        for name in ("forward", "backward", "left", "right"):
            if not getattr(self, name) > 0:
                raise ValueError(f"BevRange.{name} must be strictly positive")

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return (
            (pts[:, 0] >= -self.backward)
            & (pts[:, 0] <= self.forward)
            & (pts[:, 1] >= -self.right)
            & (pts[:, 1] <= self.left)
        )


def _frozen_points(points) -> np.ndarray:
    arr = np.array(points, dtype=np.float64).reshape(-1, 2)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SDPolyline:
    points: np.ndarray
    tags: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_points(self.points))
        object.__setattr__(self, "tags", dict(self.tags))


@dataclass(frozen=True)
class SDMapTile:
    """Road polylines in a local metric frame with an axis-aligned bounds box."""

    polylines: tuple[SDPolyline, ...]
    bounds: tuple[float, float, float, float]
    origin: tuple[float, float] | None = None  # (lat0, lon0) of the projection anchor

    def __post_init__(self):
        object.__setattr__(self, "polylines", tuple(self.polylines))
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        minx, miny, maxx, maxy = self.bounds
        if minx > maxx or miny > maxy:
            raise MapStructureError(f"invalid bounds {self.bounds}")
        for i, pl in enumerate(self.polylines):
            if len(pl.points) < 2:
                raise MapStructureError(f"polyline {i} has fewer than 2 points")
            p = pl.points
            if (p[:, 0].min() < minx or p[:, 0].max() > maxx
                    or p[:, 1].min() < miny or p[:, 1].max() > maxy):
                raise MapStructureError(f"polyline {i} leaves the tile bounds")

    def contains(self, x: float, y: float) -> bool:
        minx, miny, maxx, maxy = self.bounds
        return minx <= x <= maxx and miny <= y <= maxy


@dataclass(frozen=True)
class LocalPolyline:
    points: np.ndarray
    road_type: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_points(self.points))
        object.__setattr__(self, "road_type", tuple(int(v) for v in self.road_type))


@dataclass(frozen=True)
class LocalSDMap:
    """SD map around the ego vehicle, points in ego-frame meters."""

    polylines: tuple[LocalPolyline, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "polylines", tuple(self.polylines))

    @property
    def M(self) -> int:
        return len(self.polylines)

    def to_json(self) -> list[dict]:
        return [
            {"points": pl.points.tolist(), "road_type": list(pl.road_type)}
            for pl in self.polylines
        ]

    @classmethod
    def from_json(cls, data: Sequence[Mapping]) -> "LocalSDMap":
        return cls(tuple(LocalPolyline(d["points"], d["road_type"]) for d in data))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def is_road_way(tags: Mapping[str, str]) -> bool:
    return any(k == "highway" or k.startswith("highway:") for k in tags)


def project_equirectangular(lat, lon, lat0: float, lon0: float):
    """Local tangent-plane projection (meters) anchored at ``(lat0, lon0)``."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    x = EARTH_RADIUS_M * np.radians(lon - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * np.radians(lat - lat0)
    return x, y


def _bbox(polylines: Sequence[SDPolyline]) -> tuple[float, float, float, float]:
    if not polylines:
        return (0.0, 0.0, 0.0, 0.0)
    pts = np.concatenate([pl.points for pl in polylines])
    return (float(pts[:, 0].min()), float(pts[:, 1].min()),
            float(pts[:, 0].max()), float(pts[:, 1].max()))


def _parse_osm_xml(raw: bytes) -> SDMapTile:
    try:
        root = ET.fromstring(raw)
    except ET.ParseError as exc:
        line, col = exc.position
        raise MapParseError(f"malformed OSM XML at line {line}, column {col}: {exc}") from exc

    nodes: dict[str, tuple[float, float]] = {}
    for node in root.iter("node"):
        try:
            nodes[node.attrib["id"]] = (float(node.attrib["lat"]), float(node.attrib["lon"]))
        except (KeyError, ValueError) as exc:
            raise MapStructureError(f"node {node.attrib.get('id', '?')} lacks a valid id/lat/lon") from exc

    ways = []
    for way in root.iter("way"):
        way_id = way.attrib.get("id", "?")
        refs = [nd.attrib.get("ref") for nd in way.iter("nd")]
        tags = {t.attrib["k"]: t.attrib.get("v", "") for t in way.iter("tag") if "k" in t.attrib}
        missing = [r for r in refs if r not in nodes]
        if missing:
            raise MapStructureError(f"way {way_id} references missing node(s) {', '.join(map(str, missing))}")
        if is_road_way(tags) and len(refs) >= 2:
            ways.append((refs, tags))

    if not nodes:
        return SDMapTile((), (0.0, 0.0, 0.0, 0.0))
    lats = np.array([v[0] for v in nodes.values()])
    lons = np.array([v[1] for v in nodes.values()])
    lat0 = float(lats.min() + lats.max()) / 2.0
    lon0 = float(lons.min() + lons.max()) / 2.0

    polylines = []
    for refs, tags in ways:
        lat = [nodes[r][0] for r in refs]
        lon = [nodes[r][1] for r in refs]
        x, y = project_equirectangular(lat, lon, lat0, lon0)
        polylines.append(SDPolyline(np.stack([x, y], axis=1), tags))
    return SDMapTile(tuple(polylines), _bbox(polylines), origin=(lat0, lon0))


def tile_from_dict(data: Mapping) -> SDMapTile:
    try:
        polylines = tuple(
            SDPolyline(p["points"], {str(k): str(v) for k, v in p.get("tags", {}).items()})
            for p in data["polylines"]
        )
        bounds = tuple(data["bounds"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MapStructureError(f"invalid tile JSON: {exc}") from exc
    if len(bounds) != 4:
        raise MapStructureError("tile 'bounds' must be [minx, miny, maxx, maxy]")
    origin = data.get("origin")
    return SDMapTile(polylines, bounds, tuple(origin) if origin is not None else None)


def tile_to_dict(tile: SDMapTile) -> dict:
    out = {
        "bounds": list(tile.bounds),
        "polylines": [{"points": pl.points.tolist(), "tags": dict(pl.tags)} for pl in tile.polylines],
    }
    if tile.origin is not None:
        out["origin"] = list(tile.origin)
    return out


def serialize_tile(tile: SDMapTile) -> str:
    return json.dumps(tile_to_dict(tile), indent=1, sort_keys=True)


def parse_osm_extract(raw_bytes: bytes | str, fmt: str | None = None) -> SDMapTile:
    """Parse an OSM XML subset or a JSON tile into an :class:`SDMapTile`.

    ``fmt`` is ``"osm"``, ``"json"`` or ``None`` (sniffed from the first
    non-blank character).
    """
    if isinstance(raw_bytes, str):
        raw_bytes = raw_bytes.encode("utf-8")
    if fmt is None:
        head = raw_bytes.lstrip()[:1]
        fmt = "json" if head in (b"{", b"[") else "osm"
    if fmt == "osm":
        return _parse_osm_xml(raw_bytes)
    if fmt != "json":
        raise ValueError(f"unknown map format {fmt!r}")
    try:
        data = json.loads(raw_bytes.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise MapParseError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    except UnicodeDecodeError as exc:
        raise MapParseError(f"tile is not UTF-8 at byte {exc.start}") from exc
    return tile_from_dict(data)


# ---------------------------------------------------------------------------
# Road types
# ---------------------------------------------------------------------------

def classify_road_type(tags: Mapping[str, str] | None) -> tuple[int, ...]:
    """Multi-hot road-type vector in :data:`ROAD_TYPES` order.

    >>> classify_road_type({"highway": "residential"})
    (0, 0, 1, 0, 0, 0, 0)
    """
    flags = [0] * NUM_ROAD_TYPES
    tags = tags or {}
    value = tags.get("highway", "")
    if value.endswith("_link"):
        value = value[: -len("_link")]
    category = HIGHWAY_VALUE_TO_TYPE.get(value)
    if category is not None:
        flags[ROAD_TYPES.index(category)] = 1
    for (key, val), category in EXTRA_TAG_TO_TYPE.items():
        if tags.get(key) == val:
            flags[ROAD_TYPES.index(category)] = 1
    if not any(flags):
        flags[ROAD_TYPES.index("other")] = 1
    return tuple(flags)


def road_type_from_names(*names: str) -> tuple[int, ...]:
    flags = [0] * NUM_ROAD_TYPES
    for name in names:
        flags[ROAD_TYPES.index(name)] = 1
    return tuple(flags)


def road_type_stats(maps: Iterable, regions: Sequence[str] | None = None):
    """Count polylines per road-type category.

    ``maps`` may hold :class:`SDMapTile`, :class:`LocalSDMap` or anything with
    an ``sd_map`` attribute (scenes). Multi-type polylines count once per set
    flag. With ``regions`` (one label per map) the result is keyed by region.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("road_type_stats needs at least one map")
    if regions is not None and len(regions) != len(maps):
        raise ValueError("regions must align with maps")

    grouped: dict[str, Counter] = {}
    for i, item in enumerate(maps):
        label = regions[i] if regions is not None else None
        counts = grouped.setdefault(label, Counter({name: 0 for name in ROAD_TYPES}))
        for vec in _road_type_vectors(item):
            for name, flag in zip(ROAD_TYPES, vec):
                counts[name] += flag
    result = {label: {name: c[name] for name in ROAD_TYPES} for label, c in grouped.items()}
    return result[None] if regions is None else result


def _road_type_vectors(item):
    if hasattr(item, "sd_map"):
        item = item.sd_map
    if isinstance(item, SDMapTile):
        return [classify_road_type(pl.tags) for pl in item.polylines]
    if isinstance(item, LocalSDMap):
        return [pl.road_type for pl in item.polylines]
    raise TypeError(f"cannot count road types of {type(item).__name__}")


# ---------------------------------------------------------------------------
# Ego frame and clipping
# ---------------------------------------------------------------------------

def to_ego_frame(point_global, ego_pose: EgoPose) -> np.ndarray:
    """Rigidly transform global point(s) into the ego frame.

    Accepts a single ``(x, y)`` or an ``(n, 2)`` array.
    """
    pts = np.asarray(point_global, dtype=np.float64)
    c, s = math.cos(ego_pose.heading), math.sin(ego_pose.heading)
    dx = pts[..., 0] - ego_pose.x
    dy = pts[..., 1] - ego_pose.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def from_ego_frame(point_ego, ego_pose: EgoPose) -> np.ndarray:
    pts = np.asarray(point_ego, dtype=np.float64)
    c, s = math.cos(ego_pose.heading), math.sin(ego_pose.heading)
    x, y = pts[..., 0], pts[..., 1]
    return np.stack([c * x - s * y + ego_pose.x, s * x + c * y + ego_pose.y], axis=-1)


def _clip_segment(p0, p1, xmin, xmax, ymin, ymax):
    """Liang-Barsky. Returns (t0, t1) of the visible part or None."""
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, p0[0] - xmin), (dx, xmax - p0[0]),
                 (-dy, p0[1] - ymin), (dy, ymax - p0[1])):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    return t0, t1


def clip_polyline(points: np.ndarray, bev_range: BevRange) -> list[np.ndarray]:
    """Cut a polyline to the BEV rectangle, splitting it where it leaves and re-enters."""
    xmin, xmax = -bev_range.backward, bev_range.forward
    ymin, ymax = -bev_range.right, bev_range.left
    pts = np.asarray(points, dtype=np.float64)
    runs: list[list] = []
    current: list = []

    def flush():
        nonlocal current
        if len(current) >= 2:
            runs.append(current)
        current = []

    if len(pts) == 1:
        return [pts.copy()] if bev_range.contains(pts)[0] else []
    for a, b in zip(pts[:-1], pts[1:]):
        span = _clip_segment(a, b, xmin, xmax, ymin, ymax)
        if span is None:
            flush()
            continue
        t0, t1 = span
        if t0 > 0.0 or not current:
            flush()
            current.append(a + t0 * (b - a) if t0 > 0.0 else a.copy())
        current.append(b.copy() if t1 >= 1.0 else a + t1 * (b - a))
        if t1 < 1.0:
            flush()
    flush()

    out = []
    for run in runs:
        arr = np.array(run)
        # clamp rounding spill from the intersection arithmetic
        arr[:, 0] = np.clip(arr[:, 0], xmin, xmax)
        arr[:, 1] = np.clip(arr[:, 1], ymin, ymax)
        if np.any(arr != arr[0]):
            out.append(arr)
    return out


def query_local_map(tile: SDMapTile, ego_pose: EgoPose, bev_range: BevRange | None = None) -> LocalSDMap:
    """Cut the tile to the BEV rectangle around ``ego_pose`` in the ego frame."""
    bev_range = bev_range or BevRange()
    if not tile.contains(ego_pose.x, ego_pose.y):
        raise OutOfCoverageError(
            f"ego position ({ego_pose.x:.2f}, {ego_pose.y:.2f}) outside tile bounds {tile.bounds}")
    polylines = []
    for pl in tile.polylines:
        road_type = classify_road_type(pl.tags)
        for piece in clip_polyline(to_ego_frame(pl.points, ego_pose), bev_range):
            polylines.append(LocalPolyline(piece, road_type))
    return LocalSDMap(tuple(polylines))


def clip_local_map(local_map: LocalSDMap, bev_range: BevRange) -> LocalSDMap:
    polylines = []
    for pl in local_map.polylines:
        for piece in clip_polyline(pl.points, bev_range):
            polylines.append(LocalPolyline(piece, pl.road_type))
    return LocalSDMap(tuple(polylines))
