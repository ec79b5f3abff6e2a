"""Synthetic lane-topology scenes.

A scene is built in the ego frame: roads are dense centerlines, lanes are
offset copies cut into pieces of ``segment_length`` meters, and junction
layouts add Bezier connector lanes between inbound and outbound lanes. The
SD map is the per-road skeleton, perturbed laterally by Gaussian noise,
placed in a global tile at the ego pose and queried back through
:func:`smerf.sdmap.query_local_map`. ``visible_evidence`` rasterizes the
lanes on the BEV grid with occluded cells zeroed.

Lane-lane affinity is derived from geometry: ``i -> j`` iff the last point of
lane ``i`` is within 0.1 m of the first point of lane ``j``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .encoding import resample_polyline
from .metrics import TRAFFIC_CATEGORIES, LaneCenterline, TopologyFrame, TrafficElement, gt_frame_from_json
from .sdmap import (BevRange, EgoPose, LocalSDMap, SDMapTile, SDPolyline, clip_polyline, from_ego_frame,
                    query_local_map)

LAYOUTS = ("straight", "curve", "t_intersection", "4way")
_LAYOUT_ALIASES = {"T-intersection": "t_intersection", "t": "t_intersection", "tee": "t_intersection",
                   "4-way": "4way", "four_way": "4way", "cross": "4way"}
OCCLUSIONS = ("none", "building_box", "range_limit")
CONNECT_TOL = 0.1
LANE_WIDTH = 3.5
DENSE_STEP = 0.5
MIN_PIECE_LENGTH = 1.0


class SplitError(ValueError):
    pass


def canonical_layout(name: str) -> str:
    name = _LAYOUT_ALIASES.get(name, name)
    if name not in LAYOUTS and name != "mixed":
        raise ValueError(f"unknown layout {name!r}; choose from {LAYOUTS + ('mixed',)}")
    return name


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    road_layout: str = "straight"
    lanes_per_road: int = 1
    sd_noise_sigma: float = 0.0
    sd_way_length: float = 25.0  # split SD ways into runs of about this length; 0 keeps whole roads
    occlusion: str = "none"
    occlusion_range: float = 25.0  # meters, for occlusion == "range_limit"
    traffic_element_count: int = 2
    segment_length: float = 25.0
    world_size: float = 2000.0
    tile_size: float = 100.0
    grid_rows: int = 50
    grid_cols: int = 25
    bev_range: BevRange = field(default_factory=BevRange)

    def __post_init__(self):
        object.__setattr__(self, "road_layout", canonical_layout(self.road_layout))
        if not 1 <= self.lanes_per_road <= 4:
            raise ValueError("lanes_per_road must be in 1..4")
        if self.sd_noise_sigma < 0:
            raise ValueError("sd_noise_sigma must be >= 0")
        if self.occlusion not in OCCLUSIONS:
            raise ValueError(f"occlusion must be one of {OCCLUSIONS}")
        if self.traffic_element_count < 0:
            raise ValueError("traffic_element_count must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bev_range"] = asdict(self.bev_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "bev_range" in d:
            d["bev_range"] = BevRange(**d["bev_range"])
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    layout: str
    ego_pose: EgoPose
    gt: TopologyFrame
    sd_map: LocalSDMap
    visible_evidence: np.ndarray  # (rows, cols) uint8
    occluded: np.ndarray  # (rows, cols) bool
    region_tile: str
    global_anchor: tuple[float, float]
    config: SceneConfig

    @property
    def gt_lanes(self) -> list[LaneCenterline]:
        return self.gt.lanes

    def to_json(self) -> dict:
        gt = self.gt
        return {
            "scene_id": self.scene_id,
            "layout": self.layout,
            "ego_pose": [self.ego_pose.x, self.ego_pose.y, self.ego_pose.heading],
            "gt_lanes": [{"id": ln.id, "points": ln.points.tolist(), "is_intersection": ln.is_intersection}
                         for ln in gt.lanes],
            "gt_traffic_elements": [{"id": e.id, "box": list(e.box), "category": e.category}
                                    for e in gt.elements],
            "gt_ll_affinity": gt.ll_affinity.astype(int).tolist(),
            "gt_lt_affinity": gt.lt_affinity.astype(int).tolist(),
            "sd_map": self.sd_map.to_json(),
            "visible_evidence": self.visible_evidence.astype(int).tolist(),
            "occluded": self.occluded.astype(int).tolist(),
            "region_tile": self.region_tile,
            "global_anchor": list(self.global_anchor),
            "config": self.config.to_dict(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, data: dict) -> "Scene":
        config = SceneConfig.from_dict(data["config"]) if "config" in data else SceneConfig()
        evidence = np.asarray(data.get("visible_evidence", np.zeros((config.grid_rows, config.grid_cols))),
                              dtype=np.uint8)
        return cls(
            scene_id=str(data.get("scene_id", "")),
            layout=data.get("layout", config.road_layout),
            ego_pose=EgoPose(*data["ego_pose"]),
            gt=gt_frame_from_json(data),
            sd_map=LocalSDMap.from_json(data.get("sd_map", [])),
            visible_evidence=evidence,
            occluded=np.asarray(data.get("occluded", np.zeros_like(evidence)), dtype=bool),
            region_tile=str(data.get("region_tile", "")),
            global_anchor=tuple(data.get("global_anchor", data["ego_pose"][:2])),
            config=config,
        )


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def _dense_line(p0, direction, length: float, step: float = DENSE_STEP) -> np.ndarray:
    n = max(2, int(math.ceil(length / step)) + 1)
    s = np.linspace(0.0, length, n)
    return np.asarray(p0, float)[None] + s[:, None] * np.asarray(direction, float)[None]


def _arc_length(pts: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])


def _left_normals(pts: np.ndarray) -> np.ndarray:
    t = np.gradient(pts, axis=0)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    return np.stack([-t[:, 1], t[:, 0]], axis=1)


def _offset(pts: np.ndarray, offset: float) -> np.ndarray:
    if offset == 0.0:
        return pts.copy()
    return pts + offset * _left_normals(pts)


def _unit(angle: float) -> np.ndarray:
    return np.array([math.cos(angle), math.sin(angle)])


def _curve_centerline(start, heading: float, straight_len: float, radius: float, side: int,
                      tail_len: float) -> np.ndarray:
    """Straight run, then a quarter-turn arc of ``radius`` to the ``side`` (+1 left), then straight."""
    straight = _dense_line(start, _unit(heading), straight_len)
    p_c = straight[-1]
    center = p_c + side * radius * _unit(heading + math.pi / 2)
    n_arc = max(2, int(math.ceil(radius * math.pi / 2 / DENSE_STEP)) + 1)
    phi = np.linspace(0.0, math.pi / 2, n_arc)
    start_angle = heading - side * math.pi / 2
    arc = center[None] + radius * np.stack(
        [np.cos(start_angle + side * phi), np.sin(start_angle + side * phi)], axis=1)
    end_heading = heading + side * math.pi / 2
    tail = _dense_line(arc[-1], _unit(end_heading), tail_len)
    return np.concatenate([straight, arc[1:], tail[1:]])


def _bezier(p0, t0, p1, t1, n: int = 60) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    k = np.linalg.norm(p1 - p0) / 3.0
    c0, c1 = p0 + k * np.asarray(t0), p1 - k * np.asarray(t1)
    u = np.linspace(0.0, 1.0, n)[:, None]
    pts = ((1 - u) ** 3) * p0 + 3 * ((1 - u) ** 2) * u * c0 + 3 * (1 - u) * u * u * c1 + (u ** 3) * p1
    pts[0], pts[-1] = p0, p1
    return pts


def _cut(pts: np.ndarray, breaks: Sequence[float]) -> list[np.ndarray]:
    """Split a dense polyline at arc-length positions (exact interpolated cut points)."""
    s = _arc_length(pts)
    total = s[-1]
    cuts = [0.0] + [b for b in breaks if 0.0 < b < total] + [total]
    pieces = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        inner = (s > a) & (s < b)
        pa = np.array([np.interp(a, s, pts[:, 0]), np.interp(a, s, pts[:, 1])])
        pb = np.array([np.interp(b, s, pts[:, 0]), np.interp(b, s, pts[:, 1])])
        pieces.append(np.concatenate([pa[None], pts[inner], pb[None]]))
    return pieces


def _piece_breaks(total: float, segment_length: float, first: float = None) -> list[float]:
    first = segment_length if first is None else first
    breaks = list(np.arange(first, total, segment_length))
    # fold a short tail into the previous piece
    if breaks and total - breaks[-1] < 0.3 * segment_length:
        breaks.pop()
    return breaks


def _lane_offsets(n: int) -> list[float]:
    return [(k - (n - 1) / 2.0) * LANE_WIDTH for k in range(n)]


# ---------------------------------------------------------------------------
# Road model
# ---------------------------------------------------------------------------

@dataclass
class _Road:
    centerline: np.ndarray  # dense, along the road's reference direction
    tags: dict
    lane_dirs: list[int]  # per offset index: +1 along centerline, -1 against
    breaks: list[float]
    name: str = ""


@dataclass
class _LaneRec:
    points: np.ndarray  # dense, travel order
    is_intersection: bool = False
    road: str = ""


def _road_lanes(road: _Road, n: int) -> dict[int, list[_LaneRec]]:
    """Lane pieces per offset index, each list in travel order."""
    out = {}
    for k, off in enumerate(_lane_offsets(n)):
        dense = _offset(road.centerline, off)
        pieces = _cut(dense, road.breaks)
        if road.lane_dirs[k] < 0:
            pieces = [p[::-1].copy() for p in pieces[::-1]]
        out[k] = [_LaneRec(p, False, road.name) for p in pieces]
    return out


def _default_dirs(n: int) -> list[int]:
    if n == 1:
        return [1]
    return [1 if off <= 0 else -1 for off in _lane_offsets(n)]


def _through_road(rng, cfg: SceneConfig, curved: bool):
    n = cfg.lanes_per_road
    heading = rng.uniform(-0.08, 0.08)
    start_x = -cfg.bev_range.backward - 10.0
    # put the rightmost forward lane through the ego position
    y0 = -min(_lane_offsets(n)) + start_x * math.tan(heading) + rng.uniform(-0.5, 0.5)
    start = np.array([start_x, y0])
    total = cfg.bev_range.backward + cfg.bev_range.forward + 30.0
    if curved:
        straight_len = 10.0 + cfg.bev_range.backward + rng.uniform(5.0, 30.0)
        radius = rng.uniform(25.0, 70.0)
        side = 1 if rng.random() < 0.5 else -1
        center = _curve_centerline(start, heading, straight_len, radius, side, tail_len=60.0)
    else:
        center = _dense_line(start, _unit(heading), total)
    breaks = _piece_breaks(_arc_length(center)[-1], cfg.segment_length, first=10.0)
    tags = {"highway": str(rng.choice(["primary", "secondary", "residential", "trunk"]))}
    if rng.random() < 0.1:
        tags["hgv"] = "designated"
    return [_Road(center, tags, _default_dirs(n), breaks, "main")], []


def _junction_roads(rng, cfg: SceneConfig, arms: Sequence[str]):
    """Arms radiate from the junction center; returns roads, connectors, skeleton info."""
    n = cfg.lanes_per_road
    half = n * LANE_WIDTH / 2.0 + 3.0 if n > 1 else LANE_WIDTH + 2.0
    jx = rng.uniform(10.0, 35.0)
    offsets = _lane_offsets(n)
    jy = -min(offsets) + rng.uniform(-0.5, 0.5) if n > 1 else rng.uniform(-0.5, 0.5)
    main_heading = rng.uniform(-0.06, 0.06)
    center = np.array([jx, jy])
    arm_angle = {"back": main_heading + math.pi, "ahead": main_heading,
                 "left": main_heading + math.pi / 2, "right": main_heading - math.pi / 2}
    # one-lane arms are one-way: traffic enters from back/left, leaves ahead/right
    one_way = {"back": -1, "ahead": 1, "left": -1, "right": 1}
    main_tags = {"highway": str(rng.choice(["primary", "secondary", "tertiary"]))}
    side_tags = {"highway": str(rng.choice(["residential", "service", "tertiary"]))}

    roads, arm_lanes = [], {}
    for arm in arms:
        ang = arm_angle[arm]
        d = _unit(ang)
        length = 140.0
        cl = _dense_line(center + half * d, d, length)
        dirs = [one_way[arm]] if n == 1 else _default_dirs(n)
        road = _Road(cl, dict(main_tags if arm in ("back", "ahead") else side_tags), dirs,
                     _piece_breaks(length, cfg.segment_length), arm)
        roads.append(road)
        arm_lanes[arm] = (road, _road_lanes(road, n), ang)

    connectors = []
    order = ["back", "right", "ahead", "left"]  # counter-clockwise from the ego arm
    for a in arms:
        road_a, lanes_a, ang_a = arm_lanes[a]
        inbound = [k for k in range(n) if road_a.lane_dirs[k] < 0]
        for b in arms:
            if b == a:
                continue
            road_b, lanes_b, ang_b = arm_lanes[b]
            outbound = [k for k in range(n) if road_b.lane_dirs[k] > 0]
            if not inbound or not outbound:
                continue
            turn = (order.index(b) - order.index(a)) % 4  # 1 right, 2 straight, 3 left
            if turn == 2:
                pairs = list(zip(inbound, outbound[::-1] if len(outbound) == len(inbound) else outbound))
                pairs = pairs[: min(len(inbound), len(outbound))]
            elif turn == 1:
                pairs = [(inbound[0] if n > 1 else inbound[0], outbound[0])]
            else:
                pairs = [(inbound[-1], outbound[-1])]
            for ka, kb in pairs:
                p0 = lanes_a[ka][-1].points[-1]
                p1 = lanes_b[kb][0].points[0]
                t0, t1 = -_unit(ang_a), _unit(ang_b)
                connectors.append(_LaneRec(_bezier(p0, t0, p1, t1), True, f"{a}->{b}"))
    return roads, arm_lanes, connectors, center


def _split_way(pts: np.ndarray, tags: dict, way_length: float, step: float):
    """Chop a control-point polyline into consecutive ways sharing end nodes."""
    if way_length <= 0 or len(pts) < 3:
        return [(pts, tags)]
    per = max(1, int(round(way_length / step)))
    out = []
    for a in range(0, len(pts) - 1, per):
        out.append((pts[a:a + per + 1], dict(tags)))
    return out


def _sd_skeleton(rng, roads: Sequence[_Road], sigma: float, junction=None, step: float = 5.0,
                 way_length: float = 0.0):
    """Coarse control-point polylines with lateral Gaussian noise; junction node shared."""
    polylines = []
    j_noise = None
    if junction is not None:
        j_noise = junction + (rng.normal(0.0, sigma, 2) / math.sqrt(2.0) if sigma > 0 else 0.0)
    for road in roads:
        s = _arc_length(road.centerline)
        samples = np.arange(0.0, s[-1], step)
        samples = np.append(samples, s[-1]) if s[-1] - samples[-1] > 1e-9 else samples
        pts = np.stack([np.interp(samples, s, road.centerline[:, 0]),
                        np.interp(samples, s, road.centerline[:, 1])], axis=1)
        if sigma > 0:
            normals = _left_normals(pts)
            pts = pts + rng.normal(0.0, sigma, len(pts))[:, None] * normals
        if junction is not None:
            pts = np.concatenate([j_noise[None], pts])
        polylines += _split_way(pts, dict(road.tags), way_length, step)
    return polylines


def _footway(rng, road: _Road, n: int):
    side = 1 if rng.random() < 0.5 else -1
    off = side * (n * LANE_WIDTH / 2.0 + 2.5)
    pts = _offset(road.centerline, off)[::10]
    return pts, {"highway": "footway"}


# ---------------------------------------------------------------------------
# Rasters
# ---------------------------------------------------------------------------

def grid_cell_centers(cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    br = cfg.bev_range
    cx = (br.forward + br.backward) / cfg.grid_rows
    cy = (br.left + br.right) / cfg.grid_cols
    xs = -br.backward + cx * (np.arange(cfg.grid_rows) + 0.5)
    ys = -br.right + cy * (np.arange(cfg.grid_cols) + 0.5)
    return xs, ys


def point_cells(points: np.ndarray, cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row/col indices of ego-frame points (points on the far boundary go to the last cell)."""
    br = cfg.bev_range
    cx = (br.forward + br.backward) / cfg.grid_rows
    cy = (br.left + br.right) / cfg.grid_cols
    r = np.floor((points[:, 0] + br.backward) / cx).astype(int)
    c = np.floor((points[:, 1] + br.right) / cy).astype(int)
    return np.clip(r, 0, cfg.grid_rows - 1), np.clip(c, 0, cfg.grid_cols - 1)


def occlusion_mask(cfg: SceneConfig, box=None) -> np.ndarray:
    xs, ys = grid_cell_centers(cfg)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    if cfg.occlusion == "range_limit":
        return np.hypot(X, Y) > cfg.occlusion_range
    if cfg.occlusion == "building_box" and box is not None:
        x0, y0, x1, y1 = box
        return (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)
    return np.zeros_like(X, dtype=bool)


def rasterize_lanes(lanes: Sequence[LaneCenterline], cfg: SceneConfig, step: float = 0.25) -> np.ndarray:
    grid = np.zeros((cfg.grid_rows, cfg.grid_cols), dtype=bool)
    for ln in lanes:
        pts = ln.points[:, :2]
        s = _arc_length(pts)
        n = max(2, int(math.ceil(s[-1] / step)) + 1)
        dense = resample_polyline(pts, n)
        r, c = point_cells(dense, cfg)
        grid[r, c] = True
    return grid


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def ll_affinity_from_geometry(lanes: Sequence[LaneCenterline], tol: float = CONNECT_TOL) -> np.ndarray:
    n = len(lanes)
    aff = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j and np.linalg.norm(lanes[i].points[-1, :2] - lanes[j].points[0, :2]) <= tol:
                aff[i, j] = 1.0
    return aff


def _finish_lanes(recs: Sequence[_LaneRec], bev: BevRange) -> list[tuple[np.ndarray, bool, str]]:
    out = []
    for rec in recs:
        for part in clip_polyline(rec.points, bev):
            if _arc_length(part)[-1] >= MIN_PIECE_LENGTH:
                out.append((resample_polyline(part, 11), rec.is_intersection, rec.road))
    return out


def _traffic_elements(rng, lanes, roles, count: int):
    """Elements at lane ends entering a junction (or the ego road ahead)."""
    if count == 0 or not lanes:
        return [], np.zeros((len(lanes), 0))
    groups: dict[str, list[int]] = {}
    for i, role in enumerate(roles):
        if role is not None:
            groups.setdefault(role, []).append(i)
    keys = sorted(groups, key=lambda k: (k != "back", k))
    elements, assoc = [], []
    for e in range(count):
        if not keys:
            break
        key = keys[e % len(keys)]
        cat = str(rng.choice(TRAFFIC_CATEGORIES))
        w, h = (40.0, 90.0) if cat.startswith("traffic_light") else (60.0, 60.0)
        x1 = 200.0 + 180.0 * e + rng.uniform(-20, 20)
        y1 = 250.0 + rng.uniform(-40, 40)
        elements.append(TrafficElement((x1, y1, x1 + w, y1 + h), cat, 1.0, e))
        assoc.append(groups[key])
    lt = np.zeros((len(lanes), len(elements)))
    for e, lane_ids in enumerate(assoc):
        lt[lane_ids, e] = 1.0
    return elements, lt


def generate_scene(config: SceneConfig, scene_id: str | None = None) -> Scene:
    """Build one scene deterministically from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    layout = config.road_layout
    if layout == "mixed":
        layout = str(rng.choice(["straight", "curve", "t_intersection", "4way"]))
    bev = config.bev_range
    n = config.lanes_per_road

    junction = None
    if layout in ("straight", "curve"):
        roads, _ = _through_road(rng, config, curved=layout == "curve")
        lane_recs = []
        for k, pieces in _road_lanes(roads[0], n).items():
            lane_recs += pieces
        skeleton_roads = roads
    else:
        arms = ["back", "ahead", "left", "right"]
        if layout == "t_intersection":
            arms = ["back", "ahead", "left" if rng.random() < 0.5 else "right"]
        roads, arm_lanes, connectors, junction = _junction_roads(rng, config, arms)
        lane_recs = []
        for arm in arms:
            for pieces in arm_lanes[arm][1].values():
                lane_recs += pieces
        lane_recs += connectors
        skeleton_roads = roads

    finished = _finish_lanes(lane_recs, bev)
    lanes = [LaneCenterline(np.concatenate([pts, np.zeros((11, 1))], axis=1), 1.0, i, inter)
             for i, (pts, inter, _) in enumerate(finished)]
    ll = ll_affinity_from_geometry(lanes)

    # junction-entry roles: lanes whose end feeds a connector
    roles = []
    for i, (pts, inter, road) in enumerate(finished):
        feeds_connector = any(ll[i, j] and lanes[j].is_intersection for j in range(len(lanes)))
        if junction is not None:
            roles.append(road if (feeds_connector and not inter) else None)
        else:
            ahead = 0.0 < pts[-1, 0] <= bev.forward and pts[0, 0] < pts[-1, 0]
            roles.append("ahead" if ahead else None)
    elements, lt = _traffic_elements(rng, lanes, roles, config.traffic_element_count)

    # SD map: skeleton (+ noise), optional footway, lifted into a global tile
    skeleton = _sd_skeleton(rng, skeleton_roads, config.sd_noise_sigma, junction,
                              way_length=config.sd_way_length)
    if rng.random() < 0.4:
        skeleton.append(_footway(rng, skeleton_roads[0], n))
    ego = EgoPose(rng.uniform(0.0, config.world_size), rng.uniform(0.0, config.world_size),
                  rng.uniform(-math.pi, math.pi))
    tile_polys = [SDPolyline(from_ego_frame(pts, ego), tags) for pts, tags in skeleton]
    all_pts = np.concatenate([p.points for p in tile_polys] + [np.array([[ego.x, ego.y]])])
    lo, hi = all_pts.min(axis=0) - 1.0, all_pts.max(axis=0) + 1.0
    tile = SDMapTile(tuple(tile_polys), (lo[0], lo[1], hi[0], hi[1]))
    sd_map = query_local_map(tile, ego, bev)

    box = None
    if config.occlusion == "building_box":
        cx, cy = rng.uniform(12.0, 35.0), rng.uniform(-6.0, 6.0)
        hx, hy = rng.uniform(4.0, 8.0), rng.uniform(3.0, 7.0)
        box = (cx - hx, cy - hy, cx + hx, cy + hy)
    occluded = occlusion_mask(config, box)
    lane_cells = rasterize_lanes(lanes, config)
    evidence = (lane_cells & ~occluded).astype(np.uint8)

    tx, ty = math.floor(ego.x / config.tile_size), math.floor(ego.y / config.tile_size)
    return Scene(
        scene_id=scene_id if scene_id is not None else f"scene_{config.seed:08d}",
        layout=layout,
        ego_pose=ego,
        gt=TopologyFrame(lanes, elements, ll, lt),
        sd_map=sd_map,
        visible_evidence=evidence,
        occluded=occluded,
        region_tile=f"{tx}_{ty}",
        global_anchor=(ego.x, ego.y),
        config=config,
    )


def scene_seeds(seed: int, count: int) -> list[int]:
    """Per-scene seeds spawned from one top-level seed (numpy SeedSequence)."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def generate_dataset(base: SceneConfig, count: int, seed: int | None = None,
                     layouts: Sequence[str] | None = None,
                     lanes_per_road: Sequence[int] | None = None) -> list[Scene]:
    """``count`` scenes from per-scene seeds spawned off ``seed``.

    ``layouts`` cycles round-robin over scenes; ``lanes_per_road`` (if given)
    is sampled per scene from that scene's own seed.
    """
    seed = base.seed if seed is None else seed
    scenes = []
    for i, s in enumerate(scene_seeds(seed, count)):
        cfg = replace(base, seed=s)
        if layouts:
            cfg = replace(cfg, road_layout=layouts[i % len(layouts)])
        if lanes_per_road:
            pick = np.random.default_rng([s, 1]).integers(len(lanes_per_road))
            cfg = replace(cfg, lanes_per_road=int(lanes_per_road[pick]))
        scenes.append(generate_scene(cfg, scene_id=f"scene_{i:05d}"))
    return scenes


# ---------------------------------------------------------------------------
# Splits and degradation
# ---------------------------------------------------------------------------

def tile_key(anchor, tile_size: float) -> tuple[int, int]:
    return (math.floor(anchor[0] / tile_size), math.floor(anchor[1] / tile_size))


def split_geodisjoint(scenes: Sequence, tile_size_meters: float, val_fraction: float,
                      seed: int) -> tuple[list, list]:
    """Partition scenes by geographic tile so no tile lands in both sets.

    Scenes need a ``global_anchor`` (x, y) in meters. The number of
    validation tiles is ``round(val_fraction * n_tiles)`` clamped to
    ``[1, n_tiles - 1]``.
    """
    if tile_size_meters <= 0:
        raise ValueError("tile size must be positive")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    keys = [tile_key(s.global_anchor, tile_size_meters) for s in scenes]
    tiles = sorted(set(keys))
    if len(tiles) < 2:
        raise SplitError(f"need at least 2 tiles to split, found {len(tiles)}")
    n_val = min(max(int(math.floor(val_fraction * len(tiles) + 0.5)), 1), len(tiles) - 1)
    perm = np.random.default_rng(seed).permutation(len(tiles))
    val_tiles = {tiles[i] for i in perm[:n_val]}
    train = [s for s, k in zip(scenes, keys) if k not in val_tiles]
    val = [s for s, k in zip(scenes, keys) if k in val_tiles]
    return train, val


def degrade_map(scene: Scene, drop_fraction: float, seed: int) -> Scene:
    """Remove ``round(drop_fraction * M)`` SD polylines chosen at random; GT untouched."""
    if not 0.0 <= drop_fraction <= 1.0:
        raise ValueError("drop_fraction must be in [0, 1]")
    M = scene.sd_map.M
    n_drop = int(math.floor(drop_fraction * M + 0.5))
    drop = set(np.random.default_rng(seed).choice(M, size=n_drop, replace=False).tolist()) if n_drop else set()
    kept = tuple(pl for i, pl in enumerate(scene.sd_map.polylines) if i not in drop)
    return replace(scene, sd_map=LocalSDMap(kept))
