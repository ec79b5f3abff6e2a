"""Lane-topology evaluation: DET_l, DET_t, TOP_ll, TOP_lt and OLS.

Detection AP uses greedy confidence-ordered one-to-one matching and
all-point interpolated precision. Lanes match on directed discrete Fréchet
distance (thresholds 1, 2, 3 m); traffic elements match per category at
IoU >= 0.75. Topology scores project predicted affinities onto ground-truth
vertex pairs through the detection matching (lanes at 2 m) and average a
per-vertex ranked-retrieval AP.

All public scores are on the 0-100 scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LANE_THRESHOLDS = (1.0, 2.0, 3.0)
TOPOLOGY_LANE_THRESHOLD = 2.0
IOU_THRESHOLD = 0.75
CLOSE_FAR_SPLIT = 25.0
LANE_POINTS = 11

TRAFFIC_CATEGORIES = (
    "traffic_light_red",
    "traffic_light_green",
    "traffic_light_yellow",
    "stop_sign",
    "yield_sign",
    "turn_left",
    "turn_right",
    "go_straight",
)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class LaneCenterline:
    points: np.ndarray  # (11, 3) ego-frame meters, ordered along travel direction
    confidence: float = 1.0
    id: int = 0
    is_intersection: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] not in (2, 3):
            raise ValueError(f"lane {self.id}: points must be (n, 3), got {self.points.shape}")
        if self.points.shape[1] == 2:
            self.points = np.concatenate([self.points, np.zeros((len(self.points), 1))], axis=1)
        if len(self.points) != LANE_POINTS:
            raise ValueError(f"lane {self.id}: expected {LANE_POINTS} points, got {len(self.points)}")


@dataclass
class TrafficElement:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels
    category: str
    confidence: float = 1.0
    id: int = 0

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"traffic element {self.id}: box {self.box} has no area")


@dataclass
class TopologyFrame:
    """Lanes, traffic elements and both affinity matrices for one frame."""

    lanes: list[LaneCenterline] = field(default_factory=list)
    elements: list[TrafficElement] = field(default_factory=list)
    ll_affinity: np.ndarray | None = None
    lt_affinity: np.ndarray | None = None

    def __post_init__(self):
        n, k = len(self.lanes), len(self.elements)
        self.ll_affinity = (np.zeros((n, n)) if self.ll_affinity is None
                            else np.asarray(self.ll_affinity, dtype=np.float64).reshape(n, n))
        self.lt_affinity = (np.zeros((n, k)) if self.lt_affinity is None
                            else np.asarray(self.lt_affinity, dtype=np.float64).reshape(n, k))


@dataclass
class EvalReport:
    DET_l: float
    TOP_ll: float
    DET_t: float
    TOP_lt: float
    OLS: float
    breakdowns: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("DET_l", "TOP_ll", "DET_t", "TOP_lt", "OLS")}
        if self.breakdowns:
            out["breakdowns"] = {k: v.to_dict() for k, v in self.breakdowns.items()}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        missing = [k for k in ("DET_l", "TOP_ll", "DET_t", "TOP_lt", "OLS") if k not in data]
        if missing:
            raise KeyError(f"report is missing field(s): {', '.join(missing)}")
        return cls(
            *(float(data[k]) for k in ("DET_l", "TOP_ll", "DET_t", "TOP_lt", "OLS")),
            breakdowns={k: cls.from_dict(v) for k, v in data.get("breakdowns", {}).items()},
        )


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def discrete_frechet(poly_a, poly_b) -> float:
    """Directed discrete Fréchet distance between two point sequences."""
    a = np.asarray(poly_a, dtype=np.float64)
    b = np.asarray(poly_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[None]
    if b.ndim == 1:
        b = b[None]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("discrete_frechet needs non-empty polylines")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    p, q = d.shape
    ca = np.empty((p, q))
    ca[0, 0] = d[0, 0]
    for i in range(1, p):
        ca[i, 0] = max(ca[i - 1, 0], d[i, 0])
    for j in range(1, q):
        ca[0, j] = max(ca[0, j - 1], d[0, j])
    for i in range(1, p):
        for j in range(1, q):
            ca[i, j] = max(min(ca[i - 1, j], ca[i - 1, j - 1], ca[i, j - 1]), d[i, j])
    return float(ca[-1, -1])


def frechet_matrix(lanes_a: np.ndarray, lanes_b: np.ndarray) -> np.ndarray:
    """Pairwise discrete Fréchet distances, ``(n, k, D)`` x ``(m, k2, D)`` -> ``(n, m)``.

    Same recurrence as :func:`discrete_frechet`, vectorized over all pairs.
    """
    A = np.asarray(lanes_a, dtype=np.float64)
    B = np.asarray(lanes_b, dtype=np.float64)
    n, m = len(A), len(B)
    if n == 0 or m == 0:
        return np.zeros((n, m))
    d = np.sqrt(((A[:, None, :, None, :] - B[None, :, None, :, :]) ** 2).sum(-1))  # (n, m, p, q)
    p, q = d.shape[2:]
    ca = np.empty_like(d)
    ca[:, :, 0, 0] = d[:, :, 0, 0]
    for i in range(1, p):
        ca[:, :, i, 0] = np.maximum(ca[:, :, i - 1, 0], d[:, :, i, 0])
    for j in range(1, q):
        ca[:, :, 0, j] = np.maximum(ca[:, :, 0, j - 1], d[:, :, 0, j])
    for i in range(1, p):
        for j in range(1, q):
            best = np.minimum(np.minimum(ca[:, :, i - 1, j], ca[:, :, i - 1, j - 1]), ca[:, :, i, j - 1])
            ca[:, :, i, j] = np.maximum(best, d[:, :, i, j])
    return ca[:, :, -1, -1]


def box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# Matching and AP
# ---------------------------------------------------------------------------

@dataclass
class Matching:
    """Greedy one-to-one assignment.

    ``order`` lists prediction indices in processing (descending confidence)
    order; ``pred_to_gt[i]`` is the matched ground-truth index or ``None``.
    """

    order: list[int]
    pred_to_gt: list[int | None]
    confidences: list[float]

    @property
    def results(self) -> list[tuple[float, bool]]:
        return [(self.confidences[i], self.pred_to_gt[i] is not None) for i in self.order]

    @property
    def gt_to_pred(self) -> dict[int, int]:
        return {g: p for p, g in enumerate(self.pred_to_gt) if g is not None}


def match_from_distances(dist: np.ndarray, confidences: Sequence[float], threshold: float,
                         pred_ids: Sequence | None = None, gt_ids: Sequence | None = None) -> Matching:
    """Greedy matching on a precomputed ``(n_pred, n_gt)`` distance matrix."""
    n_pred = len(confidences)
    dist = np.asarray(dist, dtype=np.float64)
    if n_pred == 0 or dist.size == 0:
        n_gt = len(gt_ids) if gt_ids is not None else (dist.shape[1] if dist.ndim == 2 else 0)
        dist = np.zeros((n_pred, n_gt)) + np.inf
    n_gt = dist.shape[1]
    pred_ids = list(range(n_pred)) if pred_ids is None else list(pred_ids)
    gt_ids = list(range(n_gt)) if gt_ids is None else list(gt_ids)
    order = sorted(range(n_pred), key=lambda i: (-float(confidences[i]), pred_ids[i]))
    taken = [False] * n_gt
    pred_to_gt: list[int | None] = [None] * n_pred
    for i in order:
        best = None
        for g in range(n_gt):
            if taken[g] or not dist[i, g] <= threshold:
                continue
            if best is None or (dist[i, g], gt_ids[g]) < (dist[i, best], gt_ids[best]):
                best = g
        if best is not None:
            taken[best] = True
            pred_to_gt[i] = best
    return Matching(order, pred_to_gt, [float(c) for c in confidences])


def match_detections(predictions: Sequence, ground_truths: Sequence,
                     distance_fn: Callable, threshold: float) -> Matching:
    """Match predictions (with ``.confidence`` and ``.id``) to ground truths.

    A pair is admissible when ``distance_fn(pred, gt) <= threshold``; for
    similarity scores pass a negated score and negated threshold.
    """
    dist = np.array([[distance_fn(p, g) for g in ground_truths] for p in predictions],
                    dtype=np.float64).reshape(len(predictions), len(ground_truths))
    return match_from_distances(dist, [p.confidence for p in predictions], threshold,
                                [getattr(p, "id", i) for i, p in enumerate(predictions)],
                                [getattr(g, "id", i) for i, g in enumerate(ground_truths)])


def average_precision(match_results: Sequence[tuple[float, bool]], num_gt: int) -> float:
    """All-point interpolated AP from ``(confidence, is_true_positive)`` pairs.

    Results must already be in descending-confidence order. With no ground
    truth, AP is 1.0 if there are no predictions and 0.0 otherwise.
    """
    if num_gt == 0:
        return 1.0 if len(match_results) == 0 else 0.0
    if len(match_results) == 0:
        return 0.0
    tp_flags = np.array([bool(t) for _, t in match_results], dtype=np.float64)
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1.0 - tp_flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def _pooled_ap(matchings: Sequence[Matching], num_gt: int) -> float:
    """AP over several frames' matchings ranked together (ties keep frame order)."""
    results = []
    for frame_idx, m in enumerate(matchings):
        for rank, (conf, tp) in enumerate(m.results):
            results.append((-conf, frame_idx, rank, tp))
    results.sort(key=lambda r: r[:3])
    return average_precision([(-r[0], r[3]) for r in results], num_gt)


def _lane_array(lanes: Sequence[LaneCenterline]) -> np.ndarray:
    if not lanes:
        return np.zeros((0, LANE_POINTS, 3))
    return np.stack([ln.points for ln in lanes])


def lane_distance_matrix(pred_lanes, gt_lanes) -> np.ndarray:
    return frechet_matrix(_lane_array(pred_lanes), _lane_array(gt_lanes))


def match_lanes(pred_lanes, gt_lanes, threshold: float, dist: np.ndarray | None = None) -> Matching:
    if dist is None:
        dist = lane_distance_matrix(pred_lanes, gt_lanes)
    return match_from_distances(dist, [ln.confidence for ln in pred_lanes], threshold,
                                [ln.id for ln in pred_lanes], [ln.id for ln in gt_lanes])


def match_elements(pred_elements, gt_elements, threshold: float = IOU_THRESHOLD) -> Matching:
    """Category-aware element matching at IoU >= threshold (global indices)."""
    n_pred, n_gt = len(pred_elements), len(gt_elements)
    neg_iou = np.full((n_pred, n_gt), np.inf)
    for i, p in enumerate(pred_elements):
        for j, g in enumerate(gt_elements):
            if p.category == g.category:
                neg_iou[i, j] = -box_iou(p.box, g.box)
    return match_from_distances(neg_iou, [e.confidence for e in pred_elements], -threshold,
                                [e.id for e in pred_elements], [e.id for e in gt_elements])


# ---------------------------------------------------------------------------
# Detection scores (pooled over frames)
# ---------------------------------------------------------------------------

def _as_pairs(pred, gt):
    """Accept a single frame's lists or sequences of per-frame lists."""
    if pred and isinstance(pred[0], (list, tuple)) or gt and isinstance(gt[0], (list, tuple)):
        return list(zip(pred, gt))
    return [(pred, gt)]


def det_l_frames(pairs: Sequence[tuple[Sequence[LaneCenterline], Sequence[LaneCenterline]]],
                 dists: Sequence[np.ndarray] | None = None) -> float:
    if dists is None:
        dists = [lane_distance_matrix(p, g) for p, g in pairs]
    num_gt = sum(len(g) for _, g in pairs)
    aps = []
    for thr in LANE_THRESHOLDS:
        matchings = [match_lanes(p, g, thr, d) for (p, g), d in zip(pairs, dists)]
        aps.append(_pooled_ap(matchings, num_gt))
    return 100.0 * float(np.mean(aps))


def det_l(pred_lanes, gt_lanes) -> float:
    """Lane detection mAP over Fréchet thresholds {1, 2, 3} m, 0-100.

    Takes one frame's lane lists, or parallel lists of per-frame lane lists.
    """
    return det_l_frames(_as_pairs(pred_lanes, gt_lanes))


def det_t_frames(pairs: Sequence[tuple[Sequence[TrafficElement], Sequence[TrafficElement]]]) -> float:
    categories = sorted({g.category for _, gts in pairs for g in gts})
    if not categories:
        any_pred = any(len(p) for p, _ in pairs)
        return 0.0 if any_pred else 100.0
    aps = []
    for cat in categories:
        matchings, num_gt = [], 0
        for preds, gts in pairs:
            p_cat = [e for e in preds if e.category == cat]
            g_cat = [e for e in gts if e.category == cat]
            num_gt += len(g_cat)
            matchings.append(match_elements(p_cat, g_cat))
        aps.append(_pooled_ap(matchings, num_gt))
    return 100.0 * float(np.mean(aps))


def det_t(pred_elements, gt_elements) -> float:
    """Traffic-element mAP at IoU 0.75, averaged over ground-truth categories, 0-100."""
    return det_t_frames(_as_pairs(pred_elements, gt_elements))


# ---------------------------------------------------------------------------
# Topology scores
# ---------------------------------------------------------------------------

def _vertex_aps(scores: np.ndarray, gt_adj: np.ndarray, exclude_self: bool) -> list[float]:
    """Per-vertex AP of predicted scores against binary GT rows with >= 1 edge."""
    aps = []
    n_rows, n_cols = gt_adj.shape
    for i in range(n_rows):
        cols = [j for j in range(n_cols) if not (exclude_self and j == i)]
        positives = sum(1 for j in cols if gt_adj[i, j] > 0.5)
        if positives == 0:
            continue
        retrieved = sorted((j for j in cols if scores[i, j] > 0), key=lambda j: (-scores[i, j], j))
        aps.append(average_precision([(scores[i, j], gt_adj[i, j] > 0.5) for j in retrieved], positives))
    return aps


def _project(pred_aff: np.ndarray, row_map: dict[int, int], col_map: dict[int, int],
             n_rows: int, n_cols: int) -> np.ndarray:
    """Predicted affinities re-indexed onto GT vertices; unmatched vertices score 0."""
    out = np.zeros((n_rows, n_cols))
    for gi, pi in row_map.items():
        for gj, pj in col_map.items():
            out[gi, gj] = pred_aff[pi, pj]
    return out


def _topology_score(all_aps: list[float], unexpected_positive: bool) -> float:
    if not all_aps:
        return 0.0 if unexpected_positive else 100.0
    return 100.0 * float(np.mean(all_aps))


def _check_shape(mat: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.size == 0 and 0 in shape:
        return mat.reshape(shape)
    if mat.shape != shape:
        raise ValueError(f"{what} has shape {mat.shape}, expected {shape}")
    return mat


def top_ll_frames(frames: Sequence[tuple[TopologyFrame, TopologyFrame]],
                  lane_matchings: Sequence[Matching] | None = None) -> float:
    all_aps, stray = [], False
    for idx, (pred, gt) in enumerate(frames):
        n_p, n_g = len(pred.lanes), len(gt.lanes)
        pred_aff = _check_shape(pred.ll_affinity, (n_p, n_p), "predicted lane-lane affinity")
        gt_aff = _check_shape(gt.ll_affinity, (n_g, n_g), "ground-truth lane-lane affinity")
        m = (lane_matchings[idx] if lane_matchings is not None
             else match_lanes(pred.lanes, gt.lanes, TOPOLOGY_LANE_THRESHOLD))
        g2p = m.gt_to_pred
        scores = _project(pred_aff, g2p, g2p, n_g, n_g)
        np.fill_diagonal(scores, 0.0)
        aps = _vertex_aps(scores, gt_aff, exclude_self=True)
        all_aps += aps
        if not aps and np.any(scores > 0):
            stray = True
    return _topology_score(all_aps, stray)


def top_ll(pred_lanes, pred_ll_affinity, gt_lanes, gt_ll_affinity) -> float:
    """Lane-lane topology mAP, 0-100."""
    return top_ll_frames([(TopologyFrame(list(pred_lanes), [], pred_ll_affinity),
                           TopologyFrame(list(gt_lanes), [], gt_ll_affinity))])


def top_lt_frames(frames: Sequence[tuple[TopologyFrame, TopologyFrame]],
                  lane_matchings: Sequence[Matching] | None = None) -> float:
    all_aps, stray = [], False
    for idx, (pred, gt) in enumerate(frames):
        n_p, n_g = len(pred.lanes), len(gt.lanes)
        k_p, k_g = len(pred.elements), len(gt.elements)
        pred_aff = _check_shape(pred.lt_affinity, (n_p, k_p), "predicted lane-element affinity")
        gt_aff = _check_shape(gt.lt_affinity, (n_g, k_g), "ground-truth lane-element affinity")
        lm = (lane_matchings[idx] if lane_matchings is not None
              else match_lanes(pred.lanes, gt.lanes, TOPOLOGY_LANE_THRESHOLD))
        em = match_elements(pred.elements, gt.elements)
        scores = _project(pred_aff, lm.gt_to_pred, em.gt_to_pred, n_g, k_g)
        aps = _vertex_aps(scores, gt_aff, exclude_self=False)
        all_aps += aps
        if not aps and np.any(scores > 0):
            stray = True
    return _topology_score(all_aps, stray)


def top_lt(pred_lanes, pred_elements, pred_lt_affinity, gt_lanes, gt_elements, gt_lt_affinity) -> float:
    """Lane-traffic-element topology mAP, 0-100."""
    n_p, n_g = len(pred_lanes), len(gt_lanes)
    return top_lt_frames([
        (TopologyFrame(list(pred_lanes), list(pred_elements), np.zeros((n_p, n_p)), pred_lt_affinity),
         TopologyFrame(list(gt_lanes), list(gt_elements), np.zeros((n_g, n_g)), gt_lt_affinity)),
    ])


def ols(det_l: float, det_t: float, top_ll: float, top_lt: float) -> float:
    """OpenLane-V2 score: mean of DET_l, DET_t and the square-root-scaled TOP terms."""
    for name, v in (("DET_l", det_l), ("DET_t", det_t), ("TOP_ll", top_ll), ("TOP_lt", top_lt)):
        if not 0.0 <= v <= 100.0 or math.isnan(v):
            raise ValueError(f"{name}={v} outside [0, 100]")
    return 0.25 * (det_l + det_t + 100.0 * math.sqrt(top_ll / 100.0) + 100.0 * math.sqrt(top_lt / 100.0))


# ---------------------------------------------------------------------------
# Whole-dataset evaluation and breakdowns
# ---------------------------------------------------------------------------

def evaluate(gt_frames: Sequence[TopologyFrame], pred_frames: Sequence[TopologyFrame],
             det_t_override: float | None = None) -> EvalReport:
    """All five scores pooled over frames (``gt_frames[i]`` pairs with ``pred_frames[i]``)."""
    if len(gt_frames) != len(pred_frames):
        raise ValueError("gt and prediction frame counts differ")
    pairs = list(zip(pred_frames, gt_frames))
    dists = [lane_distance_matrix(p.lanes, g.lanes) for p, g in pairs]
    d_l = det_l_frames([(p.lanes, g.lanes) for p, g in pairs], dists)
    topo_matchings = [match_lanes(p.lanes, g.lanes, TOPOLOGY_LANE_THRESHOLD, d)
                      for (p, g), d in zip(pairs, dists)]
    t_ll = top_ll_frames(pairs, topo_matchings)
    t_lt = top_lt_frames(pairs, topo_matchings)
    d_t = det_t_override if det_t_override is not None else det_t_frames(
        [(p.elements, g.elements) for p, g in pairs])
    return EvalReport(d_l, t_ll, d_t, t_lt, ols(d_l, d_t, t_ll, t_lt))


def nearest_point_distance(lane: LaneCenterline) -> float:
    return float(np.min(np.hypot(lane.points[:, 0], lane.points[:, 1])))


def distance_band(lane: LaneCenterline) -> str:
    return "close" if nearest_point_distance(lane) < CLOSE_FAR_SPLIT else "far"


def _membership(lane: LaneCenterline, by: str) -> str:
    if by == "distance":
        return distance_band(lane)
    if by == "intersection":
        return "intersection" if lane.is_intersection else "non_intersection"
    raise ValueError(f"unknown breakdown {by!r}; use 'distance' or 'intersection'")


BREAKDOWN_SUBSETS = {"distance": ("close", "far"), "intersection": ("non_intersection", "intersection")}


def restrict_frame(pred: TopologyFrame, gt: TopologyFrame, by: str, subset: str,
                   dist: np.ndarray | None = None) -> tuple[TopologyFrame, TopologyFrame]:
    """Keep GT lanes in ``subset`` and predictions whose nearest GT lane is in it.

    Without any GT lane, a prediction is assigned by its own geometry for the
    distance breakdown and counted as non-intersection otherwise.
    """
    keep_g = [i for i, ln in enumerate(gt.lanes) if _membership(ln, by) == subset]
    if dist is None:
        dist = lane_distance_matrix(pred.lanes, gt.lanes)
    keep_p = []
    for i, ln in enumerate(pred.lanes):
        if gt.lanes:
            nearest = min(range(len(gt.lanes)), key=lambda j: (dist[i, j], gt.lanes[j].id))
            owner = _membership(gt.lanes[nearest], by)
        else:
            owner = distance_band(ln) if by == "distance" else "non_intersection"
        if owner == subset:
            keep_p.append(i)

    def sub(frame: TopologyFrame, keep: list[int]) -> TopologyFrame:
        idx = np.array(keep, dtype=int)
        return TopologyFrame([frame.lanes[i] for i in keep], list(frame.elements),
                             frame.ll_affinity[np.ix_(idx, idx)], frame.lt_affinity[idx, :])

    return sub(pred, keep_p), sub(gt, keep_g)


def evaluate_breakdown(gt_frames: Sequence[TopologyFrame], pred_frames: Sequence[TopologyFrame],
                       by: str = "distance") -> dict[str, EvalReport]:
    """Per-subset reports (``close``/``far`` or ``non_intersection``/``intersection``).

    DET_t is not restricted (traffic elements carry no lane band); the full
    DET_t enters each subset's OLS.
    """
    if by not in BREAKDOWN_SUBSETS:
        raise ValueError(f"unknown breakdown {by!r}; use 'distance' or 'intersection'")
    full_det_t = det_t_frames([(p.elements, g.elements) for p, g in zip(pred_frames, gt_frames)])
    dists = [lane_distance_matrix(p.lanes, g.lanes) for p, g in zip(pred_frames, gt_frames)]
    out = {}
    for subset in BREAKDOWN_SUBSETS[by]:
        restricted = [restrict_frame(p, g, by, subset, d) for p, g, d in zip(pred_frames, gt_frames, dists)]
        out[subset] = evaluate([g for _, g in restricted], [p for p, _ in restricted], det_t_override=full_det_t)
    return out


# ---------------------------------------------------------------------------
# JSON (scene / prediction files)
# ---------------------------------------------------------------------------

def lanes_from_json(items, with_confidence: bool) -> list[LaneCenterline]:
    lanes = []
    for i, d in enumerate(items):
        lanes.append(LaneCenterline(
            d["points"],
            float(d.get("confidence", 1.0)) if with_confidence else 1.0,
            d.get("id", i),
            bool(d.get("is_intersection", False)),
        ))
    return lanes


def elements_from_json(items, with_confidence: bool) -> list[TrafficElement]:
    return [TrafficElement(d["box"], d["category"],
                           float(d.get("confidence", 1.0)) if with_confidence else 1.0, d.get("id", i))
            for i, d in enumerate(items)]


def _matrix(data, n: int, k: int) -> np.ndarray:
    if data is None or (len(data) == 0 and n * k == 0):
        return np.zeros((n, k))
    return np.asarray(data, dtype=np.float64).reshape(n, k)


def gt_frame_from_json(data: dict) -> TopologyFrame:
    lanes = lanes_from_json(data.get("gt_lanes", []), with_confidence=False)
    elements = elements_from_json(data.get("gt_traffic_elements", []), with_confidence=False)
    n, k = len(lanes), len(elements)
    return TopologyFrame(lanes, elements, _matrix(data.get("gt_ll_affinity"), n, n),
                         _matrix(data.get("gt_lt_affinity"), n, k))


def pred_frame_from_json(data: dict) -> TopologyFrame:
    lanes = lanes_from_json(data.get("pred_lanes", []), with_confidence=True)
    elements = elements_from_json(data.get("pred_elements", []), with_confidence=True)
    n, k = len(lanes), len(elements)
    return TopologyFrame(lanes, elements, _matrix(data.get("pred_ll_affinity"), n, n),
                         _matrix(data.get("pred_lt_affinity"), n, k))


def pred_frame_to_json(frame: TopologyFrame, scene_id: str | None = None) -> dict:
    out = {
        "pred_lanes": [{"id": ln.id, "points": ln.points.tolist(), "confidence": ln.confidence}
                       for ln in frame.lanes],
        "pred_elements": [{"id": e.id, "box": list(e.box), "category": e.category, "confidence": e.confidence}
                          for e in frame.elements],
        "pred_ll_affinity": frame.ll_affinity.tolist(),
        "pred_lt_affinity": frame.lt_affinity.tolist(),
    }
    if scene_id is not None:
        out["scene_id"] = scene_id
    return out
