import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smerf.sdmap import BevRange, LocalPolyline, LocalSDMap, road_type_from_names
from smerf.synth import (
    Scene, SceneConfig, SplitError, degrade_map, generate_dataset, generate_scene, grid_cell_centers,
    ll_affinity_from_geometry, point_cells, split_geodisjoint, tile_key,
)
from smerf.encoding import resample_polyline


def road_polylines(scene):
    return [pl for pl in scene.sd_map.polylines if pl.road_type[0] == 0]


def point_to_chain(p, pts):
    best = math.inf
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        t = 0.0 if not ab.any() else float(np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0, 1))
        best = min(best, float(np.linalg.norm(a + t * ab - p)))
    return best


def line_distance(p, a, b):
    u = (b - a) / np.linalg.norm(b - a)
    d = p - a
    return abs(d[0] * u[1] - d[1] * u[0])


def on_boundary(p, br=BevRange()):
    return (abs(abs(p[0]) - br.forward) < 1e-9) or (abs(abs(p[1]) - br.left) < 1e-9)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_straight_noise_free_sd_matches_lane(seed):
    scene = generate_scene(SceneConfig(seed=seed, road_layout="straight", lanes_per_road=1))
    lanes = [ln.points[:, :2] for ln in scene.gt.lanes]
    sd = road_polylines(scene)
    assert lanes and sd
    a, b = lanes[0][0], lanes[0][-1]
    # SD geometry lies on the lane's line, and every lane point is covered by SD geometry
    for pl in sd:
        for p in pl.points:
            assert line_distance(p, a, b) < 1e-9
    for ln in lanes:
        for p in ln:
            assert min(point_to_chain(p, pl.points) for pl in sd) < 1e-9


def test_noise_mean_deviation_half_normal():
    sigma = 0.5
    devs = []
    for s in range(1000):
        scene = generate_scene(SceneConfig(seed=s, road_layout="straight", lanes_per_road=1,
                                           sd_noise_sigma=sigma))
        a, b = scene.gt.lanes[0].points[0, :2], scene.gt.lanes[0].points[-1, :2]
        for pl in road_polylines(scene):
            devs += [line_distance(p, a, b) for p in pl.points if not on_boundary(p)]
    mean = float(np.mean(devs))
    assert 0.3 <= mean <= 0.5
    # half-normal expectation sigma * sqrt(2/pi) = 0.399
    assert abs(mean - sigma * math.sqrt(2 / math.pi)) < 0.02


@pytest.mark.parametrize("seed", range(10))
def test_four_way_connectors_flagged(seed):
    scene = generate_scene(SceneConfig(seed=seed, road_layout="4way", lanes_per_road=1))
    lanes = scene.gt.lanes
    ll = scene.gt.ll_affinity
    inter = [ln.is_intersection for ln in lanes]
    assert any(inter) and not all(inter)
    for i, j in zip(*np.nonzero(ll)):
        # connectors only chain onto arm lanes, never onto other connectors
        assert not (inter[i] and inter[j])
        if not inter[i] and not inter[j]:
            # arm-to-arm links continue straight along one road
            di = lanes[i].points[-1, :2] - lanes[i].points[-2, :2]
            dj = lanes[j].points[1, :2] - lanes[j].points[0, :2]
            cos = di @ dj / np.linalg.norm(di) / np.linalg.norm(dj)
            assert cos > 1 - 1e-6
    # at least one connector turns (left/right movements exist at a 4-way junction)
    turning = []
    for ln, flag in zip(lanes, inter):
        if flag:
            d0 = ln.points[1, :2] - ln.points[0, :2]
            d1 = ln.points[-1, :2] - ln.points[-2, :2]
            turning.append(d0 @ d1 / np.linalg.norm(d0) / np.linalg.norm(d1) < 0.9)
    assert any(turning)


@pytest.mark.parametrize("layout", ["straight", "curve", "t_intersection", "4way"])
def test_affinity_matches_endpoint_geometry(layout):
    for s in range(10):
        scene = generate_scene(SceneConfig(seed=s, road_layout=layout, lanes_per_road=2))
        lanes = scene.gt.lanes
        for i in range(len(lanes)):
            for j in range(len(lanes)):
                gap = np.linalg.norm(lanes[i].points[-1, :2] - lanes[j].points[0, :2])
                assert bool(scene.gt.ll_affinity[i, j]) == (i != j and gap <= 0.1)
        assert np.array_equal(ll_affinity_from_geometry(lanes), scene.gt.ll_affinity)


def test_lane_shape_and_range():
    for scene in generate_dataset(SceneConfig(), 40, seed=3, layouts=("straight", "curve", "4way"),
                                  lanes_per_road=(1, 2, 3)):
        for ln in scene.gt.lanes:
            assert ln.points.shape == (11, 3)
            assert np.all(np.abs(ln.points[:, 0]) <= 50 + 1e-9) and np.all(np.abs(ln.points[:, 1]) <= 25 + 1e-9)
        for pl in scene.sd_map.polylines:
            assert np.all(np.abs(pl.points[:, 0]) <= 50 + 1e-9) and np.all(np.abs(pl.points[:, 1]) <= 25 + 1e-9)
        assert scene.gt.lt_affinity.shape == (len(scene.gt.lanes), len(scene.gt.elements))


# ---------------------------------------------------------------------------
# Occlusion and evidence
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("occlusion", ["none", "building_box", "range_limit"])
def test_occluded_cells_carry_no_evidence(occlusion):
    for s in range(15):
        cfg = SceneConfig(seed=s, road_layout="curve", lanes_per_road=2, occlusion=occlusion)
        scene = generate_scene(cfg)
        ev, occ = scene.visible_evidence.astype(bool), scene.occluded
        assert not np.any(ev & occ)
        # evidence only where a lane runs; cells holding at least 0.25 m of lane always count
        hits = np.zeros(ev.shape, int)
        for ln in scene.gt.lanes:
            pts = ln.points[:, :2]
            length = np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1))
            n = int(length / 0.01) + 1
            r, c = point_cells(resample_polyline(pts, n), cfg)
            np.add.at(hits, (r, c), 1)
        assert not np.any(ev & (hits == 0))
        assert not np.any(~ev & ~occ & (hits >= 26))
        if occlusion == "none":
            assert not occ.any()


def test_range_limit_geometry():
    cfg = SceneConfig(occlusion="range_limit", occlusion_range=25.0)
    scene = generate_scene(cfg)
    xs, ys = grid_cell_centers(cfg)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    assert np.array_equal(scene.occluded, np.hypot(X, Y) > 25.0)
    assert scene.occluded.shape == (50, 25)


# ---------------------------------------------------------------------------
# Determinism and serialization
# ---------------------------------------------------------------------------

def test_same_seed_same_bytes():
    cfg = SceneConfig(seed=11, road_layout="mixed", lanes_per_road=2, sd_noise_sigma=0.4, occlusion="building_box")
    assert generate_scene(cfg).dumps() == generate_scene(cfg).dumps()
    assert generate_scene(cfg).dumps() != generate_scene(replace(cfg, seed=12)).dumps()


def test_dataset_deterministic():
    a = generate_dataset(SceneConfig(sd_noise_sigma=0.3), 8, seed=5, layouts=("straight", "4way"))
    b = generate_dataset(SceneConfig(sd_noise_sigma=0.3), 8, seed=5, layouts=("straight", "4way"))
    assert [s.dumps() for s in a] == [s.dumps() for s in b]
    assert [s.layout for s in a] == ["straight", "4way"] * 4


def test_json_round_trip():
    scene = generate_scene(SceneConfig(seed=2, road_layout="t_intersection", lanes_per_road=2,
                                       sd_noise_sigma=0.2, occlusion="range_limit"))
    back = Scene.from_json(scene.to_json())
    assert back.dumps() == scene.dumps()
    assert back.config == scene.config


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(road_layout="roundabout")
    with pytest.raises(ValueError):
        SceneConfig(occlusion="fog")
    assert SceneConfig(road_layout="T-intersection").road_layout == "t_intersection"


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

def fake_scenes(anchors):
    return [SimpleNamespace(global_anchor=a, scene_id=i) for i, a in enumerate(anchors)]


def test_split_ten_tiles():
    anchors = [(100.0 * t + 5 + k, 50.0) for t in range(10) for k in range(3)]
    train, val = split_geodisjoint(fake_scenes(anchors), 100.0, 0.3, seed=0)
    val_tiles = {tile_key(s.global_anchor, 100.0) for s in val}
    train_tiles = {tile_key(s.global_anchor, 100.0) for s in train}
    assert len(val_tiles) == 3 and len(train_tiles) == 7
    assert not val_tiles & train_tiles
    assert len(train) + len(val) == 30


def test_split_single_tile_raises():
    with pytest.raises(SplitError):
        split_geodisjoint(fake_scenes([(10.0, 10.0), (20.0, 30.0)]), 100.0, 0.3, seed=0)


def test_split_deterministic():
    scenes = generate_dataset(SceneConfig(), 30, seed=1)
    a = split_geodisjoint(scenes, 100.0, 0.3, 4)
    b = split_geodisjoint(scenes, 100.0, 0.3, 4)
    assert [s.scene_id for s in a[1]] == [s.scene_id for s in b[1]]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(10.0, 500.0), st.floats(0.05, 0.95))
def test_split_never_shares_tiles(seed, tile, frac):
    rng = np.random.default_rng(seed)
    anchors = [tuple(a) for a in rng.uniform(0, 2000, size=(int(rng.integers(2, 60)), 2))]
    scenes = fake_scenes(anchors)
    if len({tile_key(a, tile) for a in anchors}) < 2:
        with pytest.raises(SplitError):
            split_geodisjoint(scenes, tile, frac, seed)
        return
    train, val = split_geodisjoint(scenes, tile, frac, seed)
    assert train and val
    assert not {tile_key(s.global_anchor, tile) for s in train} & {tile_key(s.global_anchor, tile) for s in val}
    assert sorted(s.scene_id for s in train + val) == list(range(len(scenes)))


# ---------------------------------------------------------------------------
# Map degradation
# ---------------------------------------------------------------------------

def ten_polyline_scene():
    scene = generate_scene(SceneConfig(seed=0))
    pls = tuple(LocalPolyline([[i, 0.0], [i, 5.0]], road_type_from_names("residential")) for i in range(10))
    return replace(scene, sd_map=LocalSDMap(pls))


def test_degrade_zero_is_identity():
    scene = ten_polyline_scene()
    assert degrade_map(scene, 0.0, 0).dumps() == scene.dumps()


def test_degrade_all():
    out = degrade_map(ten_polyline_scene(), 1.0, 0)
    assert out.sd_map.M == 0


def test_degrade_half_keeps_gt():
    scene = ten_polyline_scene()
    out = degrade_map(scene, 0.5, 7)
    assert out.sd_map.M == 5
    kept = {float(pl.points[0, 0]) for pl in out.sd_map.polylines}
    assert kept <= set(range(10))
    assert out.gt is scene.gt
    assert [float(pl.points[0, 0]) for pl in out.sd_map.polylines] == sorted(kept)


def test_degrade_validates_fraction():
    with pytest.raises(ValueError):
        degrade_map(ten_polyline_scene(), 1.5, 0)
