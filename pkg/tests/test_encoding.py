import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smerf.encoding import (
    DomainError, EncodingConfig, build_sequence_tensor, normalize_to_bev, resample_polyline, sinusoidal_embed,
)
from smerf.sdmap import BevRange, LocalPolyline, LocalSDMap, road_type_from_names


def arc_oracle(points, N):
    """Cumulative arc-length interpolation, one target at a time."""
    pts = [tuple(map(float, p)) for p in points]
    seg = [math.dist(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]
    total = sum(seg)
    out = []
    for k in range(N):
        t = total * k / (N - 1)
        acc = 0.0
        for i, s in enumerate(seg):
            if t <= acc + s or i == len(seg) - 1:
                a = 0.0 if s == 0 else (t - acc) / s
                out.append(tuple(pts[i][c] + a * (pts[i + 1][c] - pts[i][c]) for c in range(2)))
                break
            acc += s
    return np.array(out)


def test_resample_straight():
    out = resample_polyline([(0, 0), (10, 0)], 11)
    assert np.allclose(out, np.stack([np.arange(11), np.zeros(11)], 1), atol=1e-12)


def test_resample_l_chain():
    out = resample_polyline([(0, 0), (3, 0), (3, 3)], 7)
    want = [(0, 0), (1, 0), (2, 0), (3, 0), (3, 1), (3, 2), (3, 3)]
    assert np.allclose(out, want, atol=1e-12)
    assert np.allclose(out, arc_oracle([(0, 0), (3, 0), (3, 3)], 7), atol=1e-12)


def test_resample_single_point_and_zero_length():
    assert np.array_equal(resample_polyline([(4, 2)], 11), np.tile([4.0, 2.0], (11, 1)))
    assert np.array_equal(resample_polyline([(1, 1), (1, 1)], 5), np.tile([1.0, 1.0], (5, 1)))


def test_resample_empty_raises():
    with pytest.raises(ValueError):
        resample_polyline(np.zeros((0, 2)), 11)


def point_to_chain(p, pts):
    best = math.inf
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        t = 0.0 if not ab.any() else float(np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0, 1))
        best = min(best, float(np.linalg.norm(a + t * ab - p)))
    return best


@settings(max_examples=150, deadline=None)
@given(st.integers(2, 8), st.integers(2, 30), st.integers(0, 2 ** 31 - 1))
def test_resample_uniform_and_on_chain(n_in, N, seed):
    pts = np.random.default_rng(seed).uniform(-40, 40, size=(n_in, 2))
    out = resample_polyline(pts, N)
    assert np.array_equal(out[0], pts[0]) and np.array_equal(out[-1], pts[-1])
    assert np.allclose(out, arc_oracle(pts, N), atol=1e-9)
    for p in out:
        assert point_to_chain(p, pts) < 1e-9


def test_normalize_examples():
    br = BevRange()
    assert normalize_to_bev((-50.0, 0.0), br)[0] == 0.0
    assert abs(normalize_to_bev((0.0, 0.0), br)[0] - math.pi) < 1e-15
    assert abs(normalize_to_bev((12.5, 0.0), br)[0] - 3.92699) < 1e-5
    assert abs(normalize_to_bev((12.5, 0.0), br)[0] - 2 * math.pi * 0.625) < 1e-15
    assert normalize_to_bev((50.0, 25.0), br)[1] == 2 * math.pi


def test_normalize_domain_error():
    with pytest.raises(DomainError):
        normalize_to_bev((50.5, 0.0), BevRange())


def test_normalize_monotone():
    xs = np.linspace(-50, 50, 1001)
    nx = normalize_to_bev(np.stack([xs, np.zeros_like(xs)], 1), BevRange())[:, 0]
    assert np.all(np.diff(nx) > 0)
    ys = np.linspace(-25, 25, 1001)
    ny = normalize_to_bev(np.stack([np.zeros_like(ys), ys], 1), BevRange())[:, 1]
    assert np.all(np.diff(ny) > 0)


def test_embed_at_zero():
    e = sinusoidal_embed(0.0, 16)
    assert np.array_equal(e[0::2], np.zeros(8)) and np.array_equal(e[1::2], np.ones(8))


def test_embed_half_pi_first_pair():
    e = sinusoidal_embed(math.pi / 2, 32)
    assert abs(e[0] - 1.0) < 1e-15 and abs(e[1]) < 1e-15


def test_embed_high_precision_point():
    import mpmath as mp
    mp.mp.dps = 40
    e = sinusoidal_embed(1.0, 32, 1000.0)
    ref = mp.sin(1 / mp.power(1000, mp.mpf(16) / 32))
    assert abs(e[16] - float(ref)) < 1e-15
    # the argument is 1/sqrt(1000); its sine is 0.0316175 to 7 places
    assert abs(e[16] - math.sin(1 / math.sqrt(1000))) < 1e-15
    assert abs(e[16] - 0.0316175) < 1e-7


def test_embed_unit_circle():
    e = sinusoidal_embed(np.linspace(0, 2 * math.pi, 500), 32)
    assert np.allclose(e[:, 0::2] ** 2 + e[:, 1::2] ** 2, 1.0, atol=1e-6)


def test_width():
    assert EncodingConfig().width == 11 * 32 + 7 == 359


def test_d_must_split_evenly():
    with pytest.raises(ValueError):
        EncodingConfig(d=30)


def test_empty_map_tensor():
    t = build_sequence_tensor(LocalSDMap(()))
    assert t.data.shape == (0, 359)


def test_zero_coordinate_row_pattern():
    # the corner (-50, -25) normalizes to (0, 0), so every embedding pair is (sin 0, cos 0)
    pl = LocalPolyline([[-50, -25], [-50, -25]], road_type_from_names("residential"))
    row = build_sequence_tensor(LocalSDMap((pl,))).data[0]
    emb = row[: 11 * 32]
    assert np.array_equal(emb[0::2], np.zeros(176)) and np.array_equal(emb[1::2], np.ones(176))
    assert tuple(row[-7:]) == road_type_from_names("residential")


def test_row_layout_x_then_y():
    cfg = EncodingConfig()
    pl = LocalPolyline([[0, 10], [20, 10]], road_type_from_names("service"))
    row = build_sequence_tensor(LocalSDMap((pl,)), cfg).data[0].astype(np.float64)
    pts = resample_polyline(pl.points, 11)
    norm = normalize_to_bev(pts, cfg.bev_range)
    for k in range(11):
        block = row[k * 32:(k + 1) * 32]
        assert np.allclose(block[:16], sinusoidal_embed(norm[k, 0], 16), atol=1e-6)
        assert np.allclose(block[16:], sinusoidal_embed(norm[k, 1], 16), atol=1e-6)


def test_permutation_consistency_and_determinism():
    rng = np.random.default_rng(0)
    pls = tuple(LocalPolyline(rng.uniform(-20, 20, size=(4, 2)), road_type_from_names("highway"))
                for _ in range(5))
    base = build_sequence_tensor(LocalSDMap(pls)).data
    perm = [3, 0, 4, 1, 2]
    permuted = build_sequence_tensor(LocalSDMap(tuple(pls[i] for i in perm))).data
    assert np.array_equal(permuted, base[perm])
    assert build_sequence_tensor(LocalSDMap(pls)).data.tobytes() == base.tobytes()


def test_out_of_range_polyline_rejected():
    pl = LocalPolyline([[0, 0], [80, 0]], road_type_from_names("highway"))
    with pytest.raises(DomainError):
        build_sequence_tensor(LocalSDMap((pl,)))
