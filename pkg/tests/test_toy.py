from dataclasses import replace

import numpy as np
import pytest

from smerf import autodiff as ad
from smerf.encoding import EncodingConfig
from smerf.metrics import det_l, pred_frame_from_json, pred_frame_to_json
from smerf.sdmap import LocalPolyline, LocalSDMap, road_type_from_names
from smerf.synth import SceneConfig, generate_dataset, generate_scene
from smerf.toy import (
    ToyModelConfig, compare_ablation, greedy_assign, init_model, init_toy_weights, loss_graph, ols_reduced,
    predict, predict_batch, scene_inputs, train,
)

from oracles import central_difference, max_relative_error

SMALL = ToyModelConfig(H=16, heads=2, refine_layers=1, lane_queries=8, map_layers=1, epochs=2, batch_size=4)


def noisy_map(seed, count=6):
    rng = np.random.default_rng(seed)
    return LocalSDMap(tuple(LocalPolyline(rng.uniform(-20, 20, size=(5, 2)), road_type_from_names("highway"))
                            for _ in range(count)))


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(SceneConfig(sd_noise_sigma=0.3, occlusion="range_limit"), 12, seed=0,
                            layouts=("straight", "curve"))


def test_config_checks():
    with pytest.raises(ValueError):
        ToyModelConfig(patch=7)
    with pytest.raises(ValueError):
        ToyModelConfig(grid_rows=50, grid_cols=50)  # 2 m x 1 m cells
    assert ToyModelConfig().tokens == 50


def test_lr_zero_keeps_weights(scenes):
    cfg = replace(SMALL, epochs=1, learning_rate=0.0)
    model, log = train(scenes[:4], cfg)
    init = init_toy_weights(cfg)
    assert set(model.weights) == set(init)
    assert all(model.weights[k].tobytes() == init[k].tobytes() for k in init)
    assert len(log.epoch_loss) == 1


def test_same_seed_same_curve(scenes):
    _, a = train(scenes[:6], SMALL)
    _, b = train(scenes[:6], SMALL)
    assert a.epoch_loss == b.epoch_loss
    _, c = train(scenes[:6], replace(SMALL, seed=1))
    assert c.epoch_loss != a.epoch_loss


def test_empty_training_set():
    with pytest.raises(ValueError):
        train([], SMALL)


def test_loss_decreases_on_straight_roads():
    data = generate_dataset(SceneConfig(road_layout="straight"), 50, seed=4)
    model, log = train(data, ToyModelConfig(epochs=30))
    assert log.epoch_loss[-1] < log.epoch_loss[0]
    # a trained model finds lanes on scenes it has seen
    assert det_l(predict(model, data[0]).lanes, data[0].gt.lanes) > 0


def test_untrained_prediction_format(scenes):
    model = init_model(ToyModelConfig())
    frame = predict(model, scenes[0])
    assert len(frame.lanes) == 16
    assert all(ln.points.shape == (11, 3) for ln in frame.lanes)
    assert all(0.0 <= ln.confidence <= 1.0 for ln in frame.lanes)
    assert frame.ll_affinity.shape == (16, 16) and np.all(np.diag(frame.ll_affinity) == 0)
    back = pred_frame_from_json(pred_frame_to_json(frame, scenes[0].scene_id))
    assert len(back.lanes) == 16 and np.allclose(back.ll_affinity, frame.ll_affinity)


def test_prediction_deterministic(scenes):
    model = init_model(SMALL)
    a, b = predict(model, scenes[1]), predict(model, scenes[1])
    assert all(x.points.tobytes() == y.points.tobytes() for x, y in zip(a.lanes, b.lanes))


def test_grid_mismatch():
    scene = generate_scene(SceneConfig(grid_rows=20, grid_cols=10))
    with pytest.raises(ValueError):
        predict(init_model(ToyModelConfig()), scene)


def test_camera_only_ignores_sd_map(scenes):
    model = init_model(replace(SMALL, use_sd_map=False))
    for s in scenes[:4]:
        base = predict(model, s)
        swapped = predict(model, replace(s, sd_map=noisy_map(7)))
        emptied = predict(model, replace(s, sd_map=LocalSDMap(())))
        for other in (swapped, emptied):
            assert all(x.points.tobytes() == y.points.tobytes() for x, y in zip(base.lanes, other.lanes))
            assert base.ll_affinity.tobytes() == other.ll_affinity.tobytes()


def test_fused_model_reads_sd_map(scenes):
    model = init_model(SMALL)
    a = predict(model, scenes[0])
    b = predict(model, replace(scenes[0], sd_map=noisy_map(7)))
    assert any(x.points.tobytes() != y.points.tobytes() for x, y in zip(a.lanes, b.lanes))


def test_batched_prediction_matches_single(scenes):
    model = init_model(SMALL, np.float64)
    batch = predict_batch(model, scenes[:3])
    for s, frame in zip(scenes[:3], batch):
        single = predict(model, s)
        for x, y in zip(frame.lanes, single.lanes):
            assert np.allclose(x.points, y.points, atol=1e-10)


def test_parameter_count_reported():
    model = init_model(ToyModelConfig())
    assert model.parameter_count == sum(v.size for v in model.weights.values())
    camera = init_model(ToyModelConfig(use_sd_map=False))
    # shared blocks start identical across the two variants
    for k in camera.weights:
        if not k.startswith(("map.", "refine.0.fuse", "refine.1.fuse")):
            assert camera.weights[k].tobytes() == model.weights[k].tobytes(), k


def test_greedy_assign():
    gt = np.zeros((2, 11, 2))
    gt[1] += 10.0
    pred = np.stack([gt[1] + 0.1, gt[0] + 0.5, gt[0] + 0.2])
    assert greedy_assign(pred, gt) == [1, None, 0]
    assert greedy_assign(pred, np.zeros((0, 11, 2))) == [None] * 3


def test_ols_reduced():
    assert ols_reduced(100.0, 100.0) == 100.0
    assert ols_reduced(40.0, 25.0) == pytest.approx(45.0)


def test_identical_variants_give_identical_reports(scenes):
    out = compare_ablation(scenes[:6], scenes[6:9], replace(SMALL, epochs=1), seeds=[0, 1, 2],
                           variants={"a": False, "b": False})
    for row in out["per_seed"]:
        assert row["a"] == row["b"]
    assert out["summary"]["far_DET_l_gain_per_seed"] == [0.0, 0.0, 0.0]
    assert set(out["per_seed"][0]["a"]["full"]) == {"DET_l", "TOP_ll", "OLS_reduced"}


def test_ablation_needs_three_seeds(scenes):
    with pytest.raises(ValueError):
        compare_ablation(scenes[:2], scenes[2:4], SMALL, seeds=[0, 1])


def tiny_config():
    return ToyModelConfig(grid_rows=10, grid_cols=5, patch=5, H=8, heads=2, refine_layers=1, decoder_layers=1,
                          lane_queries=3, map_layers=1, encoding=EncodingConfig(N=3, d=4))


def test_full_model_gradient_tiny():
    cfg = tiny_config()
    scene_cfg = SceneConfig(grid_rows=10, grid_cols=5, road_layout="curve", lanes_per_road=1, sd_noise_sigma=0.3)
    inputs = []
    for s in range(2):
        inp = scene_inputs(generate_scene(replace(scene_cfg, seed=s)), cfg)
        inp.map_rows = inp.map_rows[:4]
        inputs.append(inp)
    weights = init_toy_weights(cfg, np.float64)

    def loss():
        with ad.no_grad():
            return float(loss_graph({k: ad.Tensor(v) for k, v in weights.items()}, cfg, inputs, np.float64).data)

    params = ad.parameters(weights)
    grads = ad.gradients(loss_graph(params, cfg, inputs, np.float64), params)
    numeric = central_difference(loss, weights)
    for k in weights:
        assert max_relative_error(grads[k], numeric[k]) < 1e-4, k
    assert any(np.any(grads[k] != 0) for k in grads if k.startswith("map."))
