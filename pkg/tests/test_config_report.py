import json

import pytest

from smerf.config import (
    DEFAULTS, ConfigError, apply_override, config_hash, dump_config, encoding_config, load_config, manifest,
    toy_config,
)
from smerf.report import (
    SchemaError, ablation_markdown, check_eval_report, comparison_rows, eval_table, percent_delta, road_type_table,
)

# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_defaults_give_reference_constants():
    cfg = load_config()
    enc = encoding_config(cfg)
    assert (enc.N, enc.d, enc.T, enc.K) == (11, 32, 1000.0, 7)
    assert enc.width == 359
    assert cfg["encoder"]["L"] == 6 and cfg["encoder"]["heads"] == 4
    br = cfg["encoding"]["bev_range"]
    assert (br["forward"], br["backward"], br["left"], br["right"]) == (50, 50, 25, 25)


def test_dump_load_round_trip(tmp_path):
    cfg = load_config(overrides=["toy.epochs=5", "synth.layouts=[curve, 4way]"])
    path = tmp_path / "run.yaml"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_json_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"toy": {"H": 32}}))
    assert load_config(path)["toy"]["H"] == 32


def test_hash_tracks_effective_parameters():
    base = load_config()
    same = load_config(overrides=["toy.epochs=30"])
    changed = load_config(overrides=["toy.epochs=31"])
    assert config_hash(same) == config_hash(base)
    assert config_hash(changed) != config_hash(base)
    for ov in ("encoding.T=500", "synth.sd_noise_sigma=0.5", "split.seed=3", "ablate.seeds=[0, 1, 2]"):
        assert config_hash(load_config(overrides=[ov])) != config_hash(base), ov


def test_metrics_are_fixed():
    with pytest.raises(ConfigError, match="metrics.iou_threshold"):
        load_config(overrides=["metrics.iou_threshold=0.5"])
    assert load_config(overrides=["metrics.iou_threshold=0.75"])["metrics"] == DEFAULTS["metrics"]


def test_bad_overrides():
    with pytest.raises(ConfigError):
        apply_override(load_config(), "toy.epochs")
    with pytest.raises(ConfigError, match="toy.nope"):
        load_config(overrides=["toy.nope=1"])
    with pytest.raises(ConfigError):
        load_config(overrides=["toy=3"])
    with pytest.raises(ConfigError):
        load_config(overrides=["encoding.d=30"])
    with pytest.raises(ConfigError):
        load_config(overrides=["split.val_fraction=1.5"])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.yaml")


def test_toy_config_from_run_config():
    tc = toy_config(load_config(), use_sd_map=False, seed=4)
    assert tc.H == 64 and tc.epochs == 30 and not tc.use_sd_map and tc.seed == 4


def test_manifest_fields():
    cfg = load_config()
    m = manifest("synth", cfg, seeds=[7], extra={"count": 3})
    assert m["config_hash"] == config_hash(cfg) and m["seeds"] == [7] and m["count"] == 3
    assert {"smerf", "numpy", "python"} <= set(m["versions"])


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

REPORT_A = {"DET_l": 17.0, "TOP_ll": 1.4, "DET_t": 47.7, "TOP_lt": 14.3, "OLS": 30.2}
REPORT_B = {"DET_l": 26.8, "TOP_ll": 2.8, "DET_t": 48.1, "TOP_lt": 16.4, "OLS": 34.8}


def test_percent_delta():
    assert percent_delta(17.0, 26.8) == "+57.6%"
    assert percent_delta(0.0, 0.0) == "—"
    assert percent_delta(0.0, 3.0) == "—"
    assert percent_delta(20.0, 15.0) == "-25.0%"


@pytest.mark.parametrize("old,new", [(17.0, 26.8), (1.4, 2.8), (47.7, 48.1), (30.2, 34.8), (3.3, 1.1)])
def test_percent_delta_definition(old, new):
    assert percent_delta(old, new) == f"{round((new - old) / old * 100, 1):+.1f}%"


def test_two_reports_have_delta_row():
    md = eval_table([("Baseline", REPORT_A), ("SMERF", REPORT_B)])
    lines = md.strip().splitlines()
    assert lines[0] == "| Method | DET_l | TOP_ll | DET_t | TOP_lt | OLS |"
    assert lines[-1].startswith("| Δ Improvement | +57.6% | +100.0% |")
    assert len(lines) == 5


def test_single_report_has_no_delta_row():
    md = eval_table([("Baseline", REPORT_A)])
    assert "Δ" not in md and len(md.strip().splitlines()) == 3


def test_csv_output():
    csv_text = eval_table([("a", REPORT_A), ("b", REPORT_B)], fmt="csv")
    assert csv_text.splitlines()[0] == "method,DET_l,TOP_ll,DET_t,TOP_lt,OLS"


def test_schema_error_names_field():
    bad = dict(REPORT_A)
    del bad["TOP_lt"]
    with pytest.raises(SchemaError, match="TOP_lt"):
        check_eval_report(bad)
    with pytest.raises(SchemaError, match="DET_l"):
        check_eval_report(dict(REPORT_A, DET_l="high"))
    with pytest.raises(SchemaError):
        check_eval_report([1, 2])


def test_rendering_deterministic():
    args = [("Baseline", REPORT_A), ("SMERF", REPORT_B)]
    assert eval_table(args) == eval_table(args)
    assert comparison_rows(["x", "y", "z"], [REPORT_A] * 3, ["DET_l"])[-1][0] == "z"


def ablation_result():
    def rec(v):
        return {"DET_l": v, "TOP_ll": v / 2, "OLS_reduced": v / 3}

    rows = []
    for s, (a, b) in enumerate([(10.0, 12.0), (11.0, 10.5), (9.0, 13.0)]):
        rows.append({"seed": s,
                     "camera_only": {"full": rec(20.0), "close": rec(30.0), "far": rec(a)},
                     "smerf": {"full": rec(22.0), "close": rec(30.0), "far": rec(b)}})
    return {"per_seed": rows, "summary": {"variants": ["camera_only", "smerf"], "far_DET_l_wins": 2,
                                          "far_DET_l_mean_gain": 1.833}}


def test_ablation_markdown_columns():
    md = ablation_markdown(ablation_result())
    assert "| Method | DET_l | TOP_ll | OLS_reduced |" in md
    assert "| Δ Improvement | +10.0% |" in md
    assert "| 1 | 11.00 | 10.50 | -0.50 |" in md
    assert "2/3 seeds" in md


def test_ablation_schema():
    res = ablation_result()
    del res["per_seed"][1]["smerf"]["far"]["TOP_ll"]
    with pytest.raises(SchemaError, match="TOP_ll"):
        ablation_markdown(res)
    with pytest.raises(SchemaError, match="summary"):
        ablation_markdown({"per_seed": []})


def test_road_type_table():
    md = road_type_table({"highway": 3, "residential": 1})
    assert "| highway | 3 | 75.0% |" in md and "| pedestrian | 0 | 0.0% |" in md


def test_plots_written(tmp_path):
    pytest.importorskip("matplotlib")
    from smerf.report import plot_metric_bars, plot_road_types
    plot_metric_bars([("Baseline", REPORT_A), ("SMERF", REPORT_B)], tmp_path / "bars.png")
    plot_road_types({"highway": 3, "residential": 1}, tmp_path / "types.png")
    assert (tmp_path / "bars.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (tmp_path / "types.png").stat().st_size > 0
