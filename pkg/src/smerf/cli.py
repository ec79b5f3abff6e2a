"""``smerf`` command-line front end.

Exit codes: 0 success, 1 runtime/IO/data error (message names the path),
2 usage error (unknown flag or subcommand, missing argument, bad config).
Every command writes its outputs atomically and leaves a manifest beside them.
``SMERF_THREADS`` sets the number of worker processes for synth and ablate.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import config as cfgmod
from .encoding import build_sequence_tensor
from .metrics import (evaluate, evaluate_breakdown, gt_frame_from_json, pred_frame_from_json,
                      pred_frame_to_json)
from .report import (SchemaError, ablation_markdown, check_eval_report, eval_table, plot_metric_bars,
                     plot_road_types, road_type_table)
from .sdmap import EgoPose, MapError, parse_osm_extract, query_local_map, road_type_stats, serialize_tile
from .smrf_io import SmrfFormatError, atomic_write_text, load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .synth import Scene, SplitError, generate_dataset, split_geodisjoint
from .toy import TrainingError, ToyModel, ToyModelConfig, compare_ablation, predict_dataset, train
from .transformer import EncoderConfig, encode, init_weights


class UsageError(Exception):
    pass


class CliError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("SMERF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise UsageError(f"SMERF_THREADS must be an integer, got {raw!r}") from exc


def _write_json(path, data) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True, default=float) + "\n")


def _manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _write_manifest(out, command: str, cfg, seeds=(), **extra) -> None:
    _write_json(_manifest_path(out), cfgmod.manifest(command, cfg, seeds, extra))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}") from exc


def _json_files(path) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise CliError(f"no such file or directory: {p}")
    return sorted(f for f in p.glob("*.json") if not f.name.endswith("manifest.json")
                  and f.name not in ("split.json",))


def load_scenes(path) -> list[Scene]:
    files = _json_files(path)
    if not files:
        raise CliError(f"no scene files in {path}")
    out = []
    for f in files:
        data = _read_json(f)
        if "gt_lanes" not in data:
            continue
        try:
            out.append(Scene.from_json(data))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{f}: malformed scene ({exc})") from exc
    if not out:
        raise CliError(f"no scene files in {path}")
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args, cfg) -> None:
    try:
        raw = Path(args.input).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {args.input}: {exc.strerror or exc}") from exc
    fmt = None if args.format == "auto" else args.format
    try:
        tile = parse_osm_extract(raw, fmt)
    except MapError as exc:
        raise CliError(f"{args.input}: {exc}") from exc
    atomic_write_text(args.out, serialize_tile(tile) + "\n")
    _write_manifest(args.out, "ingest", cfg, input=str(args.input), polylines=len(tile.polylines))
    print(f"wrote {args.out} ({len(tile.polylines)} polylines)")


def _load_map_item(f: Path):
    if f.suffix == ".osm" or f.suffix == ".xml":
        return parse_osm_extract(f.read_bytes(), "osm"), None
    data = _read_json(f)
    if "gt_lanes" in data or "sd_map" in data:
        scene = Scene.from_json(data)
        return scene.sd_map, scene.region_tile
    return parse_osm_extract(json.dumps(data), "json"), None


def cmd_stats(args, cfg) -> None:
    p = Path(args.input)
    files = sorted(f for f in (p.iterdir() if p.is_dir() else [p])
                   if f.suffix in (".json", ".osm", ".xml") and not f.name.endswith("manifest.json")
                   and f.name != "split.json")
    if not files:
        raise CliError(f"no map or scene files in {p}")
    maps, regions = [], []
    for f in files:
        try:
            m, region = _load_map_item(f)
        except MapError as exc:
            raise CliError(f"{f}: {exc}") from exc
        maps.append(m)
        regions.append(region or "all")
    totals = road_type_stats(maps)
    per_region = road_type_stats(maps, regions) if args.by_region else None
    text = road_type_table(totals)
    print(text, end="")
    if args.out:
        out = {"total": totals, "files": len(files)}
        if per_region is not None:
            out["by_region"] = per_region
        _write_json(args.out, out)
        _write_manifest(args.out, "stats", cfg, input=str(p))
    if args.plot:
        plot_road_types(totals, args.plot)


def cmd_encode(args, cfg) -> None:
    tile_data = _read_json(args.tile)
    try:
        tile = parse_osm_extract(json.dumps(tile_data), "json")
        pose = EgoPose.parse(args.pose)
        local = query_local_map(tile, pose, cfgmod.bev_range(cfg))
    except MapError as exc:
        raise CliError(f"{args.tile}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tensor = build_sequence_tensor(local, cfgmod.encoding_config(cfg))
    data = tensor.data.astype(np.float64) if args.dtype == "f64" else tensor.data
    save_tensor(args.out, data)
    _write_manifest(args.out, "encode", cfg, tile=str(args.tile), pose=args.pose, shape=list(data.shape))
    print(f"wrote {args.out} shape {tuple(data.shape)}")


def cmd_encode_features(args, cfg) -> None:
    enc_cfg = cfgmod.encoder_config(cfg)
    wpath = Path(args.weights)
    if not wpath.exists():
        if args.init_seed is None:
            raise CliError(f"weights file not found: {wpath} (pass --init-seed to create one)")
        weights = init_weights(enc_cfg, args.init_seed)
        save_checkpoint(wpath, weights, {"encoder": enc_cfg.to_dict(), "seed": args.init_seed})
    try:
        weights, meta = load_checkpoint(wpath)
        tensor = load_tensor(args.tensor)
    except SmrfFormatError as exc:
        raise CliError(str(exc)) from exc
    except OSError as exc:
        raise CliError(f"cannot read {exc.filename}: {exc.strerror}") from exc
    if "encoder" in meta:
        enc_cfg = EncoderConfig(**meta["encoder"])
    weights = {k: v.astype(tensor.dtype) for k, v in weights.items()}
    try:
        feats = encode(tensor, None, weights, enc_cfg)
    except ValueError as exc:
        raise CliError(f"{args.tensor}: {exc}") from exc
    save_tensor(args.out, feats.data)
    _write_manifest(args.out, "encode-features", cfg, weights=str(wpath), tensor=str(args.tensor))
    print(f"wrote {args.out} shape {feats.data.shape}")


def _parse_occlusion(text: str | None, cfg) -> tuple[str, float]:
    s = cfg["synth"]
    if text is None:
        return s["occlusion"], s["occlusion_range"]
    if text.startswith("range_limit"):
        rng = text.split(":", 1)[1] if ":" in text else s["occlusion_range"]
        return "range_limit", float(str(rng).rstrip("m"))
    return text, s["occlusion_range"]


def _synth_config(cfg, args=None):
    from dataclasses import replace
    s = cfg["synth"]
    base = cfgmod.scene_config(cfg)
    layouts = list(s["layouts"])
    lanes = list(s["lanes_per_road"])
    if args is not None:
        if args.layout:
            layouts = args.layout.split(",")
        if args.lanes:
            lanes = [int(x) for x in args.lanes.split(",")]
        occ, rng = _parse_occlusion(args.occlusion, cfg)
        base = replace(base, occlusion=occ, occlusion_range=rng,
                       sd_noise_sigma=s["sd_noise_sigma"] if args.noise is None else args.noise)
    return base, layouts, lanes


def cmd_synth(args, cfg) -> None:
    base, layouts, lanes = _synth_config(cfg, args)
    count = cfg["synth"]["count"] if args.count is None else args.count
    seed = cfg["synth"]["seed"] if args.seed is None else args.seed
    t0 = time.time()
    scenes = generate_dataset(base, count, seed, layouts, lanes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        atomic_write_text(out / f"{s.scene_id}.json", s.dumps())
    _write_manifest(out, "synth", cfg, seeds=[seed], count=count, layouts=layouts, lanes_per_road=lanes,
                    scene_config=base.to_dict())
    print(f"wrote {count} scenes to {out} in {time.time() - t0:.1f}s")


def _parse_tiles(text) -> float:
    t = str(text).strip().lower().rstrip("m")
    try:
        v = float(t)
    except ValueError as exc:
        raise UsageError(f"--tiles expects a size like 100m, got {text!r}") from exc
    if v <= 0:
        raise UsageError("--tiles must be positive")
    return v


def cmd_split(args, cfg) -> None:
    sp = cfg["split"]
    tile = sp["tile_size"] if args.tiles is None else _parse_tiles(args.tiles)
    val = sp["val_fraction"] if args.val is None else args.val
    seed = sp["seed"] if args.seed is None else args.seed
    if not 0.0 < val < 1.0:
        raise UsageError("--val must be in (0, 1)")
    scenes = load_scenes(args.data)
    try:
        train_s, val_s = split_geodisjoint(scenes, tile, val, seed)
    except SplitError as exc:
        raise CliError(f"{args.data}: {exc}") from exc
    out = Path(args.out) if args.out else Path(args.data) / "split.json"
    _write_json(out, {"tile_size": tile, "val_fraction": val, "seed": seed,
                      "train": [s.scene_id for s in train_s], "val": [s.scene_id for s in val_s]})
    _write_manifest(out, "split", cfg, seeds=[seed])
    print(f"train {len(train_s)} scenes, val {len(val_s)} scenes -> {out}")


def _subset(scenes, split_file, which):
    if split_file is None:
        return scenes
    ids = set(_read_json(split_file)[which])
    return [s for s in scenes if s.scene_id in ids]


def _onoff(text: str) -> bool:
    return text == "on"


def cmd_train_toy(args, cfg) -> None:
    scenes = _subset(load_scenes(args.data), args.split, "train")
    extra = {"use_sd_map": _onoff(args.use_sd_map)}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.epochs is not None:
        extra["epochs"] = args.epochs
    tcfg = cfgmod.toy_config(cfg, **extra)

    def log(epoch, loss):
        print(f"epoch {epoch:3d} loss {loss:.5f}", flush=True)

    try:
        model, tlog = train(scenes, tcfg, log_fn=None if args.quiet else log)
    except TrainingError as exc:
        raise CliError(str(exc)) from exc
    except ValueError as exc:
        raise CliError(f"{args.data}: {exc}") from exc
    save_checkpoint(args.out, model.weights, {"toy": tcfg.to_dict(), "log": tlog.to_dict()})
    _write_manifest(args.out, "train-toy", cfg, seeds=[tcfg.seed], toy=tcfg.to_dict(),
                    parameter_count=model.parameter_count, epoch_loss=tlog.epoch_loss)
    print(f"wrote {args.out} ({model.parameter_count} parameters)")


def load_toy(path) -> ToyModel:
    try:
        weights, meta = load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except SmrfFormatError as exc:
        raise CliError(str(exc)) from exc
    if "toy" not in meta:
        raise CliError(f"{path}: not a toy-model checkpoint")
    return ToyModel(ToyModelConfig.from_dict(meta["toy"]), weights)


def cmd_predict(args, cfg) -> None:
    model = load_toy(args.weights)
    scenes = _subset(load_scenes(args.data), args.split, "val")
    try:
        frames = predict_dataset(model, scenes)
    except ValueError as exc:
        raise CliError(f"{args.data}: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, f in zip(scenes, frames):
        _write_json(out / f"{s.scene_id}.json", pred_frame_to_json(f, s.scene_id))
    _write_manifest(out, "predict", cfg, weights=str(args.weights), scenes=len(scenes))
    print(f"wrote {len(frames)} predictions to {out}")


def cmd_eval(args, cfg) -> None:
    gt_files = _json_files(args.gt)
    pred_files = _json_files(args.pred)
    preds = {}
    for f in pred_files:
        d = _read_json(f)
        preds[d.get("scene_id", f.stem)] = (f, d)
    keep = set(_read_json(args.split)["val"]) if args.split else None
    gts, prs, missing = [], [], []
    for f in gt_files:
        d = _read_json(f)
        if "gt_lanes" not in d:
            continue
        sid = d.get("scene_id", f.stem)
        if keep is not None and sid not in keep:
            continue
        try:
            gts.append(gt_frame_from_json(d))
            if sid in preds:
                prs.append(pred_frame_from_json(preds[sid][1]))
            else:
                missing.append(sid)
                prs.append(pred_frame_from_json({}))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{preds.get(sid, (f,))[0]}: {exc}") from exc
    if not gts:
        raise CliError(f"no scene files in {args.gt}")
    if missing:
        print(f"warning: {len(missing)} scenes have no prediction file; scored as empty", file=sys.stderr)
    report = evaluate(gts, prs)
    if args.breakdown:
        report.breakdowns = evaluate_breakdown(gts, prs, by=args.breakdown)
    result = report.to_dict()
    if args.report:
        if str(args.report).endswith(".md"):
            rows = [("all", result)] + [(k, v) for k, v in result.get("breakdowns", {}).items()]
            atomic_write_text(args.report, eval_table(rows))
        else:
            _write_json(args.report, result)
        _write_manifest(args.report, "eval", cfg, gt=str(args.gt), pred=str(args.pred), scenes=len(gts))
    print(json.dumps({k: round(v, 2) for k, v in result.items() if isinstance(v, float)}))


def cmd_ablate(args, cfg) -> None:
    if args.data:
        scenes = load_scenes(args.data)
    else:
        base, layouts, lanes = _synth_config(cfg)
        scenes = generate_dataset(base, cfg["synth"]["count"], cfg["synth"]["seed"], layouts, lanes)
    sp = cfg["split"]
    try:
        train_s, val_s = split_geodisjoint(scenes, sp["tile_size"], sp["val_fraction"], sp["seed"])
    except SplitError as exc:
        raise CliError(str(exc)) from exc
    seeds = list(cfg["ablate"]["seeds"]) if args.seeds is None else list(range(args.seeds))
    if len(seeds) < 3:
        raise UsageError("ablate needs at least 3 seeds")
    tcfg = cfgmod.toy_config(cfg)
    t0 = time.time()
    workers = min(_threads(), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            result = _merge_seed_rows(list(pool.map(_ablate_seed, [(train_s, val_s, tcfg, s) for s in seeds])),
                                      tcfg, seeds)
    else:
        result = compare_ablation(train_s, val_s, tcfg, seeds,
                                  log_fn=lambda m: print(m, flush=True))
    result["runtime_seconds"] = time.time() - t0
    result["train_scenes"], result["val_scenes"] = len(train_s), len(val_s)
    md = ablation_markdown(result)
    atomic_write_text(args.report, md)
    json_out = Path(args.json) if args.json else Path(args.report).with_suffix(".json")
    _write_json(json_out, result)
    _write_manifest(args.report, "ablate", cfg, seeds=seeds, runtime_seconds=result["runtime_seconds"])
    print(md, end="")


def _ablate_seed(job):
    from dataclasses import replace
    from .toy import evaluate_variant
    train_s, val_s, tcfg, seed = job
    row = {"seed": int(seed)}
    for name, use in (("camera_only", False), ("smerf", True)):
        model, log = train(train_s, replace(tcfg, seed=int(seed), use_sd_map=use))
        row[name] = evaluate_variant(model, val_s)
        row[name]["final_loss"] = log.epoch_loss[-1]
    return row


def _merge_seed_rows(rows, tcfg, seeds):
    names = ["camera_only", "smerf"]
    gains = [r["smerf"]["far"]["DET_l"] - r["camera_only"]["far"]["DET_l"] for r in rows]
    mean = {n: {sub: {m: float(np.mean([r[n][sub][m] for r in rows])) for m in ("DET_l", "TOP_ll", "OLS_reduced")}
                for sub in rows[0][n] if sub != "final_loss"} for n in names}
    return {"config": tcfg.to_dict(), "seeds": [int(s) for s in seeds], "per_seed": rows,
            "summary": {"variants": names, "far_DET_l_gain_per_seed": gains,
                        "far_DET_l_wins": int(sum(g >= 0 for g in gains)),
                        "far_DET_l_mean_gain": float(np.mean(gains)), "mean": mean}}


def cmd_report(args, cfg) -> None:
    items = []
    for f in args.inputs:
        items.append((Path(f), _read_json(f)))
    names = args.names.split(",") if args.names else [p.stem for p, _ in items]
    if len(names) != len(items):
        raise UsageError("--names must list one name per input")
    try:
        if len(items) == 1 and "per_seed" in items[0][1]:
            text = ablation_markdown(items[0][1])
        else:
            reports = []
            for name, (p, d) in zip(names, items):
                check_eval_report(d, str(p))
                reports.append((name, d))
            text = eval_table(reports, fmt="csv" if args.csv else "markdown")
            if args.plot:
                plot_metric_bars(reports, args.plot)
    except SchemaError as exc:
        raise CliError(str(exc)) from exc
    if args.out:
        atomic_write_text(args.out, text)
        _write_manifest(args.out, "report", cfg, inputs=[str(p) for p, _ in items])
    print(text, end="")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smerf", description="SD-map encoding, lane-topology metrics and toy pipeline")
    p.add_argument("--version", action="version", version=f"smerf {__version__}")
    p.add_argument("--config", help="YAML/JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. toy.epochs=5 (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("ingest", help="parse an OSM XML extract or JSON tile into a JSON tile")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["osm", "json", "auto"], default="auto")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("stats", help="road-type counts over tiles or scenes")
    s.add_argument("--input", required=True)
    s.add_argument("--by-region", action="store_true")
    s.add_argument("--out")
    s.add_argument("--plot", help="write a road-type histogram (PNG)")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("encode", help="local map at a pose -> SMRF polyline-sequence tensor")
    s.add_argument("--tile", required=True)
    s.add_argument("--pose", required=True, help="x,y,heading (meters, radians)")
    s.add_argument("--out", required=True)
    s.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("encode-features", help="run the map encoder on an SMRF tensor")
    s.add_argument("--weights", required=True)
    s.add_argument("--tensor", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init-seed", type=int, help="create --weights with fresh weights if it does not exist")
    s.set_defaults(func=cmd_encode_features)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--layout", help="layout or comma list: straight, curve, t_intersection, 4way, mixed")
    s.add_argument("--lanes", help="lanes per road, or comma list sampled per scene")
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--noise", type=float, help="SD control-point noise sigma (m)")
    s.add_argument("--occlusion", help="none | building_box | range_limit[:meters]")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="geo-disjoint train/val split")
    s.add_argument("--data", required=True)
    s.add_argument("--tiles", help="tile size, e.g. 100m")
    s.add_argument("--val", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-toy", help="train the toy lane predictor")
    s.add_argument("--data", required=True)
    s.add_argument("--split", help="split.json; trains on its train subset")
    s.add_argument("--use-sd-map", choices=["on", "off"], default="on")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--quiet", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("predict", help="write prediction files for scenes")
    s.add_argument("--weights", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", help="split.json; predicts its val subset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score prediction files against scene files")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--split", help="split.json; scores its val subset")
    s.add_argument("--breakdown", choices=["distance", "intersection"])
    s.add_argument("--report", help="output .json or .md")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="camera-only vs SD-map-fused toy models over seeds")
    s.add_argument("--data", help="scene directory (default: generate from the synth config)")
    s.add_argument("--seeds", type=int, help="number of seeds (0..k-1)")
    s.add_argument("--report", required=True, help="markdown output")
    s.add_argument("--json", help="JSON output (default: report path with .json)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="tables/plots from eval or ablation JSON files")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--names", help="comma-separated row names")
    s.add_argument("--csv", action="store_true")
    s.add_argument("--plot", help="metric bar chart (PNG)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = cfgmod.load_config(args.config, args.set)
        args.func(args, cfg)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"smerf {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"smerf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"smerf {args.command}: error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
