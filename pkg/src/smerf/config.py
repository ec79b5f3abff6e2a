"""Run configuration: one declarative file, CLI overrides, manifests.

A config file (YAML or JSON) holds any subset of these sections; missing keys
take the defaults below::

    encoding: {N: 11, d: 32, T: 1000, K: 7,
               bev_range: {forward: 50, backward: 50, left: 25, right: 25}}
    encoder:  {L: 6, H: 256, heads: 4, ffn_width: null}
    metrics:  {lane_thresholds: [1, 2, 3], topology_threshold: 2,
               iou_threshold: 0.75, close_far_split: 25}      # fixed protocol
    synth:    {seed: 0, count: 200, layouts: [straight, curve], lanes_per_road: [1, 2],
               sd_noise_sigma: 0.3, sd_way_length: 25, occlusion: range_limit,
               occlusion_range: 25, traffic_element_count: 2, tile_size: 100}
    split:    {tile_size: 100, val_fraction: 0.3, seed: 0}
    toy:      {H: 64, heads: 4, refine_layers: 2, decoder_layers: 1, lane_queries: 16,
               map_layers: 2, epochs: 30, learning_rate: 0.001, batch_size: 4, seed: 0}
    ablate:   {seeds: [0, 1, 2, 3, 4]}

Overrides use dotted keys with YAML-typed values, e.g. ``toy.epochs=5`` or
``synth.layouts=[curve]``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import platform
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import __version__
from .encoding import EncodingConfig
from .metrics import CLOSE_FAR_SPLIT, IOU_THRESHOLD, LANE_THRESHOLDS, TOPOLOGY_LANE_THRESHOLD
from .sdmap import BevRange
from .synth import SceneConfig
from .toy import ToyModelConfig
from .transformer import EncoderConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "encoding": {"N": 11, "d": 32, "T": 1000.0, "K": 7,
                 "bev_range": {"forward": 50.0, "backward": 50.0, "left": 25.0, "right": 25.0}},
    "encoder": {"L": 6, "H": 256, "heads": 4, "ffn_width": None},
    "metrics": {"lane_thresholds": list(LANE_THRESHOLDS), "topology_threshold": TOPOLOGY_LANE_THRESHOLD,
                "iou_threshold": IOU_THRESHOLD, "close_far_split": CLOSE_FAR_SPLIT},
    "synth": {"seed": 0, "count": 200, "layouts": ["straight", "curve"], "lanes_per_road": [1, 2],
              "sd_noise_sigma": 0.3, "sd_way_length": 25.0, "occlusion": "range_limit",
              "occlusion_range": 25.0, "traffic_element_count": 2, "tile_size": 100.0},
    "split": {"tile_size": 100.0, "val_fraction": 0.3, "seed": 0},
    "toy": {"H": 64, "heads": 4, "refine_layers": 2, "decoder_layers": 1, "lane_queries": 16,
            "map_layers": 2, "epochs": 30, "learning_rate": 1e-3, "batch_size": 4, "seed": 0},
    "ablate": {"seeds": [0, 1, 2, 3, 4]},
}


def _merge(base: dict, update: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``section.key=value`` override (value parsed as YAML)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    value = yaml.safe_load(raw)
    update: Any = value
    for part in reversed(parts):
        update = {part: update}
    return _merge(cfg, update)


def validate(cfg: Mapping) -> None:
    fixed = DEFAULTS["metrics"]
    for key, value in cfg["metrics"].items():
        if value != fixed[key]:
            raise ConfigError(f"metrics.{key} is a fixed evaluation constant ({fixed[key]!r})")
    try:
        encoding_config(cfg)
        encoder_config(cfg)
        scene_config(cfg)
        toy_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 < cfg["split"]["val_fraction"] < 1.0:
        raise ConfigError("split.val_fraction must be in (0, 1)")


def load_config(path=None, overrides: Sequence[str] = ()) -> dict:
    """Effective config = defaults <- file <- overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError(f"{p}: top level must be a mapping")
        cfg = _merge(cfg, data)
    for ov in overrides:
        cfg = apply_override(cfg, ov)
    validate(cfg)
    return cfg


def dump_config(cfg: Mapping) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg)), sort_keys=True)


def config_hash(cfg: Mapping) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Section -> typed configs
# ---------------------------------------------------------------------------

def bev_range(cfg: Mapping) -> BevRange:
    return BevRange(**cfg["encoding"]["bev_range"])


def encoding_config(cfg: Mapping) -> EncodingConfig:
    e = cfg["encoding"]
    return EncodingConfig(N=e["N"], d=e["d"], T=e["T"], K=e["K"], bev_range=bev_range(cfg))


def encoder_config(cfg: Mapping) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(L=e["L"], H=e["H"], heads=e["heads"], ffn_width=e["ffn_width"],
                         input_width=encoding_config(cfg).width)


def scene_config(cfg: Mapping) -> SceneConfig:
    s = cfg["synth"]
    return SceneConfig(seed=s["seed"], road_layout=s["layouts"][0] if s["layouts"] else "straight",
                       lanes_per_road=s["lanes_per_road"][0] if s["lanes_per_road"] else 1,
                       sd_noise_sigma=s["sd_noise_sigma"], sd_way_length=s["sd_way_length"],
                       occlusion=s["occlusion"], occlusion_range=s["occlusion_range"],
                       traffic_element_count=s["traffic_element_count"], tile_size=s["tile_size"],
                       bev_range=bev_range(cfg))


def toy_config(cfg: Mapping, **extra) -> ToyModelConfig:
    t = dict(cfg["toy"])
    t.update(extra)
    return ToyModelConfig(encoding=encoding_config(cfg), **t)


def manifest(command: str, cfg: Mapping, seeds: Sequence[int] = (), extra: Mapping | None = None) -> dict:
    """Reproducibility record written next to every run's outputs."""
    out = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seeds": [int(s) for s in seeds],
        "versions": {"smerf": __version__, "numpy": np.__version__, "pyyaml": yaml.__version__,
                     "python": platform.python_version()},
    }
    if extra:
        out.update(extra)
    return out
