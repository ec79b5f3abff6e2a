"""Miniature lane predictor trained on synthetic scenes.

The camera stack is replaced by the occlusion-masked evidence grid. The grid
is cut into ``patch x patch`` blocks, each block becomes one BEV token, and a
small refiner (self-attention, optional map cross-attention, FFN) updates the
tokens. Lane queries cross-attend to the refined tokens and regress 11-point
lanes as offsets from learned anchor polylines, plus a confidence logit and a
bilinear lane-lane affinity.

With ``use_sd_map`` the SD map is encoded by :func:`smerf.transformer.encode_graph`
and injected at every refiner layer through
:func:`smerf.transformer.cross_attention_graph`. Without it those sites are
skipped entirely, so outputs cannot depend on the SD map.

Scenes are processed in minibatches; all tensors carry a leading batch axis.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoding import EncodingConfig, build_sequence_tensor
from .metrics import (LaneCenterline, TopologyFrame, evaluate, evaluate_breakdown, ols)
from .transformer import (EncoderConfig, _init_attention, _init_layer_norm, _linear, cross_attention_graph,
                          encode_graph, linear, multi_head_attention)

UNIT = 10.0  # meters per model coordinate unit


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ToyModelConfig:
    grid_rows: int = 50
    grid_cols: int = 25
    patch: int = 5
    H: int = 64
    heads: int = 4
    refine_layers: int = 2
    decoder_layers: int = 1
    lane_queries: int = 16
    map_layers: int = 2
    use_sd_map: bool = True
    seed: int = 0
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 4
    point_weight: float = 5.0
    grad_clip: float = 1.0
    encoding: EncodingConfig = field(default_factory=EncodingConfig)

    def __post_init__(self):
        if self.grid_rows % self.patch or self.grid_cols % self.patch:
            raise ValueError("patch size must divide the grid")
        if self.H % self.heads:
            raise ValueError("H must be divisible by heads")
        br = self.encoding.bev_range
        cell_x = (br.forward + br.backward) / self.grid_rows
        cell_y = (br.left + br.right) / self.grid_cols
        if not math.isclose(cell_x, cell_y):
            raise ValueError("grid cells must be square over the BEV range")

    @property
    def tokens(self) -> int:
        return (self.grid_rows // self.patch) * (self.grid_cols // self.patch)

    @property
    def map_config(self) -> EncoderConfig:
        return EncoderConfig(L=self.map_layers, H=self.H, heads=self.heads, input_width=self.encoding.width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoding"] = self.encoding.to_dict() if hasattr(self.encoding, "to_dict") else asdict(self.encoding)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelConfig":
        d = dict(d)
        if isinstance(d.get("encoding"), dict):
            d["encoding"] = EncodingConfig.from_dict(d["encoding"])
        return cls(**d)


@dataclass
class ToyModel:
    config: ToyModelConfig
    weights: dict[str, np.ndarray]

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.weights.values()))


@dataclass
class TrainingLog:
    epoch_loss: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epoch_loss": self.epoch_loss}


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def _anchor_lanes(Q: int, br) -> np.ndarray:
    """Straight anchor polylines tiled over x bands and lateral offsets (model units)."""
    n_x = 4
    n_y = max(1, math.ceil(Q / n_x))
    xs = np.linspace(-br.backward, br.forward, n_x + 1)
    ys = np.linspace(-6.0, 6.0, n_y) if n_y > 1 else np.zeros(1)
    out = []
    for q in range(Q):
        i, j = q % n_x, (q // n_x) % n_y
        x = np.linspace(xs[i], xs[i + 1], 11)
        out.append(np.stack([x, np.full(11, ys[j])], axis=1))
    return np.asarray(out) / UNIT


def init_toy_weights(config: ToyModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Each block draws from its own child seed, so the shared blocks of the
    fused and camera-only variants start identical."""
    H, c = config.H, config
    ss = np.random.SeedSequence(config.seed)
    blocks = ["bev", "refine", "decoder", "heads", "map", "fuse"]
    rngs = {name: np.random.default_rng(child) for name, child in zip(blocks, ss.spawn(len(blocks)))}
    w: dict[str, np.ndarray] = {}

    r = rngs["bev"]
    w["bev.W"], w["bev.b"] = _linear(r, c.patch * c.patch, H, dtype)
    w["bev.pos"] = (0.1 * r.standard_normal((c.tokens, H))).astype(dtype)

    r = rngs["refine"]
    for i in range(c.refine_layers):
        p = f"refine.{i}."
        w.update(_init_attention(r, p + "self.", H, dtype))
        w.update(_init_layer_norm(p + "ln1.", H, dtype))
        w[p + "ffn.W1"], w[p + "ffn.b1"] = _linear(r, H, 2 * H, dtype)
        w[p + "ffn.W2"], w[p + "ffn.b2"] = _linear(r, 2 * H, H, dtype)
        w.update(_init_layer_norm(p + "ln2.", H, dtype))

    r = rngs["decoder"]
    w["dec.query"] = (0.1 * r.standard_normal((c.lane_queries, H))).astype(dtype)
    for i in range(c.decoder_layers):
        p = f"dec.{i}."
        w.update(_init_attention(r, p + "self.", H, dtype))
        w.update(_init_layer_norm(p + "ln1.", H, dtype))
        w.update(_init_attention(r, p + "cross.", H, dtype))
        w.update(_init_layer_norm(p + "ln2.", H, dtype))
        w[p + "ffn.W1"], w[p + "ffn.b1"] = _linear(r, H, 2 * H, dtype)
        w[p + "ffn.W2"], w[p + "ffn.b2"] = _linear(r, 2 * H, H, dtype)
        w.update(_init_layer_norm(p + "ln3.", H, dtype))

    r = rngs["heads"]
    w["head.pts.W"], w["head.pts.b"] = _linear(r, H, 22, dtype)
    w["head.pts.W"] *= 0.1
    w["head.conf.W"], w["head.conf.b"] = _linear(r, H, 1, dtype)
    w["head.aff.A"], _ = _linear(r, H, H, dtype)
    w["head.aff.B"], _ = _linear(r, H, H, dtype)
    w["head.aff.b"] = np.full(1, -2.0, dtype=dtype)
    w["anchors"] = _anchor_lanes(c.lane_queries, c.encoding.bev_range).astype(dtype)

    if c.use_sd_map:
        from .transformer import init_weights
        map_seed = int(rngs["map"].integers(2 ** 31))
        for k, v in init_weights(c.map_config, map_seed, dtype).items():
            w["map." + k] = v
        r = rngs["fuse"]
        for i in range(c.refine_layers):
            w.update(_init_attention(r, f"refine.{i}.fuse.", H, dtype))
            w.update(_init_layer_norm(f"refine.{i}.lnf.", H, dtype))
    return w


def init_model(config: ToyModelConfig, dtype=np.float32) -> ToyModel:
    return ToyModel(config, init_toy_weights(config, dtype))


# ---------------------------------------------------------------------------
# Scene features
# ---------------------------------------------------------------------------

@dataclass
class SceneInputs:
    patches: np.ndarray  # (tokens, patch*patch)
    map_rows: np.ndarray  # (M, width)
    gt_points: np.ndarray  # (G, 11, 2) model units
    gt_ll: np.ndarray  # (G, G)


def patchify(evidence: np.ndarray, patch: int) -> np.ndarray:
    R, C = evidence.shape
    g = evidence.reshape(R // patch, patch, C // patch, patch).transpose(0, 2, 1, 3)
    return g.reshape((R // patch) * (C // patch), patch * patch).astype(np.float64)


def scene_inputs(scene, config: ToyModelConfig) -> SceneInputs:
    ev = np.asarray(scene.visible_evidence)
    if ev.shape != (config.grid_rows, config.grid_cols):
        raise ValueError(f"scene grid {ev.shape} does not match model grid "
                         f"{(config.grid_rows, config.grid_cols)}")
    rows = build_sequence_tensor(scene.sd_map, config.encoding).data if config.use_sd_map else np.zeros(
        (0, config.encoding.width))
    lanes = scene.gt.lanes
    pts = (np.stack([ln.points[:, :2] for ln in lanes]) / UNIT if lanes else np.zeros((0, 11, 2)))
    return SceneInputs(patchify(ev, config.patch), np.asarray(rows, np.float64), pts,
                       np.asarray(scene.gt.ll_affinity, np.float64))


def _batch(inputs: Sequence[SceneInputs], config: ToyModelConfig, dtype):
    patches = np.stack([s.patches for s in inputs]).astype(dtype)
    m_max = max([len(s.map_rows) for s in inputs] + [1])
    W = config.encoding.width
    rows = np.zeros((len(inputs), m_max, W), dtype=dtype)
    mask = np.zeros((len(inputs), m_max), dtype=bool)
    for b, s in enumerate(inputs):
        rows[b, :len(s.map_rows)] = s.map_rows
        mask[b, :len(s.map_rows)] = True
    return patches, rows, mask


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _ffn(x, p, prefix):
    return linear(ad.gelu(linear(x, p[prefix + "W1"], p[prefix + "b1"])), p[prefix + "W2"], p[prefix + "b2"])


def forward(params: Mapping[str, Tensor], config: ToyModelConfig, patches, map_rows=None, map_mask=None):
    """Returns (points (B,Q,11,2) model units, confidence logits (B,Q), affinity logits (B,Q,Q))."""
    c = config
    B = patches.shape[0]
    bev = linear(ad.as_tensor(patches), params["bev.W"], params["bev.b"]) + params["bev.pos"]

    fuse = c.use_sd_map and map_rows is not None
    if fuse and not np.asarray(map_mask).any():
        map_feat = np.zeros(np.asarray(map_mask).shape + (c.H,), dtype=bev.dtype)
    elif fuse:
        enc_mask = np.asarray(map_mask, bool).copy()
        enc_mask[~enc_mask.any(axis=1), 0] = True  # keep softmax rows defined for empty maps
        sub = {k[4:]: v for k, v in params.items() if k.startswith("map.")}
        map_feat = encode_graph(map_rows, enc_mask, sub, c.map_config)

    for i in range(c.refine_layers):
        p = f"refine.{i}."
        bev = ad.layer_norm(bev + multi_head_attention(bev, bev, params, p + "self.", c.heads),
                            params[p + "ln1.gamma"], params[p + "ln1.beta"])
        if fuse:
            bev = ad.layer_norm(cross_attention_graph(bev, map_feat, map_mask, params, c.heads, p + "fuse."),
                                params[p + "lnf.gamma"], params[p + "lnf.beta"])
        bev = ad.layer_norm(bev + _ffn(bev, params, p + "ffn."), params[p + "ln2.gamma"], params[p + "ln2.beta"])

    q = params["dec.query"] + ad.as_tensor(np.zeros((B, 1, c.H), dtype=bev.dtype))
    for i in range(c.decoder_layers):
        p = f"dec.{i}."
        q = ad.layer_norm(q + multi_head_attention(q, q, params, p + "self.", c.heads),
                          params[p + "ln1.gamma"], params[p + "ln1.beta"])
        q = ad.layer_norm(q + multi_head_attention(q, bev, params, p + "cross.", c.heads),
                          params[p + "ln2.gamma"], params[p + "ln2.beta"])
        q = ad.layer_norm(q + _ffn(q, params, p + "ffn."), params[p + "ln3.gamma"], params[p + "ln3.beta"])

    delta = ad.reshape(linear(q, params["head.pts.W"], params["head.pts.b"]), (B, c.lane_queries, 11, 2))
    points = delta + params["anchors"]
    conf = ad.reshape(linear(q, params["head.conf.W"], params["head.conf.b"]), (B, c.lane_queries))
    a = ad.matmul(q, params["head.aff.A"])
    b = ad.matmul(q, params["head.aff.B"])
    aff = ad.matmul(a, ad.swapaxes(b, -1, -2)) * (1.0 / math.sqrt(c.H)) + params["head.aff.b"]
    return points, conf, aff


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def greedy_assign(pred_points: np.ndarray, gt_points: np.ndarray) -> list[int | None]:
    """Query -> GT index by ascending mean point distance, one-to-one."""
    Q, G = len(pred_points), len(gt_points)
    out: list[int | None] = [None] * Q
    if G == 0:
        return out
    cost = np.linalg.norm(pred_points[:, None] - gt_points[None], axis=-1).mean(axis=-1)
    used_q, used_g = set(), set()
    for flat in np.argsort(cost, axis=None, kind="stable"):
        qi, gi = divmod(int(flat), G)
        if qi in used_q or gi in used_g:
            continue
        out[qi] = gi
        used_q.add(qi)
        used_g.add(gi)
        if len(used_g) == min(Q, G):
            break
    return out


def loss_graph(params, config: ToyModelConfig, batch: Sequence[SceneInputs], dtype=np.float32) -> Tensor:
    patches, rows, mask = _batch(batch, config, dtype)
    points, conf, aff = forward(params, config, patches, rows, mask)
    B, Q = len(batch), config.lane_queries
    tgt = np.zeros((B, Q, 11, 2), dtype=dtype)
    w_pts = np.zeros((B, Q, 1, 1), dtype=dtype)
    conf_t = np.zeros((B, Q), dtype=dtype)
    aff_t = np.zeros((B, Q, Q), dtype=dtype)
    aff_w = np.zeros((B, Q, Q), dtype=dtype)
    for b, s in enumerate(batch):
        assign = greedy_assign(points.data[b], s.gt_points)
        for qi, gi in enumerate(assign):
            if gi is None:
                continue
            tgt[b, qi] = s.gt_points[gi]
            w_pts[b, qi] = 1.0
            conf_t[b, qi] = 1.0
            for qj, gj in enumerate(assign):
                if gj is not None and qj != qi:
                    aff_t[b, qi, qj] = s.gt_ll[gi, gj]
                    aff_w[b, qi, qj] = 1.0
    n_match = max(float(w_pts.sum()), 1.0)
    l_pts = ad.sum_(ad.abs_(points - tgt) * w_pts) * (1.0 / (n_match * 22.0))
    l_conf = ad.mean(ad.bce_with_logits(conf, conf_t))
    l_aff = ad.sum_(ad.bce_with_logits(aff, aff_t) * aff_w) * (1.0 / max(float(aff_w.sum()), 1.0))
    return l_pts * config.point_weight + l_conf + l_aff


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            weights[k] = (weights[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(weights[k].dtype)


def train(dataset: Sequence, config: ToyModelConfig, log_fn: Callable[[int, float], None] | None = None,
          dtype=np.float32) -> tuple[ToyModel, TrainingLog]:
    """Minibatch Adam on the composite loss; deterministic given ``config.seed``."""
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    inputs = [s if isinstance(s, SceneInputs) else scene_inputs(s, config) for s in dataset]
    model = init_model(config, dtype)
    weights = model.weights
    opt = Adam(config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    log = TrainingLog()
    for epoch in range(config.epochs):
        order = rng.permutation(len(inputs))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [inputs[i] for i in order[start:start + config.batch_size]]
            params = ad.parameters(weights)
            loss = loss_graph(params, config, batch, dtype)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss in epoch {epoch}")
            grads = ad.gradients(loss, params)
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if config.grad_clip and norm > config.grad_clip:
                grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
            if config.learning_rate:
                opt.step(weights, grads)
            total += value * len(batch)
            count += len(batch)
        log.epoch_loss.append(total / count)
        if log_fn is not None:
            log_fn(epoch, log.epoch_loss[-1])
    return model, log


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict_batch(model: ToyModel, scenes: Sequence) -> list[TopologyFrame]:
    cfg = model.config
    inputs = [s if isinstance(s, SceneInputs) else scene_inputs(s, cfg) for s in scenes]
    dtype = next(iter(model.weights.values())).dtype
    patches, rows, mask = _batch(inputs, cfg, dtype)
    params = {k: Tensor(v) for k, v in model.weights.items()}
    with ad.no_grad():
        points, conf, aff = forward(params, cfg, patches, rows, mask)
    frames = []
    for b in range(len(inputs)):
        pts = points.data[b].astype(np.float64) * UNIT
        c = 1.0 / (1.0 + np.exp(-conf.data[b].astype(np.float64)))
        a = 1.0 / (1.0 + np.exp(-aff.data[b].astype(np.float64)))
        np.fill_diagonal(a, 0.0)
        lanes = [LaneCenterline(np.concatenate([pts[q], np.zeros((11, 1))], axis=1), float(c[q]), q)
                 for q in range(cfg.lane_queries)]
        frames.append(TopologyFrame(lanes, [], a, np.zeros((cfg.lane_queries, 0))))
    return frames


def predict(model: ToyModel, scene) -> TopologyFrame:
    return predict_batch(model, [scene])[0]


def predict_dataset(model: ToyModel, scenes: Sequence, chunk: int = 32) -> list[TopologyFrame]:
    out = []
    for i in range(0, len(scenes), chunk):
        out += predict_batch(model, scenes[i:i + chunk])
    return out


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

def ols_reduced(det_l: float, top_ll: float) -> float:
    """Lane-only score: mean of DET_l and the square-root-scaled TOP_ll."""
    return 0.5 * (det_l + 100.0 * math.sqrt(max(top_ll, 0.0) / 100.0))


def _lane_only(frame: TopologyFrame) -> TopologyFrame:
    return TopologyFrame(frame.lanes, [], frame.ll_affinity, np.zeros((len(frame.lanes), 0)))


def evaluate_variant(model: ToyModel, val_scenes: Sequence) -> dict:
    preds = predict_dataset(model, val_scenes)
    gts = [_lane_only(s.gt) for s in val_scenes]
    full = evaluate(gts, preds)
    out = {"full": full}
    out.update(evaluate_breakdown(gts, preds, by="distance"))
    out.update(evaluate_breakdown(gts, preds, by="intersection"))
    return {k: {"DET_l": r.DET_l, "TOP_ll": r.TOP_ll, "OLS_reduced": ols_reduced(r.DET_l, r.TOP_ll)}
            for k, r in out.items()}


def compare_ablation(train_scenes: Sequence, val_scenes: Sequence, config: ToyModelConfig,
                     seeds: Sequence[int], variants: Mapping[str, bool] | None = None,
                     log_fn: Callable[[str], None] | None = None) -> dict:
    """Train each variant per seed on identical data; returns per-seed reports and a summary."""
    if len(seeds) < 3:
        raise ValueError("compare_ablation needs at least 3 seeds")
    variants = dict(variants or {"camera_only": False, "smerf": True})
    names = list(variants)
    per_seed = []
    for seed in seeds:
        row = {"seed": int(seed)}
        for name in names:
            cfg = replace(config, seed=int(seed), use_sd_map=variants[name])
            model, log = train(train_scenes, cfg)
            row[name] = evaluate_variant(model, val_scenes)
            row[name]["final_loss"] = log.epoch_loss[-1] if log.epoch_loss else None
            if log_fn:
                log_fn(f"seed {seed} {name}: far DET_l {row[name]['far']['DET_l']:.2f} "
                       f"full DET_l {row[name]['full']['DET_l']:.2f}")
        per_seed.append(row)
    base, new = names[0], names[-1]
    gains = [r[new]["far"]["DET_l"] - r[base]["far"]["DET_l"] for r in per_seed]
    summary = {
        "variants": names,
        "far_DET_l_gain_per_seed": gains,
        "far_DET_l_wins": int(sum(g >= 0 for g in gains)),
        "far_DET_l_mean_gain": float(np.mean(gains)),
        "mean": {name: {sub: {m: float(np.mean([r[name][sub][m] for r in per_seed]))
                              for m in ("DET_l", "TOP_ll", "OLS_reduced")}
                        for sub in per_seed[0][name] if sub != "final_loss"}
                 for name in names},
    }
    return {"config": config.to_dict(), "seeds": [int(s) for s in seeds], "per_seed": per_seed,
            "summary": summary}


def config_hash(d: Mapping) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]
