"""Modular trajectory forecaster.

Scene and agent-motion inputs are encoded by separate two-block MLPs (tags
``S`` and ``A``), fused by one single-head self-attention layer over the two
embeddings plus a dense layer (tag ``F``), and decoded (tag ``D``) into
``k_modes`` trajectories of per-step offsets that are integrated from the
last observed position.

Everything here works on batches. The single-sample operations in the public
API are thin wrappers that add a batch axis of one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor
from .rng import SplitMix64
from .synthworld import Sample, SceneGrid

MODULE_TAGS = ("S", "A", "F", "D")
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    grid_h: int = 16
    grid_w: int = 16
    n_classes: int = 4
    t_obs: int = 8
    t_pred: int = 12
    d_model: int = 64
    k_modes: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("grid_h", "grid_w", "n_classes", "t_pred", "d_model", "k_modes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.t_obs < 2:
            raise ValueError("t_obs must be at least 2")
        if self.d_model % 2:
            raise ValueError("d_model must be even")

    def to_dict(self) -> dict:
        return asdict(self)


# (layer name, tag, d_in, d_out, bias)
def layer_table(cfg: ModelConfig) -> list[tuple[str, str, int, int, bool]]:
    d = cfg.d_model
    scene_in = cfg.grid_h * cfg.grid_w * cfg.n_classes
    motion_in = 2 * (cfg.t_obs - 1)
    return [
        ("scene.fc1", "S", scene_in, d, True),
        ("scene.fc2", "S", d, d, True),
        ("motion.fc1", "A", motion_in, d, True),
        ("motion.fc2", "A", d, d, True),
        ("fusion.attn.wq", "F", d, d, False),
        ("fusion.attn.wk", "F", d, d, False),
        ("fusion.attn.wv", "F", d, d, False),
        ("fusion.attn.wo", "F", d, d, False),
        ("fusion.fc", "F", 2 * d, 2 * d, True),
        ("decoder.fc1", "D", 2 * d, 2 * d, True),
        ("decoder.fc2", "D", 2 * d, cfg.k_modes * cfg.t_pred * 2, True),
    ]


def norm_table(cfg: ModelConfig) -> list[tuple[str, str, int]]:
    d = cfg.d_model
    return [("scene.ln1", "S", d), ("scene.ln2", "S", d),
            ("motion.ln1", "A", d), ("motion.ln2", "A", d)]


class Adapter(Protocol):
    """Anything that adds a trainable residual next to a frozen linear map."""

    def residual(self, h: Tensor) -> Tensor: ...

    def params(self) -> list[Param]: ...


class ForecastModel:
    """Configuration plus a flat name -> Param map with module tags."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Param], tags: Mapping[str, str]):
        self.config = config
        self.params = dict(params)
        self.tags = dict(tags)

    @classmethod
    def init(cls, config: ModelConfig) -> "ForecastModel":
        """He-style Gaussian weights from the config seed, zero biases,
        unit/zero layernorm affine."""
        rng = SplitMix64(config.seed)
        params, tags = {}, {}
        for name, tag, d_in, d_out, bias in layer_table(config):
            std = math.sqrt(2.0 / d_in)
            if name == "decoder.fc2":
                std = 0.1 / math.sqrt(d_in)
            w = rng.gauss_block(d_out * d_in, 0.0, std).reshape(d_out, d_in)
            params[name + ".weight"] = Param(name + ".weight", w)
            tags[name + ".weight"] = tag
            if bias:
                params[name + ".bias"] = Param(name + ".bias", np.zeros(d_out))
                tags[name + ".bias"] = tag
        for name, tag, d in norm_table(config):
            params[name + ".gamma"] = Param(name + ".gamma", np.ones(d))
            params[name + ".beta"] = Param(name + ".beta", np.zeros(d))
            tags[name + ".gamma"] = tags[name + ".beta"] = tag
        return cls(config, params, tags)

    def clone(self) -> "ForecastModel":
        params = {k: Param(p.name, p.data.copy(), p.trainable) for k, p in self.params.items()}
        return ForecastModel(self.config, params, self.tags)

    def linear_names(self) -> list[str]:
        return [name for name, *_ in layer_table(self.config)]

    def norm_param_names(self) -> list[str]:
        return [n + s for n, _, _ in norm_table(self.config) for s in (".gamma", ".beta")]

    def names_with_tag(self, *tags: str) -> list[str]:
        return [n for n in self.params if self.tags[n] in tags]

    def set_trainable(self, names) -> None:
        names = set(names)
        for n, p in self.params.items():
            p.trainable = n in names

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k].data[...] = v

    def __call__(self, batch, adapters=None) -> Tensor:
        return forward_batch(self, batch, adapters)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Stacked model inputs: one-hot scenes, past offsets, last positions,
    and (optionally) ground-truth futures."""

    scene_onehot: np.ndarray  # B x (H*W*C)
    offsets: np.ndarray       # B x 2(t_obs-1)
    last_obs: np.ndarray      # B x 2
    future: np.ndarray | None = None  # B x t_pred x 2

    def __len__(self) -> int:
        return self.scene_onehot.shape[0]


def scene_onehot(grid: SceneGrid, cfg: ModelConfig) -> np.ndarray:
    if grid.shape != (cfg.grid_h, cfg.grid_w):
        raise ValueError(f"scene {grid.id!r} is {grid.shape}, model expects {(cfg.grid_h, cfg.grid_w)}")
    if grid.cells.max() >= cfg.n_classes or grid.cells.min() < 0:
        raise ValueError(f"scene {grid.id!r} has class ids outside [0, {cfg.n_classes})")
    return np.eye(cfg.n_classes)[grid.cells].reshape(-1)


def past_offsets(past, cfg: ModelConfig) -> np.ndarray:
    past = np.asarray(past, dtype=np.float64)
    if past.shape != (cfg.t_obs, 2):
        raise ValueError(f"past must be {cfg.t_obs} 2-D points, got shape {past.shape}")
    if not np.all(np.isfinite(past)):
        raise ValueError("past contains non-finite coordinates")
    return np.diff(past, axis=0).reshape(-1)


def make_batch(samples: Sequence[Sample], scenes: Mapping[str, SceneGrid], cfg: ModelConfig,
               cache: dict | None = None) -> Batch:
    cache = {} if cache is None else cache
    onehots = []
    for s in samples:
        if s.scene_id not in cache:
            cache[s.scene_id] = scene_onehot(scenes[s.scene_id], cfg)
        onehots.append(cache[s.scene_id])
    offsets = np.stack([past_offsets(s.past, cfg) for s in samples])
    last = np.stack([np.asarray(s.past, dtype=np.float64)[-1] for s in samples])
    future = np.stack([np.asarray(s.future, dtype=np.float64) for s in samples])
    return Batch(np.stack(onehots), offsets, last, future)


# ---------------------------------------------------------------------------
# layers


def _linear(model: ForecastModel, name: str, h: Tensor, adapters) -> Tensor:
    W = model.params[name + ".weight"]
    b = model.params.get(name + ".bias")
    out = dc.apply_linear(W, b, h)
    if adapters and W.name in adapters:
        out = dc.add(out, adapters[W.name].residual(h))
    return out


def _ln(model: ForecastModel, name: str, h: Tensor) -> Tensor:
    return dc.apply_layernorm(model.params[name + ".gamma"], model.params[name + ".beta"], h, LN_EPS)


def _mlp_branch(model, prefix, x, adapters) -> Tensor:
    h = dc.apply_relu(_ln(model, prefix + ".ln1", _linear(model, prefix + ".fc1", x, adapters)))
    return dc.apply_relu(_ln(model, prefix + ".ln2", _linear(model, prefix + ".fc2", h, adapters)))


def encode_scene_batch(model, onehot, adapters=None) -> Tensor:
    return _mlp_branch(model, "scene", dc.as_tensor(onehot), adapters)


def encode_motion_batch(model, offsets, adapters=None) -> Tensor:
    return _mlp_branch(model, "motion", dc.as_tensor(offsets), adapters)


def fuse_batch(model, scene_emb: Tensor, motion_emb: Tensor, adapters=None, return_attention=False):
    d = model.config.d_model
    tokens = dc.stack([scene_emb, motion_emb], axis=-2)  # B x 2 x d
    q = _linear(model, "fusion.attn.wq", tokens, adapters)
    k = _linear(model, "fusion.attn.wk", tokens, adapters)
    v = _linear(model, "fusion.attn.wv", tokens, adapters)
    logits = dc.scale(dc.matmul(q, dc.transpose_last(k)), 1.0 / math.sqrt(d))
    attn = dc.apply_softmax_rows(logits)
    mixed = _linear(model, "fusion.attn.wo", dc.matmul(attn, v), adapters)
    updated = dc.add(tokens, mixed)
    flat = dc.reshape(updated, updated.shape[:-2] + (2 * d,))
    out = dc.apply_relu(_linear(model, "fusion.fc", flat, adapters))
    return (out, attn) if return_attention else out


def decode_batch(model, fused: Tensor, last_obs, adapters=None) -> Tensor:
    cfg = model.config
    h = dc.apply_relu(_linear(model, "decoder.fc1", fused, adapters))
    raw = _linear(model, "decoder.fc2", h, adapters)
    steps = dc.reshape(raw, raw.shape[:-1] + (cfg.k_modes, cfg.t_pred, 2))
    last = np.asarray(last_obs, dtype=np.float64)[..., None, None, :]
    return dc.add(dc.cumsum(steps, axis=-2), last)


def forward_batch(model: ForecastModel, batch: Batch, adapters=None) -> Tensor:
    """B x k_modes x t_pred x 2 absolute predictions."""
    s = encode_scene_batch(model, batch.scene_onehot, adapters)
    m = encode_motion_batch(model, batch.offsets, adapters)
    return decode_batch(model, fuse_batch(model, s, m, adapters), batch.last_obs, adapters)


# ---------------------------------------------------------------------------
# single-sample API


def encode_scene(model: ForecastModel, grid: SceneGrid, adapters=None) -> Tensor:
    return encode_scene_batch(model, scene_onehot(grid, model.config)[None, :], adapters)


def encode_motion(model: ForecastModel, past, adapters=None) -> Tensor:
    return encode_motion_batch(model, past_offsets(past, model.config)[None, :], adapters)


def fuse(model: ForecastModel, scene_emb: Tensor, motion_emb: Tensor, adapters=None) -> Tensor:
    d = model.config.d_model
    for t in (scene_emb, motion_emb):
        if t.shape != (1, d):
            raise dc.ShapeError(f"embeddings must be 1x{d}, got {t.shape}")
    return fuse_batch(model, scene_emb, motion_emb, adapters)


def decode(model: ForecastModel, fused: Tensor, last_obs, adapters=None) -> Tensor:
    """k_modes x t_pred x 2 for a single 1 x 2d fused vector."""
    if fused.shape != (1, 2 * model.config.d_model):
        raise dc.ShapeError(f"fused input must be 1x{2 * model.config.d_model}, got {fused.shape}")
    out = decode_batch(model, fused, np.asarray(last_obs, dtype=np.float64)[None, :], adapters)
    return dc.reshape(out, out.shape[1:])


def forward(model: ForecastModel, sample: Sample, scene: SceneGrid, adapters=None) -> Tensor:
    s = encode_scene(model, scene, adapters)
    m = encode_motion(model, sample.past, adapters)
    return decode(model, fuse(model, s, m, adapters), np.asarray(sample.past)[-1], adapters)
