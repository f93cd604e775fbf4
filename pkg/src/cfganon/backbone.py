"""WaveNet-style x0 predictor with additive conditioning.

The latent entering the residual stack is::

    in_proj(x_t) + c_sem + proj_pro(c_pro) + proj_spk(c_spk) + mlp(sinusoid(t))

``c_sem`` is added with no learned projection, both here and to the input of
every residual block. A null prosody or speaker condition contributes nothing;
the projections carry no bias, so an explicit zero tensor behaves identically.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class BackboneConfig:
    n_blocks: int = 6
    kernel: int = 5
    channels: int = 32
    embed_dim: int = 32
    cond_pro_dim: int = 8
    cond_spk_dim: int = 8
    t_embed_dim: int = 32

    def validate(self) -> None:
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.embed_dim != self.channels:
            raise ValueError("embed_dim must equal channels: c_sem is added without projection")
        if self.t_embed_dim % 2:
            raise ValueError("t_embed_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)


# reference constants of the full-size model; not trainable on a desk CPU
FULL_SCALE = BackboneConfig(
    n_blocks=40, kernel=5, channels=1024, embed_dim=1024, cond_pro_dim=256, cond_spk_dim=256, t_embed_dim=256
)


@dataclass
class ConditionBundle:
    c_sem: np.ndarray
    c_pro: np.ndarray | None = None
    c_spk: np.ndarray | None = None

    def replace(self, **changes) -> "ConditionBundle":
        fields = {"c_sem": self.c_sem, "c_pro": self.c_pro, "c_spk": self.c_spk}
        fields.update(changes)
        return ConditionBundle(**fields)


def sinusoidal_encoding(t, dim: int) -> np.ndarray:
    """``[sin(t f_i), cos(t f_i)]`` with ``f_i = 10000^(-i / (dim/2))``; batched over ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0):
        raise ValueError("timestep must be non-negative")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class DenoiserModel:
    def __init__(self, config: BackboneConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        c, k = config.channels, config.kernel
        p: dict[str, Tensor] = {}
        p["in_w"] = _uniform(rng, (c, config.embed_dim, 1), config.embed_dim)
        p["in_b"] = _uniform(rng, (c,), config.embed_dim)
        p["pro_w"] = _uniform(rng, (c, config.cond_pro_dim, k), config.cond_pro_dim * k)
        p["spk_w"] = _uniform(rng, (c, config.cond_spk_dim, 1), config.cond_spk_dim)
        p["t1_w"] = _uniform(rng, (config.t_embed_dim, c), config.t_embed_dim)
        p["t1_b"] = _uniform(rng, (c,), config.t_embed_dim)
        p["t2_w"] = _uniform(rng, (c, c), c)
        p["t2_b"] = _uniform(rng, (c,), c)
        for i in range(config.n_blocks):
            p[f"b{i}.conv_w"] = _uniform(rng, (2 * c, c, k), c * k)
            p[f"b{i}.conv_b"] = _uniform(rng, (2 * c,), c * k)
            p[f"b{i}.out_w"] = _uniform(rng, (2 * c, c, 1), c)
            p[f"b{i}.out_b"] = _uniform(rng, (2 * c,), c)
        p["out_w"] = Tensor(np.zeros((config.embed_dim, c, 1)), requires_grad=True)
        p["out_b"] = Tensor(np.zeros(config.embed_dim), requires_grad=True)
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def timestep_embedding(self, t) -> Tensor:
        """Sinusoidal code of ``t`` through a 2-layer MLP; returns ``[B, channels]``."""
        base = Tensor(sinusoidal_encoding(t, self.config.t_embed_dim))
        p = self.params
        h = T.silu(T.matmul(base, p["t1_w"]) + p["t1_b"])
        return T.matmul(h, p["t2_w"]) + p["t2_b"]

    def __call__(self, x_t, t, conds: ConditionBundle) -> Tensor:
        return predict_x0(self, x_t, t, conds)


def _check_cond(name: str, arr: np.ndarray, channels: int, ref_shape: tuple) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[-1] != ref_shape[-1]:
        raise ValueError(f"{name} has {arr.shape[-1]} frames, x_t has {ref_shape[-1]}")
    if arr.shape[-2] != channels:
        raise ValueError(f"{name} has {arr.shape[-2]} channels, expected {channels}")
    if arr.ndim == 2 and len(ref_shape) == 3:
        arr = np.broadcast_to(arr, (ref_shape[0],) + arr.shape)
    return arr


def predict_x0(model: DenoiserModel, x_t, t, conds: ConditionBundle) -> Tensor:
    """Predict the clean embedding from ``x_t`` (``[D, L]`` or ``[B, D, L]``) at timestep ``t``."""
    cfg, p = model.config, model.params
    x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t, dtype=np.float64)
    if conds.c_sem is None:
        raise ValueError("the content condition c_sem is always required")
    squeeze = x_t.ndim == 2
    x3 = x_t[None] if squeeze else x_t
    batch = x3.shape[0]
    c_sem = Tensor(_check_cond("c_sem", conds.c_sem, cfg.embed_dim, x3.shape))

    h = T.conv1d(Tensor(x3), p["in_w"], p["in_b"]) + c_sem
    if conds.c_pro is not None:
        c_pro = _check_cond("c_pro", conds.c_pro, cfg.cond_pro_dim, x3.shape)
        h = h + T.conv1d(Tensor(c_pro), p["pro_w"])
    if conds.c_spk is not None:
        c_spk = _check_cond("c_spk", conds.c_spk, cfg.cond_spk_dim, x3.shape)
        h = h + T.conv1d(Tensor(c_spk), p["spk_w"])
    t_arr = np.broadcast_to(np.asarray(t), (batch,))
    temb = model.timestep_embedding(t_arr)
    h = h + T.reshape(temb, (batch, cfg.channels, 1))

    skip = None
    res_scale = 1.0 / math.sqrt(2.0)
    for i in range(cfg.n_blocks):
        z = T.conv1d(h + c_sem, p[f"b{i}.conv_w"], p[f"b{i}.conv_b"])
        gate = T.gated_activation(*T.split_channels(z, 2))
        res, sk = T.split_channels(T.conv1d(gate, p[f"b{i}.out_w"], p[f"b{i}.out_b"]), 2)
        h = (h + res) * res_scale
        skip = sk if skip is None else skip + sk
    out = T.conv1d(skip * (1.0 / math.sqrt(cfg.n_blocks)), p["out_w"], p["out_b"])
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out
