"""Condition-dropping x0 training, checkpoints and loss logs."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, ConditionBundle, DenoiserModel, predict_x0
from .schedule import ForwardSample, NoiseSchedule, forward_noise, make_linear_schedule
from .world import ToyUtterance, World, generate_utterance

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DANON"
CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e6


class DropPattern(enum.IntEnum):
    ALL = 0
    DROP_PRO = 1
    DROP_PRO_SPK = 2


@dataclass(frozen=True)
class DropSchedule:
    p_all: float = 0.5
    p_drop_pro: float = 0.3
    p_drop_pro_spk: float = 0.2

    def __post_init__(self):
        probs = (self.p_all, self.p_drop_pro, self.p_drop_pro_spk)
        if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
            raise ValueError(f"drop probabilities must be non-negative and sum to 1, got {probs}")

    @property
    def probabilities(self) -> tuple[float, float, float]:
        return (self.p_all, self.p_drop_pro, self.p_drop_pro_spk)


def sample_drop_pattern(rng: np.random.Generator, schedule: DropSchedule = DropSchedule()) -> DropPattern:
    # there is deliberately no pattern that drops the speaker while keeping prosody
    u = rng.random()
    if u < schedule.p_all:
        return DropPattern.ALL
    if u < schedule.p_all + schedule.p_drop_pro:
        return DropPattern.DROP_PRO
    return DropPattern.DROP_PRO_SPK


def apply_drop(utt: ToyUtterance, pattern: DropPattern) -> ConditionBundle:
    if pattern == DropPattern.ALL:
        return ConditionBundle(utt.c_sem, utt.c_pro, utt.c_spk)
    if pattern == DropPattern.DROP_PRO:
        return ConditionBundle(utt.c_sem, None, utt.c_spk)
    return ConditionBundle(utt.c_sem, None, None)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 8
    lr: float = 2e-3
    seed: int = 0
    diffusion_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    checkpoint_every: int = 0
    drop: DropSchedule = field(default_factory=DropSchedule)

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop"] = list(self.drop.probabilities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        drop = d.pop("drop", None)
        cfg = cls(**d)
        if drop is not None:
            cfg.drop = DropSchedule(*drop)
        return cfg


# full-size reference values; the desk-scale defaults above are much smaller
FULL_TRAINING = TrainConfig(steps=400_000, batch=8, lr=1e-4, diffusion_steps=1000)


class TrainingDivergedError(RuntimeError):
    pass


def x0_training_loss(model, sample: ForwardSample, conds: ConditionBundle) -> T.Tensor:
    """Mean-square error between the clean target and the model's x0 prediction."""
    pred = model(sample.x_t, sample.t, conds)
    return T.mse_loss(pred, sample.x0_ref)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5452, step])


def draw_training_batch(world: World, rng: np.random.Generator, batch: int) -> list[ToyUtterance]:
    speakers = rng.choice(world.pool_speakers, size=batch)
    return [generate_utterance(world, int(s), rng) for s in speakers]


def _stack_bundle(utts: list[ToyUtterance], patterns: list[DropPattern]) -> ConditionBundle:
    # a dropped condition is realized as an explicit zero block, which adds exactly nothing
    c_sem = np.stack([u.c_sem for u in utts])
    c_pro = np.stack([u.c_pro if p == DropPattern.ALL else np.zeros_like(u.c_pro) for u, p in zip(utts, patterns)])
    c_spk = np.stack(
        [u.c_spk if p != DropPattern.DROP_PRO_SPK else np.zeros_like(u.c_spk) for u, p in zip(utts, patterns)]
    )
    return ConditionBundle(c_sem, c_pro, c_spk)


def train_step(
    model: DenoiserModel,
    batch: list[ToyUtterance],
    rng: np.random.Generator,
    sched: NoiseSchedule,
    opt: T.Adam,
    drop: DropSchedule = DropSchedule(),
) -> float:
    """One Adam step on the batch-mean x0 loss; returns the loss value."""
    if not batch:
        raise ValueError("empty batch")
    n = len(batch)
    t = rng.integers(1, sched.n_steps + 1, size=n)
    x0 = np.stack([u.x0 for u in batch])
    eps = rng.standard_normal(x0.shape)
    patterns = [sample_drop_pattern(rng, drop) for _ in range(n)]
    sample = forward_noise(x0, t, eps, sched)
    opt.zero_grad()
    loss = x0_training_loss(model, sample, _stack_bundle(batch, patterns))
    value = float(loss.data)
    if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise TrainingDivergedError(f"loss diverged: {value}")
    loss.backward()
    opt.step()
    return value


@dataclass
class TrainResult:
    model: DenoiserModel
    optimizer: T.Adam
    losses: list[tuple[int, float]]


def train_loop(
    cfg: TrainConfig,
    world: World,
    model: DenoiserModel,
    optimizer: T.Adam | None = None,
    start_step: int = 0,
    checkpoint_fn: Callable[[int, DenoiserModel, T.Adam], None] | None = None,
) -> TrainResult:
    """Run steps ``start_step + 1 .. cfg.steps``; step ``k`` draws from ``step_rng(seed, k)``."""
    sched = cfg.schedule()
    opt = optimizer if optimizer is not None else T.Adam(model.parameters(), lr=cfg.lr)
    losses: list[tuple[int, float]] = []
    for step in range(start_step + 1, cfg.steps + 1):
        rng = step_rng(cfg.seed, step)
        batch = draw_training_batch(world, rng, cfg.batch)
        loss = train_step(model, batch, rng, sched, opt, cfg.drop)
        losses.append((step, loss))
        if step % 500 == 0:
            log.info("step %d loss %.5f", step, loss)
        if checkpoint_fn is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint_fn(step, model, opt)
    return TrainResult(model=model, optimizer=opt, losses=losses)


def write_loss_log(path: str | Path, losses: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in losses:
            writer.writerow([step, repr(float(loss))])


def read_loss_log(path: str | Path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


# checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict  # carries at least "backbone"; commands also store world/train sections
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    rng_state: int
    step: int

    def build_model(self) -> DenoiserModel:
        model = DenoiserModel(BackboneConfig(**self.config["backbone"]))
        model.load_state_dict(self.params)
        return model

    def build_optimizer(self, model: DenoiserModel, lr: float) -> T.Adam:
        opt = T.Adam(model.parameters(), lr=lr)
        names = list(model.params)
        opt.state.m = [self.adam_m[n].astype(np.float64) for n in names]
        opt.state.v = [self.adam_v[n].astype(np.float64) for n in names]
        opt.state.step = self.adam_step
        return opt


def make_checkpoint(config: dict, model: DenoiserModel, opt: T.Adam | None, rng_state: int, step: int) -> Checkpoint:
    names = list(model.params)
    params = {n: model.params[n].data for n in names}
    if opt is None:
        m = {n: np.zeros_like(a) for n, a in params.items()}
        v = {n: np.zeros_like(a) for n, a in params.items()}
        adam_step = 0
    else:
        m = dict(zip(names, opt.state.m))
        v = dict(zip(names, opt.state.v))
        adam_step = opt.state.step
    return Checkpoint(config, params, m, v, adam_step, rng_state, step)


def _write_table(buf: bytearray, arrays: dict[str, np.ndarray]) -> None:
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    for arr in arrays.values():
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _read_table(data: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shapes = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = bytes(data[pos : pos + ln]).decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        shapes.append((name, shape))
    out = {}
    for name, shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        out[name] = arr.astype(np.float64)
        pos += 4 * count
    return out, pos


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    buf += struct.pack("<I", len(cfg)) + cfg
    _write_table(buf, ckpt.params)
    _write_table(buf, ckpt.adam_m)
    _write_table(buf, ckpt.adam_v)
    buf += struct.pack("<Q", ckpt.adam_step)
    buf += struct.pack("<Q", ckpt.rng_state & 0xFFFFFFFFFFFFFFFF)
    buf += struct.pack("<Q", ckpt.step)
    return bytes(buf)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = memoryview(Path(path).read_bytes())
    if bytes(data[:5]) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 5)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 9
    (cfg_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config = json.loads(bytes(data[pos : pos + cfg_len]))
    pos += cfg_len
    params, pos = _read_table(data, pos)
    adam_m, pos = _read_table(data, pos)
    adam_v, pos = _read_table(data, pos)
    adam_step, rng_state, step = struct.unpack_from("<QQQ", data, pos)
    return Checkpoint(config, params, adam_m, adam_v, adam_step, rng_state, step)


def quantize_f32(model: DenoiserModel, opt: T.Adam | None = None) -> None:
    """Round parameters (and Adam moments) through f32, as a save/load round trip does."""
    for p in model.parameters():
        p.data = p.data.astype(np.float32).astype(np.float64)
    if opt is not None:
        opt.state.m = [m.astype(np.float32).astype(np.float64) for m in opt.state.m]
        opt.state.v = [v.astype(np.float32).astype(np.float64) for v in opt.state.v]
