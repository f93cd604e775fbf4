"""Classifier-free guidance in x0 space and the anonymization sampler.

Both combinators are written in interpolation form, ``(1 - w) * a + w * b``,
so the end points reproduce one of the two predictions bit for bit.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .backbone import ConditionBundle, DenoiserModel, predict_x0
from .schedule import NoiseSchedule, ddim_step, ddim_timestep_grid
from .tensor import no_grad
from .world import ToyUtterance


class GuidanceMode(str, enum.Enum):
    PROSODY_CFG = "prosody-cfg"
    SPEAKER_CFG = "speaker-cfg"
    PLAIN = "plain"


W_PRO_RANGE = (0.0, 2.0)


class GuidanceError(ValueError):
    pass


@dataclass
class GuidanceSpec:
    mode: GuidanceMode = GuidanceMode.PROSODY_CFG
    w_pro: float = 1.0
    w_spk: float = 0.0
    n_infer_steps: int = 50
    # PLAIN only: which conditions the single forward pass receives
    use_prosody: bool = False
    use_pseudo_speaker: bool = True
    prosody_shift: float | np.ndarray | None = None

    def validate(self) -> None:
        if self.n_infer_steps < 1:
            raise GuidanceError("n_infer_steps must be positive")
        if self.w_spk < 0:
            raise GuidanceError("w_spk must be non-negative")
        if self.mode == GuidanceMode.PROSODY_CFG:
            lo, hi = W_PRO_RANGE
            if not lo <= self.w_pro <= hi:
                raise GuidanceError(f"w_pro must lie in [{lo}, {hi}], got {self.w_pro}")
            if self.w_pro > 1.0:
                warnings.warn(f"w_pro={self.w_pro} > 1 extrapolates beyond the conditional prediction", stacklevel=2)
        if self.mode == GuidanceMode.SPEAKER_CFG and self.use_prosody:
            raise GuidanceError("speaker guidance always runs with a null prosody condition")

    def label(self) -> str:
        if self.mode == GuidanceMode.PROSODY_CFG:
            tag = f"w_pro={self.w_pro:g}"
        elif self.mode == GuidanceMode.SPEAKER_CFG:
            tag = f"w_spk={self.w_spk:g}"
        else:
            pro = "pro" if self.use_prosody else "null"
            spk = "psi" if self.use_pseudo_speaker else "null"
            tag = f"{pro}/{spk}"
        if self.prosody_shift is not None:
            tag += "+shift"
        return f"{self.mode.value}:{tag}"


def _pred(model, x_t, t, c_sem, c_pro, c_spk) -> np.ndarray:
    with no_grad():
        return predict_x0(model, x_t, t, ConditionBundle(c_sem, c_pro, c_spk)).data


def combine(uncond: np.ndarray, cond: np.ndarray, w: float) -> np.ndarray:
    """``uncond + w * (cond - uncond)``, evaluated as ``(1 - w) * uncond + w * cond``."""
    return (1.0 - w) * uncond + w * cond


def cfg_prosody(model: DenoiserModel, x_t, t, c_sem, c_pro, psi, w_pro: float) -> np.ndarray:
    """Prosody-adjusted guidance between prosody-null and prosody-conditional predictions."""
    if c_pro is None or psi is None:
        raise GuidanceError("prosody guidance needs both a prosody condition and a pseudo-speaker")
    uncond = _pred(model, x_t, t, c_sem, None, psi)
    cond = _pred(model, x_t, t, c_sem, c_pro, psi)
    return combine(uncond, cond, w_pro)


def cfg_speaker(model: DenoiserModel, x_t, t, c_sem, psi, w_spk: float) -> np.ndarray:
    """Pseudo-speaker guidance: ``(w + 1) * x0(psi) - w * x0(null)``, prosody always null."""
    if psi is None:
        raise GuidanceError("speaker guidance needs a pseudo-speaker")
    cond = _pred(model, x_t, t, c_sem, None, psi)
    uncond = _pred(model, x_t, t, c_sem, None, None)
    return (w_spk + 1.0) * cond - w_spk * uncond


# pseudo-speaker pool -------------------------------------------------------


@dataclass
class PseudoSpeakerPool:
    labels: list[int]
    embeddings: np.ndarray  # [n, cond_spk_dim]

    def __len__(self) -> int:
        return len(self.labels)


def build_pool(utterance_embeddings: dict[int, list[np.ndarray]]) -> PseudoSpeakerPool:
    """One entry per speaker: the mean of that speaker's utterance-level embeddings."""
    labels = sorted(utterance_embeddings)
    emb = [np.mean(np.stack([np.asarray(e, dtype=np.float64) for e in utterance_embeddings[k]]), axis=0) for k in labels]
    return PseudoSpeakerPool(labels, np.stack(emb) if emb else np.zeros((0, 0)))


def pool_from_utterances(utterances: list[ToyUtterance]) -> PseudoSpeakerPool:
    grouped: dict[int, list[np.ndarray]] = {}
    for u in utterances:
        grouped.setdefault(u.speaker_id, []).append(u.c_spk[:, 0])
    return build_pool(grouped)


def sample_pseudo_speaker(pool: PseudoSpeakerPool, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    if len(pool) == 0:
        raise ValueError("pseudo-speaker pool is empty")
    i = int(rng.integers(len(pool)))
    return pool.labels[i], pool.embeddings[i]


def prosody_mean_shift(c_pro: np.ndarray, delta) -> np.ndarray:
    """Add a constant (scalar or per-channel) offset to every frame."""
    c_pro = np.asarray(c_pro, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim == 0:
        return c_pro + delta
    if delta.ndim != 1 or delta.shape[0] != c_pro.shape[-2]:
        raise ValueError(f"shift has {delta.shape} entries for {c_pro.shape[-2]} channels")
    return c_pro + delta[:, None]


# sampler -------------------------------------------------------------------


def _frames(vec: np.ndarray, frames: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    return np.repeat(vec[..., :, None], frames, axis=-1)


def anonymize(
    model: DenoiserModel,
    sched: NoiseSchedule,
    spec: GuidanceSpec,
    sources: ToyUtterance | list[ToyUtterance],
    pseudo_speakers: np.ndarray | list[np.ndarray] | None,
    noise: np.ndarray,
) -> np.ndarray:
    """Run the guided DDIM sampler from the given initial noise.

    ``noise`` holds ``x_T`` with the shape of the stacked source embeddings.
    The source speaker condition is never used; ``pseudo_speakers`` holds one
    utterance-level vector per source.
    """
    spec.validate()
    single = isinstance(sources, ToyUtterance)
    srcs = [sources] if single else list(sources)
    frames = srcs[0].c_sem.shape[-1]
    c_sem = np.stack([u.c_sem for u in srcs])
    c_pro = np.stack([u.c_pro for u in srcs])
    if spec.prosody_shift is not None:
        c_pro = prosody_mean_shift(c_pro, spec.prosody_shift)
    psi = None
    if pseudo_speakers is not None:
        psi = np.stack([np.asarray(p, dtype=np.float64).reshape(-1) for p in np.atleast_2d(pseudo_speakers)])
        psi = _frames(psi, frames)
    x = np.asarray(noise, dtype=np.float64).reshape((len(srcs),) + srcs[0].x0.shape)

    if spec.mode == GuidanceMode.PROSODY_CFG and psi is None:
        raise GuidanceError("prosody guidance needs a pseudo-speaker")
    if spec.mode == GuidanceMode.SPEAKER_CFG and psi is None:
        raise GuidanceError("speaker guidance needs a pseudo-speaker")
    if spec.mode == GuidanceMode.PLAIN and spec.use_pseudo_speaker and psi is None:
        raise GuidanceError("plain sampling with a pseudo-speaker needs one supplied")

    for t, t_prev in ddim_timestep_grid(sched.n_steps, spec.n_infer_steps):
        if spec.mode == GuidanceMode.PROSODY_CFG:
            x0_hat = cfg_prosody(model, x, t, c_sem, c_pro, psi, spec.w_pro)
        elif spec.mode == GuidanceMode.SPEAKER_CFG:
            x0_hat = cfg_speaker(model, x, t, c_sem, psi, spec.w_spk)
        else:
            x0_hat = _pred(
                model, x, t, c_sem, c_pro if spec.use_prosody else None, psi if spec.use_pseudo_speaker else None
            )
        x = ddim_step(x, t, t_prev, x0_hat, sched)
    return x[0] if single else x
