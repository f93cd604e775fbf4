"""Synthetic codec-embedding world with known content, prosody and speaker factors.

Each clean embedding is assembled additively::

    x0 = c_sem + B_p @ lift(p) + B_s @ s + noise

where ``c_sem`` is a piecewise-constant sequence of token vectors (the
first-level codec embedding analog), ``lift(p) = [p, p**2, sin p]`` per frame,
and ``s`` is the unit-norm speaker vector. The prosody trajectory carries a
per-speaker offset scaled by the leakage strength, and the prosody condition
only partially removes that offset, so prosody leaks identity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PROSODY_LIFT_DIM = 3
MAX_CONDITION_NUMBER = 1e4


@dataclass
class WorldConfig:
    n_speakers: int = 16
    n_pool_speakers: int = 8
    n_semantic_tokens: int = 16
    frames: int = 64
    embed_dim: int = 32
    cond_pro_dim: int = 8
    cond_spk_dim: int = 8
    leakage: float = 0.5
    offset_std: float = 1.5
    residual_noise_std: float = 0.05
    max_speaker_cosine: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if not 1 <= self.n_pool_speakers < self.n_speakers:
            raise ValueError("pool speakers must be a proper, nonempty subset")
        if self.frames < 4:
            raise ValueError("need at least 4 frames")
        if not 0.0 <= self.leakage <= 1.0:
            raise ValueError("leakage must lie in [0, 1]")
        n_basis = self.n_semantic_tokens + PROSODY_LIFT_DIM + self.cond_spk_dim
        if n_basis > self.embed_dim:
            raise ValueError(
                f"factor subspaces need {n_basis} dims but embed_dim is {self.embed_dim}"
            )


@dataclass
class SpeakerBank:
    vectors: np.ndarray  # [n_speakers, cond_spk_dim], unit rows
    offsets: np.ndarray  # [n_speakers], already scaled by the leakage strength

    def max_pairwise_cosine(self) -> float:
        gram = self.vectors @ self.vectors.T
        np.fill_diagonal(gram, -np.inf)
        return float(gram.max())


@dataclass
class World:
    config: WorldConfig
    speakers: SpeakerBank
    tokens: np.ndarray  # [embed_dim, n_tokens], unit columns
    mix_prosody: np.ndarray  # [embed_dim, 3]
    mix_speaker: np.ndarray  # [embed_dim, cond_spk_dim]
    prosody_encoder: np.ndarray  # [cond_pro_dim]
    basis: np.ndarray = field(init=False, repr=False)
    basis_pinv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.basis = np.concatenate([self.tokens, self.mix_prosody, self.mix_speaker], axis=1)
        self.basis_pinv = np.linalg.pinv(self.basis)

    @property
    def pool_speakers(self) -> list[int]:
        return list(range(self.config.n_pool_speakers))

    @property
    def eval_speakers(self) -> list[int]:
        return list(range(self.config.n_pool_speakers, self.config.n_speakers))


@dataclass
class ToyUtterance:
    x0: np.ndarray  # [embed_dim, L]
    c_sem: np.ndarray  # [embed_dim, L]
    prosody: np.ndarray  # [1, L]
    c_pro: np.ndarray  # [cond_pro_dim, L]
    speaker_id: int
    c_spk: np.ndarray  # [cond_spk_dim, L], constant over frames
    token_ids: np.ndarray  # [L]


def _unit_columns(rng: np.random.Generator, dim: int, n: int) -> np.ndarray:
    m = rng.standard_normal((dim, n))
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def _separated_unit_vectors(rng, n: int, dim: int, max_cos: float, max_tries: int = 100_000) -> np.ndarray:
    vectors: list[np.ndarray] = []
    for _ in range(max_tries):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ u) < max_cos for u in vectors):
            vectors.append(v)
            if len(vectors) == n:
                return np.stack(vectors)
    raise ValueError(f"could not place {n} speaker vectors in {dim} dims with cosine < {max_cos}")


def generate_world(cfg: WorldConfig) -> World:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0x574F524C44])
    vectors = _separated_unit_vectors(rng, cfg.n_speakers, cfg.cond_spk_dim, cfg.max_speaker_cosine)
    offsets = cfg.leakage * cfg.offset_std * rng.standard_normal(cfg.n_speakers)
    d = cfg.embed_dim
    tokens = _unit_columns(rng, d, cfg.n_semantic_tokens)
    # prosody and speaker directions: orthonormal, inside the complement of the token span
    token_basis, _ = np.linalg.qr(tokens)
    raw = rng.standard_normal((d, PROSODY_LIFT_DIM + cfg.cond_spk_dim))
    raw -= token_basis @ (token_basis.T @ raw)
    acoustic, _ = np.linalg.qr(raw)
    mix_prosody = acoustic[:, :PROSODY_LIFT_DIM]
    mix_speaker = acoustic[:, PROSODY_LIFT_DIM:]
    encoder = rng.standard_normal(cfg.cond_pro_dim)
    encoder /= np.linalg.norm(encoder)
    world = World(
        config=cfg,
        speakers=SpeakerBank(vectors=vectors, offsets=offsets),
        tokens=tokens,
        mix_prosody=mix_prosody,
        mix_speaker=mix_speaker,
        prosody_encoder=encoder,
    )
    cond = np.linalg.cond(world.basis)
    if not np.isfinite(cond) or cond > MAX_CONDITION_NUMBER:
        raise ValueError(f"ill-conditioned world basis (condition number {cond:.3g}); try another seed")
    return world


def prosody_lift(p: np.ndarray) -> np.ndarray:
    """Frame-wise feature lift ``[p, p^2, sin p]`` of a ``[L]`` or ``[1, L]`` trajectory."""
    p = np.asarray(p).reshape(-1)
    return np.stack([p, p * p, np.sin(p)])


def encode_prosody(world: World, prosody: np.ndarray, speaker_id: int) -> np.ndarray:
    """Prosody condition: linear code of ``p`` with ``1 - leakage`` of the speaker mean removed."""
    p = np.asarray(prosody).reshape(-1)
    normalized = p - (1.0 - world.config.leakage) * world.speakers.offsets[speaker_id]
    return np.outer(world.prosody_encoder, normalized)


def speaker_condition(world: World, speaker_id: int, frames: int | None = None) -> np.ndarray:
    frames = world.config.frames if frames is None else frames
    return np.repeat(world.speakers.vectors[speaker_id][:, None], frames, axis=1)


def content_prosody(rng: np.random.Generator, frames: int) -> np.ndarray:
    """Sum of three random-phase sinusoids."""
    n = np.arange(frames) / frames
    amp = rng.uniform(0.3, 0.8, size=3)
    cycles = rng.uniform(0.5, 4.0, size=3)
    phase = rng.uniform(0.0, 2 * np.pi, size=3)
    return np.sum(amp[:, None] * np.sin(2 * np.pi * cycles[:, None] * n[None, :] + phase[:, None]), axis=0)


def semantic_sequence(world: World, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-constant token sequence with 8 segments of roughly equal length."""
    frames = world.config.frames
    n_seg = min(8, frames)
    base = np.linspace(0, frames, n_seg + 1)
    jitter = max(0, frames // (4 * n_seg))
    cuts = base[1:-1] + rng.integers(-jitter, jitter + 1, size=n_seg - 1)
    cuts = np.clip(np.round(cuts).astype(int), 1, frames - 1)
    cuts = np.unique(cuts)
    ids = rng.integers(0, world.config.n_semantic_tokens, size=len(cuts) + 1)
    token_ids = np.repeat(ids, np.diff(np.concatenate([[0], cuts, [frames]])))
    return world.tokens[:, token_ids], token_ids


def assemble(world: World, c_sem: np.ndarray, prosody: np.ndarray, speaker_vec: np.ndarray, noise=None) -> np.ndarray:
    x0 = c_sem + world.mix_prosody @ prosody_lift(prosody) + (world.mix_speaker @ speaker_vec)[:, None]
    if noise is not None:
        x0 = x0 + noise
    return x0


def generate_utterance(world: World, speaker_id: int, rng: np.random.Generator) -> ToyUtterance:
    cfg = world.config
    if not 0 <= speaker_id < cfg.n_speakers:
        raise ValueError(f"unknown speaker {speaker_id}")
    p = content_prosody(rng, cfg.frames) + world.speakers.offsets[speaker_id]
    c_sem, token_ids = semantic_sequence(world, rng)
    noise = cfg.residual_noise_std * rng.standard_normal((cfg.embed_dim, cfg.frames))
    s = world.speakers.vectors[speaker_id]
    return ToyUtterance(
        x0=assemble(world, c_sem, p, s, noise),
        c_sem=c_sem,
        prosody=p[None, :],
        c_pro=encode_prosody(world, p, speaker_id),
        speaker_id=speaker_id,
        c_spk=speaker_condition(world, speaker_id),
        token_ids=token_ids,
    )


def utterance_rng(world: World, speaker_id: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([world.config.seed, stream, speaker_id, index])


def speaker_utterances(world: World, speaker_id: int, count: int, stream: int = 0, start: int = 0) -> list[ToyUtterance]:
    return [
        generate_utterance(world, speaker_id, utterance_rng(world, speaker_id, start + i, stream))
        for i in range(count)
    ]


def project_factors(world: World, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least-squares split of ``x`` into (semantic part, prosody estimate, speaker estimate).

    The prosody estimate is the first lift coordinate per frame; the speaker
    estimate is the frame-average speaker coefficient, which equals the
    least-squares fit with one speaker vector shared by every frame.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2] != world.config.embed_dim:
        raise ValueError(f"expected {world.config.embed_dim} channels, got shape {x.shape}")
    coef = world.basis_pinv @ x  # [n_basis, L] (or batched)
    n_tok = world.config.n_semantic_tokens
    semantic = world.tokens @ coef[..., :n_tok, :]
    p_hat = coef[..., n_tok, :]
    s_hat = coef[..., n_tok + PROSODY_LIFT_DIM :, :].mean(axis=-1)
    return semantic, p_hat, s_hat


def dump_utterances(path: str | Path, utterances: list[ToyUtterance], seeds: list[int] | None = None, prefix: str = "utt") -> Path:
    """Write one little-endian f32 file per utterance plus an ``index.jsonl``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, utt in enumerate(utterances):
        uid = f"{prefix}{i:05d}"
        utt.x0.astype("<f4").tofile(path / f"{uid}.f32")
        record = {"utterance_id": uid, "speaker_id": int(utt.speaker_id), "shape": list(utt.x0.shape)}
        if seeds is not None:
            record["seed"] = int(seeds[i])
        lines.append(json.dumps(record, sort_keys=True))
    index = path / "index.jsonl"
    index.write_text("\n".join(lines) + "\n")
    return index


def dump_arrays(path: str | Path, arrays: list[np.ndarray], records: list[dict]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = []
    for arr, rec in zip(arrays, records):
        np.asarray(arr).astype("<f4").tofile(path / f"{rec['utterance_id']}.f32")
        lines.append(json.dumps({**rec, "shape": list(np.shape(arr))}, sort_keys=True))
    index = path / "index.jsonl"
    index.write_text("\n".join(lines) + "\n")
    return index


def load_dump(path: str | Path) -> tuple[list[dict], list[np.ndarray]]:
    path = Path(path)
    records = [json.loads(line) for line in (path / "index.jsonl").read_text().splitlines() if line.strip()]
    arrays = [
        np.fromfile(path / f"{r['utterance_id']}.f32", dtype="<f4").astype(np.float64).reshape(r["shape"])
        for r in records
    ]
    return records, arrays


def config_dict(cfg: WorldConfig) -> dict:
    return asdict(cfg)
