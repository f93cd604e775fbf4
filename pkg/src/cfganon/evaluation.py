"""Privacy and utility metrics, and the guidance-weight sweep."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import DenoiserModel
from .guidance import GuidanceMode, GuidanceSpec, PseudoSpeakerPool, anonymize, sample_pseudo_speaker
from .schedule import NoiseSchedule
from .world import ToyUtterance, World, project_factors, speaker_utterances

log = logging.getLogger(__name__)

MAX_TRIALS = 2000
METRICS_HEADER = ["w_pro", "w_spk", "mode", "eer", "eer_semi", "prosody_corr", "content_err", "n_utt", "seed"]
SWEEP_WEIGHTS = (1.0, 0.8, 0.5, 0.2, 0.0)
SOURCE_STREAM = 1
ENROLL_STREAM = 2
# pitch level enters the attacker embedding at twice the weight of one timbre axis
ATTACKER_PROSODY_WEIGHT = 2.0


# generic statistics ----------------------------------------------------------


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Spearman rank correlation; NaN when either input is constant."""
    ra, rb = average_ranks(a), average_ranks(b)
    if len(ra) != len(rb):
        raise ValueError("spearman inputs differ in length")
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if denom == 0:
        return float("nan")
    return float(np.sum(ra * rb) / denom)


def compute_eer(scores: list[tuple[float, bool]]) -> float:
    """Equal error rate in percent, folded into [0, 50].

    FAR and FRR are evaluated at every distinct score used as an acceptance
    threshold (accept when ``score >= threshold``) plus one threshold above the
    maximum; the crossing is found by linear interpolation between adjacent
    operating points.
    """
    s = np.asarray([x for x, _ in scores], dtype=np.float64)
    y = np.asarray([bool(l) for _, l in scores])
    n_tar, n_non = int(y.sum()), int((~y).sum())
    if n_tar == 0 or n_non == 0:
        raise ValueError("EER needs both target and non-target trials")
    thresholds = np.concatenate([np.unique(s), [np.inf]])
    tar, non = np.sort(s[y]), np.sort(s[~y])
    frr = np.searchsorted(tar, thresholds, side="left") / n_tar
    far = 1.0 - np.searchsorted(non, thresholds, side="left") / n_non
    d = far - frr  # non-increasing in threshold
    idx = np.flatnonzero(d <= 0)[0]
    if d[idx] == 0 or idx == 0:
        eer = far[idx] if d[idx] == 0 else 0.5 * (far[idx] + frr[idx])
    else:
        alpha = d[idx - 1] / (d[idx - 1] - d[idx])
        eer = far[idx - 1] + alpha * (far[idx] - far[idx - 1])
    eer = 100.0 * float(eer)
    return min(eer, 100.0 - eer)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return np.sum(a * b, axis=-1) / np.maximum(na * nb, 1e-300)


# attacker ------------------------------------------------------------------


@dataclass
class Attacker:
    """Speaker embedding = [timbre estimate, standardized utterance pitch level].

    The pitch-level statistics (mean and scale across speakers) are fitted on
    original enrollment speech, so the attacker knows nothing about the
    anonymizer.
    """

    prosody_weight: float = ATTACKER_PROSODY_WEIGHT
    pitch_mean: float = 0.0
    pitch_scale: float = 1.0

    def fit(self, world: World, originals: list[np.ndarray]) -> "Attacker":
        levels = np.array([project_factors(world, x)[1].mean() for x in originals])
        self.pitch_mean = float(levels.mean())
        self.pitch_scale = float(levels.std()) or 1.0
        return self

    def embed(self, world: World, x: np.ndarray) -> np.ndarray:
        _, p_hat, s_hat = project_factors(world, x)
        level = (p_hat.mean(axis=-1) - self.pitch_mean) / self.pitch_scale
        return np.concatenate([s_hat, self.prosody_weight * np.asarray(level)[..., None]], axis=-1)


@dataclass
class TrialSet:
    enrollment_speakers: list[int]
    trial_index: list[int]
    trial_speaker: list[int]
    pairs: list[tuple[int, int, bool]]  # (trial index, enrollment speaker, same speaker)

    @property
    def n_target(self) -> int:
        return sum(1 for *_, same in self.pairs if same)


def build_trials(trial_speakers: list[int], enrollment_speakers: list[int], seed: int, max_trials: int = MAX_TRIALS) -> TrialSet:
    pairs = [(i, k, k == spk) for i, spk in enumerate(trial_speakers) for k in enrollment_speakers]
    if len(pairs) > max_trials:
        rng = np.random.default_rng([seed, 0x545249])
        keep = np.sort(rng.choice(len(pairs), size=max_trials, replace=False))
        pairs = [pairs[i] for i in keep]
    return TrialSet(list(enrollment_speakers), list(range(len(trial_speakers))), list(trial_speakers), pairs)


def speaker_attack(
    world: World,
    enrollment: dict[int, list[np.ndarray]],
    trials: list[np.ndarray],
    trial_speakers: list[int],
    attacker: Attacker,
    seed: int = 0,
) -> list[tuple[float, bool]]:
    """Cosine scores of each trial embedding against each enrollment speaker centroid."""
    if len(enrollment) < 2:
        raise ValueError("speaker attack needs at least 2 enrollment speakers")
    speakers = sorted(enrollment)
    centroids = {k: np.mean([attacker.embed(world, x) for x in enrollment[k]], axis=0) for k in speakers}
    emb = [attacker.embed(world, x) for x in trials]
    ts = build_trials(trial_speakers, speakers, seed)
    return [(float(cosine(emb[i], centroids[k])), same) for i, k, same in ts.pairs]


def lazy_attack_eer(world, originals: list[ToyUtterance], anonymized: list[np.ndarray], enroll: list[ToyUtterance], attacker: Attacker | None = None, seed: int = 0) -> float:
    attacker = attacker or Attacker().fit(world, [u.x0 for u in enroll])
    enrollment: dict[int, list[np.ndarray]] = {}
    for u in enroll:
        enrollment.setdefault(u.speaker_id, []).append(u.x0)
    scores = speaker_attack(world, enrollment, anonymized, [u.speaker_id for u in originals], attacker, seed)
    return compute_eer(scores)


# utility -------------------------------------------------------------------


def prosody_utility(originals: list[ToyUtterance], anonymized: list[np.ndarray], world: World) -> tuple[float, int]:
    """Mean per-utterance Spearman correlation of source and recovered prosody; also the skip count."""
    if len(originals) != len(anonymized):
        raise ValueError("originals and anonymized outputs are not aligned")
    rhos, skipped = [], 0
    for u, x in zip(originals, anonymized):
        rho = spearman(u.prosody.reshape(-1), project_factors(world, x)[1])
        if np.isnan(rho):
            skipped += 1
            continue
        rhos.append(rho)
    if skipped:
        warnings.warn(f"{skipped} utterance(s) with constant prosody skipped", stacklevel=2)
    return (float(np.mean(rhos)) if rhos else float("nan")), skipped


def content_utility(originals: list[ToyUtterance], anonymized: list[np.ndarray], world: World) -> float:
    """Mean-square error between the semantic projection of each output and its source c_sem."""
    if len(originals) != len(anonymized):
        raise ValueError("originals and anonymized outputs are not aligned")
    errs = [np.mean((project_factors(world, x)[0] - u.c_sem) ** 2) for u, x in zip(originals, anonymized)]
    return float(np.mean(errs))


# sweep ---------------------------------------------------------------------


@dataclass
class MetricsReport:
    eer: float
    eer_semi: float
    prosody_corr: float
    content_err: float
    spec: dict
    n_utt: int
    seed: int
    prosody_skipped: int = 0

    def row(self) -> dict:
        mode = self.spec["mode"]
        return {
            "w_pro": self.spec["w_pro"] if mode == GuidanceMode.PROSODY_CFG.value else "",
            "w_spk": self.spec["w_spk"] if mode == GuidanceMode.SPEAKER_CFG.value else "",
            "mode": self.spec["label"],
            "eer": self.eer,
            "eer_semi": self.eer_semi,
            "prosody_corr": self.prosody_corr,
            "content_err": self.content_err,
            "n_utt": self.n_utt,
            "seed": self.seed,
        }


def spec_dict(spec: GuidanceSpec) -> dict:
    d = asdict(spec)
    d["mode"] = spec.mode.value
    d["label"] = spec.label()
    if d["prosody_shift"] is not None:
        d["prosody_shift"] = np.asarray(d["prosody_shift"]).tolist()
    return d


def evaluation_sources(world: World, n_utt: int, seed: int) -> list[ToyUtterance]:
    speakers = world.eval_speakers
    per = -(-n_utt // len(speakers))
    by_spk = {k: speaker_utterances(world, k, per, stream=SOURCE_STREAM + 16 * seed) for k in speakers}
    return [by_spk[speakers[i % len(speakers)]][i // len(speakers)] for i in range(n_utt)]


def enrollment_set(world: World, per_speaker: int = 5) -> list[ToyUtterance]:
    return [u for k in world.eval_speakers for u in speaker_utterances(world, k, per_speaker, stream=ENROLL_STREAM)]


def pool_for_world(world: World) -> PseudoSpeakerPool:
    from .guidance import pool_from_utterances

    utts = [u for k in world.pool_speakers for u in speaker_utterances(world, k, 4, stream=3)]
    return pool_from_utterances(utts)


def draw_randomness(world: World, n: int, seed: int, pool: PseudoSpeakerPool, stream: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-utterance pseudo-speaker and initial noise, independent of the operating point."""
    psis, noise = [], []
    shape = (world.config.embed_dim, world.config.frames)
    for i in range(n):
        rng = np.random.default_rng([seed, stream, i])
        psis.append(sample_pseudo_speaker(pool, rng)[1])
        noise.append(rng.standard_normal(shape))
    return np.stack(psis), np.stack(noise)


@dataclass
class SweepContext:
    model: DenoiserModel
    world: World
    sched: NoiseSchedule
    n_utt: int
    seed: int
    n_infer_steps: int = 50
    enroll_per_speaker: int = 5
    attacker_prosody_weight: float = ATTACKER_PROSODY_WEIGHT
    sources: list[ToyUtterance] = field(init=False)
    enroll: list[ToyUtterance] = field(init=False)
    pool: PseudoSpeakerPool = field(init=False)
    attacker: Attacker = field(init=False)

    def __post_init__(self):
        self.sources = evaluation_sources(self.world, self.n_utt, self.seed)
        self.enroll = enrollment_set(self.world, self.enroll_per_speaker)
        self.pool = pool_for_world(self.world)
        self.attacker = Attacker(self.attacker_prosody_weight).fit(self.world, [u.x0 for u in self.enroll])
        self.psi, self.noise = draw_randomness(self.world, self.n_utt, self.seed, self.pool, stream=0)
        self.enroll_psi, self.enroll_noise = draw_randomness(self.world, len(self.enroll), self.seed, self.pool, stream=1)

    def evaluate(self, spec: GuidanceSpec) -> MetricsReport:
        outputs = list(anonymize(self.model, self.sched, spec, self.sources, self.psi, self.noise))
        lazy = {}
        for u in self.enroll:
            lazy.setdefault(u.speaker_id, []).append(u.x0)
        speakers = [u.speaker_id for u in self.sources]
        eer = compute_eer(speaker_attack(self.world, lazy, outputs, speakers, self.attacker, self.seed))
        anon_enroll = anonymize(self.model, self.sched, spec, self.enroll, self.enroll_psi, self.enroll_noise)
        semi = {}
        for u, x in zip(self.enroll, anon_enroll):
            semi.setdefault(u.speaker_id, []).append(x)
        eer_semi = compute_eer(speaker_attack(self.world, semi, outputs, speakers, self.attacker, self.seed))
        corr, skipped = prosody_utility(self.sources, outputs, self.world)
        return MetricsReport(
            eer=eer,
            eer_semi=eer_semi,
            prosody_corr=corr,
            content_err=content_utility(self.sources, outputs, self.world),
            spec=spec_dict(spec),
            n_utt=self.n_utt,
            seed=self.seed,
            prosody_skipped=skipped,
        )


def sweep_specs(weights, n_infer_steps: int, shift: float) -> list[GuidanceSpec]:
    specs = [GuidanceSpec(GuidanceMode.PROSODY_CFG, w_pro=float(w), n_infer_steps=n_infer_steps) for w in weights]
    specs += [
        GuidanceSpec(GuidanceMode.PLAIN, use_prosody=False, use_pseudo_speaker=True, n_infer_steps=n_infer_steps),
        GuidanceSpec(GuidanceMode.PLAIN, use_prosody=False, use_pseudo_speaker=False, n_infer_steps=n_infer_steps),
        GuidanceSpec(GuidanceMode.SPEAKER_CFG, w_spk=3.0, n_infer_steps=n_infer_steps),
        GuidanceSpec(GuidanceMode.PROSODY_CFG, w_pro=1.0, n_infer_steps=n_infer_steps, prosody_shift=shift),
    ]
    return specs


def default_shift(world: World) -> float:
    """One standard deviation of the prosody condition, pooled over channels and frames."""
    utts = [u for k in world.pool_speakers for u in speaker_utterances(world, k, 4, stream=3)]
    return float(np.std(np.stack([u.c_pro for u in utts])))


def sweep_tradeoff(
    model: DenoiserModel,
    world: World,
    sched: NoiseSchedule,
    weights=SWEEP_WEIGHTS,
    n_utt: int = 200,
    seed: int = 0,
    n_infer_steps: int = 50,
    threads: int = 1,
    extra_points: bool = True,
    attacker_prosody_weight: float = ATTACKER_PROSODY_WEIGHT,
) -> list[MetricsReport]:
    ctx = SweepContext(model, world, sched, n_utt, seed, n_infer_steps, attacker_prosody_weight=attacker_prosody_weight)
    specs = sweep_specs(weights, n_infer_steps, default_shift(world))
    if not extra_points:
        specs = specs[: len(weights)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(ctx.evaluate, specs))
    reports = []
    for spec in specs:
        reports.append(ctx.evaluate(spec))
        log.info("%s eer=%.2f rho=%.3f", spec.label(), reports[-1].eer, reports[-1].prosody_corr)
    return reports


def write_metrics_csv(path: str | Path, reports: list[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for r in reports:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})


def write_tradeoff_csv(path: str | Path, reports: list[MetricsReport]) -> None:
    """Two columns (prosody_corr, eer) for the prosody-guidance points, ordered by w_pro descending."""
    pts = [r for r in reports if r.spec["mode"] == GuidanceMode.PROSODY_CFG.value and r.spec["prosody_shift"] is None]
    pts.sort(key=lambda r: -r.spec["w_pro"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prosody_corr", "eer"])
        for r in pts:
            writer.writerow([repr(r.prosody_corr), repr(r.eer)])


def write_report_json(path: str | Path, reports: list[MetricsReport]) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n")
