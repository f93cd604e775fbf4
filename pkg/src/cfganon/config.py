"""Run configuration: INI-style sections, every key optional.

Seeds for each stochastic component are derived from one global seed::

    derive_seed(global_seed, "world") = first 8 bytes (little-endian) of
                                        sha256(b"<global_seed>:world")

with labels ``world``, ``init``, ``train`` and ``eval``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .evaluation import ATTACKER_PROSODY_WEIGHT, SWEEP_WEIGHTS
from .training import DropSchedule, TrainConfig
from .world import WorldConfig

SEED_LABELS = ("world", "init", "train", "eval")


def derive_seed(global_seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class EvalConfig:
    n_infer_steps: int = 50
    n_utt: int = 200
    weights: tuple[float, ...] = SWEEP_WEIGHTS
    attacker_prosody_weight: float = ATTACKER_PROSODY_WEIGHT
    threads: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    world: WorldConfig = field(default_factory=WorldConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> None:
        self.seed = int(seed)
        self.world.seed = derive_seed(self.seed, "world")
        self.train.seed = derive_seed(self.seed, "train")

    @property
    def init_seed(self) -> int:
        return derive_seed(self.seed, "init")

    @property
    def eval_seed(self) -> int:
        return derive_seed(self.seed, "eval")

    def sync_dims(self) -> None:
        self.backbone.embed_dim = self.world.embed_dim
        self.backbone.cond_pro_dim = self.world.cond_pro_dim
        self.backbone.cond_spk_dim = self.world.cond_spk_dim

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "world": dataclasses.asdict(self.world),
            "backbone": self.backbone.to_dict(),
            "train": self.train.to_dict(),
            "eval": {**dataclasses.asdict(self.eval), "weights": list(self.eval.weights)},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RunConfig":
        cfg = cls(seed=rec["seed"])
        cfg.world = WorldConfig(**rec["world"])
        cfg.backbone = BackboneConfig(**rec["backbone"])
        cfg.train = TrainConfig.from_dict(rec["train"])
        ev = dict(rec.get("eval", {}))
        if "weights" in ev:
            ev["weights"] = tuple(ev["weights"])
        cfg.eval = EvalConfig(**ev)
        return cfg


def _coerce(raw: str, current):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(v) for v in raw.replace(",", " ").split())
    return raw.strip()


def _apply_section(obj, section: configparser.SectionProxy, name: str) -> None:
    known = {f.name for f in dataclasses.fields(obj)}
    for key, raw in section.items():
        if key == "drop" and isinstance(obj, TrainConfig):
            obj.drop = DropSchedule(*(float(v) for v in raw.replace(",", " ").split()))
            continue
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{name}]")
        setattr(obj, key, _coerce(raw, getattr(obj, key)))


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    """Read a config file (or take all defaults when ``path`` is None)."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        text = Path(path).read_text()
        parser.read_string(text, source=str(path))
        sections = {"world": cfg.world, "backbone": cfg.backbone, "train": cfg.train, "eval": cfg.eval}
        for name in parser.sections():
            if name == "run":
                run = parser[name]
                if "seed" in run:
                    cfg.seed = int(run["seed"])
                if "out_dir" in run:
                    cfg.out_dir = run["out_dir"]
                for key in run:
                    if key not in ("seed", "out_dir"):
                        raise ValueError(f"unknown key {key!r} in section [run]")
            elif name in sections:
                _apply_section(sections[name], parser[name], name)
            else:
                raise ValueError(f"unknown config section [{name}]")
    if seed is not None:
        cfg.seed = seed
    # explicit seeds inside [world]/[train] are overridden by the global derivation
    cfg.apply_seed(cfg.seed)
    cfg.sync_dims()
    return cfg
