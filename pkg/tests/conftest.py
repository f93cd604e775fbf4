import time
from dataclasses import dataclass

import numpy as np
import pytest

from cfganon.backbone import DenoiserModel
from cfganon.config import RunConfig, load_config
from cfganon.evaluation import MetricsReport, sweep_tradeoff
from cfganon.training import TrainResult, train_loop
from cfganon.world import World, generate_world

_VERDICTS_KEY = pytest.StashKey[dict]()


@dataclass
class Headline:
    """The default toy run: the same model and sweep that ``cfganon train`` then ``cfganon sweep`` produce."""

    config: RunConfig
    world: World
    model: DenoiserModel
    training: TrainResult
    train_seconds: float
    reports: list[MetricsReport]


@pytest.fixture(scope="session")
def headline() -> Headline:
    cfg = load_config(None, 0)
    world = generate_world(cfg.world)
    model = DenoiserModel(cfg.backbone, np.random.default_rng(cfg.init_seed))
    start = time.perf_counter()
    result = train_loop(cfg.train, world, model)
    elapsed = time.perf_counter() - start
    reports = sweep_tradeoff(
        model,
        world,
        cfg.train.schedule(),
        weights=cfg.eval.weights,
        n_utt=cfg.eval.n_utt,
        seed=cfg.eval_seed,
        n_infer_steps=cfg.eval.n_infer_steps,
        attacker_prosody_weight=cfg.eval.attacker_prosody_weight,
    )
    return Headline(cfg, world, model, result, elapsed, reports)


@pytest.fixture(scope="session")
def verdict(pytestconfig):
    """Record a PASS/FAIL line for a numbered criterion, print it, and return the flag."""
    store = pytestconfig.stash.setdefault(_VERDICTS_KEY, {})

    def record(criterion: int, ok: bool, detail: str) -> bool:
        prev = store.get(criterion)
        ok = bool(ok) and (prev is None or prev[0])
        text = detail if prev is None else f"{prev[1]}; {detail}"
        store[criterion] = (ok, text)
        print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(store):
        ok, text = store[criterion]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {text}")
