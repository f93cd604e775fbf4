"""Fast built-in oracle checks behind ``cfganon selftest``."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, ConditionBundle, DenoiserModel, predict_x0
from .evaluation import compute_eer, spearman
from .guidance import cfg_prosody, cfg_speaker
from .schedule import ddim_step, ddim_timestep_grid, forward_noise, make_linear_schedule
from .training import DropPattern, sample_drop_pattern


def _perturb_model(model: DenoiserModel, rng) -> None:
    for p in model.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)


def check_conv_oracle() -> bool:
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 7)), rng.standard_normal((3, 2, 3)), rng.standard_normal(3)
    got = T.conv1d(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1)))
    want = np.array([[b[o] + sum(w[o, c, k] * xp[c, i + k] for c in range(2) for k in range(3)) for i in range(7)] for o in range(3)])
    return np.allclose(got, want, atol=1e-12)


def check_gradients() -> bool:
    rng = np.random.default_rng(2)
    model = DenoiserModel(BackboneConfig(n_blocks=2, channels=8, embed_dim=8, cond_pro_dim=3, cond_spk_dim=2, t_embed_dim=8), rng)
    _perturb_model(model, rng)
    x = rng.standard_normal((8, 6))
    conds = ConditionBundle(rng.standard_normal((8, 6)), rng.standard_normal((3, 6)), rng.standard_normal((2, 6)))
    target = rng.standard_normal((8, 6))

    def loss_value():
        with T.no_grad():
            return float(T.mse_loss(predict_x0(model, x, 5, conds), target).data)

    loss = T.mse_loss(predict_x0(model, x, 5, conds), target)
    loss.backward()
    worst = 0.0
    h = 1e-5
    for name in ("in_w", "pro_w", "b0.conv_w", "out_w"):
        p = model.params[name]
        flat = p.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = loss_value()
            flat[idx] = old - h
            down = loss_value()
            flat[idx] = old
            fd = (up - down) / (2 * h)
            ad = p.grad.reshape(-1)[idx]
            worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), 1e-6))
    return worst <= 1e-4


def check_ddim_consistency() -> bool:
    sched = make_linear_schedule(200)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 10))
    x = forward_noise(x0, 200, rng.standard_normal(x0.shape), sched).x_t
    for t, t_prev in ddim_timestep_grid(200, 20):
        x = ddim_step(x, t, t_prev, x0, sched)
    return float(np.max(np.abs(x - x0))) <= 1e-8


def check_cfg_identities() -> bool:
    rng = np.random.default_rng(4)
    model = DenoiserModel(BackboneConfig(n_blocks=1, channels=4, embed_dim=4, cond_pro_dim=2, cond_spk_dim=2, t_embed_dim=4), rng)
    _perturb_model(model, rng)
    x, c_sem = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    c_pro, psi = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    with T.no_grad():
        full = predict_x0(model, x, 3, ConditionBundle(c_sem, c_pro, psi)).data
        no_pro = predict_x0(model, x, 3, ConditionBundle(c_sem, None, psi)).data
    return (
        np.array_equal(cfg_prosody(model, x, 3, c_sem, c_pro, psi, 1.0), full)
        and np.array_equal(cfg_prosody(model, x, 3, c_sem, c_pro, psi, 0.0), no_pro)
        and np.array_equal(cfg_speaker(model, x, 3, c_sem, psi, 0.0), no_pro)
    )


def check_drop_law() -> bool:
    rng = np.random.default_rng(5)
    n = 100_000
    counts = np.bincount([int(sample_drop_pattern(rng)) for _ in range(n)], minlength=3)
    freq = 100.0 * counts / n
    return bool(np.all(np.abs(freq - [50, 30, 20]) <= 1.0)) and set(DropPattern) == {
        DropPattern.ALL,
        DropPattern.DROP_PRO,
        DropPattern.DROP_PRO_SPK,
    }


def check_metrics() -> bool:
    scores = [(0.8, True), (0.6, True), (0.3, True), (0.7, False), (0.2, False), (0.1, False)]
    return abs(compute_eer(scores) - 100 / 3) < 1e-9 and abs(spearman([1, 2, 3], [1, 8, 27]) - 1.0) < 1e-12


CHECKS = {
    "conv1d matches nested-loop oracle": check_conv_oracle,
    "backbone gradients match finite differences": check_gradients,
    "DDIM with oracle x0 recovers x0": check_ddim_consistency,
    "CFG end-point identities are exact": check_cfg_identities,
    "drop schedule frequencies 50/30/20": check_drop_law,
    "EER and Spearman oracles": check_metrics,
}


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        passed = bool(fn())
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok
