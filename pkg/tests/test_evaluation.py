import csv
import dataclasses
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfganon.backbone import BackboneConfig, DenoiserModel
from cfganon.evaluation import (
    METRICS_HEADER,
    Attacker,
    average_ranks,
    build_trials,
    compute_eer,
    content_utility,
    enrollment_set,
    evaluation_sources,
    lazy_attack_eer,
    prosody_utility,
    speaker_attack,
    spearman,
    sweep_tradeoff,
    write_metrics_csv,
    write_report_json,
    write_tradeoff_csv,
)
from cfganon.schedule import make_linear_schedule
from cfganon.world import WorldConfig, assemble, generate_world, project_factors
from oracles import eer_bruteforce, least_squares_normal_equations, ranks_bruteforce, spearman_bruteforce


# EER -------------------------------------------------------------------------


def test_eer_perfect_separation():
    assert compute_eer([(0.9, True), (0.8, True), (0.1, False), (0.2, False)]) == 0.0


def test_eer_identical_scores_coin_flip_labels():
    rng = np.random.default_rng(0)
    labels = rng.random(1000) < 0.5
    assert compute_eer([(0.3, bool(l)) for l in labels]) == pytest.approx(50.0)


def test_eer_six_point_matches_bruteforce():
    scores = [(0.8, True), (0.6, True), (0.3, True), (0.7, False), (0.2, False), (0.1, False)]
    oracle = eer_bruteforce(scores)
    assert oracle == pytest.approx(100 / 3)
    assert compute_eer(scores) == pytest.approx(oracle, abs=1e-9)


def test_eer_interpolates_between_operating_points():
    # thresholds 0.5 and 0.6 give (FAR, FRR) = (1/2, 1/3) and (0, 1/3): FRR is flat, so the
    # interpolated crossing sits where FAR falls to 1/3
    scores = [(0.9, True), (0.6, True), (0.3, True), (0.5, False), (0.1, False)]
    assert compute_eer(scores) == pytest.approx(100 / 3)


def test_eer_needs_both_classes():
    with pytest.raises(ValueError):
        compute_eer([(0.1, True), (0.2, True)])
    with pytest.raises(ValueError):
        compute_eer([(0.1, False)])


def test_eer_folded_to_at_most_fifty():
    # a perfectly inverted scorer reports 0 after folding, like a perfect one
    assert compute_eer([(0.1, True), (0.2, True), (0.8, False), (0.9, False)]) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.booleans()), min_size=2, max_size=40))
def test_eer_symmetry_under_negation_and_label_flip(pairs):
    if len({l for _, l in pairs}) < 2:
        return
    scores = [(float(s), l) for s, l in pairs]
    flipped = [(-s, not l) for s, l in scores]
    assert compute_eer(flipped) == pytest.approx(compute_eer(scores), abs=1e-9)
    assert 0.0 <= compute_eer(scores) <= 50.0


# Spearman ------------------------------------------------------------------


def test_average_ranks_with_ties():
    assert average_ranks([10, 20, 20, 5]).tolist() == [2.0, 3.5, 3.5, 1.0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=3, max_size=30))
def test_spearman_matches_rank_then_pearson(pairs):
    a, b = [p[0] for p in pairs], [p[1] for p in pairs]
    assert average_ranks(a).tolist() == ranks_bruteforce(a)
    if len(set(a)) < 2 or len(set(b)) < 2:
        assert np.isnan(spearman(a, b))
        return
    assert abs(spearman(a, b) - spearman_bruteforce(a, b)) <= 1e-12


def test_spearman_random_float_vectors():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = np.round(rng.standard_normal(25), 1)
        b = np.round(rng.standard_normal(25), 1)
        assert abs(spearman(a, b) - spearman_bruteforce(a, b)) <= 1e-12


# attacker and utility --------------------------------------------------------


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(seed=21))


@pytest.fixture(scope="module")
def sources(world):
    return evaluation_sources(world, 80, seed=0)


@pytest.fixture(scope="module")
def enroll(world):
    return enrollment_set(world)


def test_sources_and_enrollment_are_disjoint(sources, enroll, world):
    assert {u.speaker_id for u in sources} == set(world.eval_speakers)
    enrolled = {u.x0.tobytes() for u in enroll}
    assert not any(u.x0.tobytes() in enrolled for u in sources)


def test_identity_anonymizer_is_recognized(world, sources, enroll):
    assert lazy_attack_eer(world, sources, [u.x0 for u in sources], enroll) < 5.0


def test_pure_noise_is_chance(world, sources, enroll):
    rng = np.random.default_rng(2)
    noise = [rng.standard_normal(u.x0.shape) for u in sources]
    assert abs(lazy_attack_eer(world, sources, noise, enroll) - 50.0) <= 5.0


def replace_speaker(world, utts, vec):
    return [assemble(world, u.c_sem, u.prosody, vec) for u in utts]


def test_fixed_pool_vector_without_leakage_is_chance():
    w = generate_world(WorldConfig(seed=21, leakage=0.0, residual_noise_std=0.0))
    src, enr = evaluation_sources(w, 80, seed=0), enrollment_set(w)
    fixed = w.speakers.vectors[w.pool_speakers[0]]
    outputs = replace_speaker(w, src, fixed)
    s_hats = np.array([project_factors(w, x)[2] for x in outputs])
    assert np.max(np.abs(s_hats - fixed)) < 1e-8
    assert abs(lazy_attack_eer(w, src, outputs, enr) - 50.0) <= 5.0


def test_fixed_pool_vector_with_leakage_still_leaks():
    # the pitch level keeps identifying speakers when prosody carries identity
    w = generate_world(WorldConfig(seed=21, leakage=0.5, residual_noise_std=0.0))
    src, enr = evaluation_sources(w, 80, seed=0), enrollment_set(w)
    outputs = replace_speaker(w, src, w.speakers.vectors[w.pool_speakers[0]])
    assert lazy_attack_eer(w, src, outputs, enr) < 45.0


def test_speaker_attack_needs_two_speakers(world, sources):
    with pytest.raises(ValueError):
        speaker_attack(world, {0: [sources[0].x0]}, [sources[1].x0], [sources[1].speaker_id], Attacker())


def test_attacker_embedding_layout(world, enroll):
    att = Attacker(prosody_weight=2.0).fit(world, [u.x0 for u in enroll])
    emb = att.embed(world, enroll[0].x0)
    _, p_hat, s_hat = project_factors(world, enroll[0].x0)
    assert emb.shape == (world.config.cond_spk_dim + 1,)
    np.testing.assert_array_equal(emb[:-1], s_hat)
    assert emb[-1] == pytest.approx(2.0 * (p_hat.mean() - att.pitch_mean) / att.pitch_scale)


def test_trials_capped_and_seeded():
    trials = build_trials(list(range(8)) * 50, list(range(8)), seed=3, max_trials=2000)
    assert len(trials.pairs) == 2000
    assert trials.pairs == build_trials(list(range(8)) * 50, list(range(8)), seed=3).pairs
    small = build_trials([0, 1, 1], [0, 1], seed=0)
    assert small.pairs == [(0, 0, True), (0, 1, False), (1, 0, False), (1, 1, True), (2, 0, False), (2, 1, True)]
    assert small.n_target == 3


def synth(world, utt, p):
    return assemble(world, utt.c_sem, p, world.speakers.vectors[utt.speaker_id])


def test_prosody_utility_examples(world, sources):
    some = sources[:6]
    same = [synth(world, u, u.prosody) for u in some]
    neg = [synth(world, u, -u.prosody) for u in some]
    cube = [synth(world, u, u.prosody**3) for u in some]
    assert prosody_utility(some, same, world) == (pytest.approx(1.0), 0)
    assert prosody_utility(some, neg, world)[0] == pytest.approx(-1.0)
    assert prosody_utility(some, cube, world)[0] == pytest.approx(1.0)


def test_prosody_utility_skips_constant(world, sources):
    flat_source = dataclasses.replace(sources[0], prosody=np.full((1, 64), 0.3))
    outputs = [synth(world, sources[0], sources[0].prosody), synth(world, sources[1], sources[1].prosody)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rho, skipped = prosody_utility([flat_source, sources[1]], outputs, world)
    assert skipped == 1 and rho == pytest.approx(1.0)
    assert any("skipped" in str(w.message) for w in caught)
    with pytest.raises(ValueError):
        prosody_utility(sources[:2], outputs[:1], world)


def test_content_utility_examples(world, sources):
    some = sources[:5]
    clean = [synth(world, u, u.prosody) for u in some]
    assert content_utility(some, clean, world) < 1e-20
    zeros = [np.zeros_like(u.x0) for u in some]
    want = np.mean([np.sum(u.c_sem**2) / u.c_sem.size for u in some])
    assert content_utility(some, zeros, world) == pytest.approx(want, rel=1e-12)


def test_content_utility_vs_least_squares_oracle(world, sources):
    u = sources[0]
    x = np.random.default_rng(4).standard_normal(u.x0.shape)
    n_tok = world.config.n_semantic_tokens
    frames = [world.tokens @ least_squares_normal_equations(world.basis, x[:, j])[:n_tok] for j in range(x.shape[1])]
    oracle = np.mean((np.stack(frames, axis=1) - u.c_sem) ** 2)
    assert content_utility([u], [x], world) == pytest.approx(oracle, rel=1e-8)


# sweep plumbing on an untrained miniature model --------------------------------


MINI_WORLD = WorldConfig(n_speakers=4, n_pool_speakers=2, n_semantic_tokens=4, frames=16, embed_dim=16, cond_pro_dim=4, cond_spk_dim=4, seed=5)
MINI_NET = BackboneConfig(n_blocks=1, kernel=3, channels=16, embed_dim=16, cond_pro_dim=4, cond_spk_dim=4, t_embed_dim=8)


@pytest.fixture(scope="module")
def mini():
    w = generate_world(MINI_WORLD)
    rng = np.random.default_rng(0)
    model = DenoiserModel(MINI_NET, rng)
    for p in model.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    return model, w, make_linear_schedule(20)


def test_single_weight_single_report(mini):
    model, w, sched = mini
    reports = sweep_tradeoff(model, w, sched, weights=[0.5], n_utt=6, seed=1, n_infer_steps=4, extra_points=False)
    assert len(reports) == 1 and reports[0].spec["w_pro"] == 0.5 and reports[0].n_utt == 6


def test_sweep_rows_and_determinism(mini, tmp_path):
    model, w, sched = mini
    run = lambda threads: sweep_tradeoff(model, w, sched, weights=[1.0, 0.0], n_utt=6, seed=2, n_infer_steps=4, threads=threads)  # noqa: E731
    a, b, c = run(1), run(1), run(2)
    assert len(a) == 2 + 4
    assert [r.row() for r in a] == [r.row() for r in b] == [r.row() for r in c]
    for r in a:
        assert 0.0 <= r.eer <= 50.0 and 0.0 <= r.eer_semi <= 50.0 and -1.0 <= r.prosody_corr <= 1.0

    write_metrics_csv(tmp_path / "m.csv", a)
    write_tradeoff_csv(tmp_path / "t.csv", a)
    write_report_json(tmp_path / "r.json", a)
    with open(tmp_path / "m.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    assert reader.fieldnames == METRICS_HEADER
    assert [r["mode"] for r in rows][:2] == ["prosody-cfg:w_pro=1", "prosody-cfg:w_pro=0"]
    assert float(rows[0]["eer"]) == a[0].eer
    trade = (tmp_path / "t.csv").read_text().splitlines()
    assert trade[0] == "prosody_corr,eer" and len(trade) == 3
    assert float(trade[1].split(",")[1]) == a[0].eer
    data = json.loads((tmp_path / "r.json").read_text())
    assert set(data[0]) >= {"eer", "prosody_corr", "content_err", "spec", "n_utt", "seed"}
