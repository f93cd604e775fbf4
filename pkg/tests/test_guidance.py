import numpy as np
import pytest
from scipy import stats

from cfganon import tensor as T
from cfganon.backbone import BackboneConfig, ConditionBundle, DenoiserModel, predict_x0
from cfganon.guidance import (
    GuidanceError,
    GuidanceMode,
    GuidanceSpec,
    PseudoSpeakerPool,
    anonymize,
    build_pool,
    cfg_prosody,
    cfg_speaker,
    combine,
    pool_from_utterances,
    prosody_mean_shift,
    sample_pseudo_speaker,
)
from cfganon.schedule import make_linear_schedule
from cfganon.world import WorldConfig, generate_world, speaker_utterances

CFG = BackboneConfig(n_blocks=2, kernel=3, channels=8, embed_dim=8, cond_pro_dim=3, cond_spk_dim=3, t_embed_dim=8)


@pytest.fixture(scope="module")
def model():
    rng = np.random.default_rng(0)
    m = DenoiserModel(CFG, rng)
    for p in m.parameters():
        p.data = p.data + 0.2 * rng.standard_normal(p.shape)
    return m


@pytest.fixture(scope="module")
def tensors():
    rng = np.random.default_rng(1)
    return {
        "x": rng.standard_normal((8, 10)),
        "c_sem": rng.standard_normal((8, 10)),
        "c_pro": rng.standard_normal((3, 10)),
        "psi": np.repeat(rng.standard_normal((3, 1)), 10, axis=1),
    }


def pred(model, x, t, c_sem, c_pro, c_spk):
    with T.no_grad():
        return predict_x0(model, x, t, ConditionBundle(c_sem, c_pro, c_spk)).data


def test_prosody_cfg_end_points_bitwise(model, tensors):
    x, c_sem, c_pro, psi = tensors["x"], tensors["c_sem"], tensors["c_pro"], tensors["psi"]
    full = pred(model, x, 12, c_sem, c_pro, psi)
    no_pro = pred(model, x, 12, c_sem, None, psi)
    assert np.array_equal(cfg_prosody(model, x, 12, c_sem, c_pro, psi, 1.0), full)
    assert np.array_equal(cfg_prosody(model, x, 12, c_sem, c_pro, psi, 0.0), no_pro)


def test_prosody_cfg_midpoint(model, tensors):
    x, c_sem, c_pro, psi = tensors["x"], tensors["c_sem"], tensors["c_pro"], tensors["psi"]
    full = pred(model, x, 12, c_sem, c_pro, psi)
    no_pro = pred(model, x, 12, c_sem, None, psi)
    np.testing.assert_allclose(cfg_prosody(model, x, 12, c_sem, c_pro, psi, 0.5), (full + no_pro) / 2, atol=1e-14)


def test_prosody_cfg_is_affine_in_w(model, tensors):
    args = (model, tensors["x"], 30, tensors["c_sem"], tensors["c_pro"], tensors["psi"])
    y0, y1, y2 = (cfg_prosody(*args, w) for w in (0.0, 1.0, 2.0))
    np.testing.assert_allclose(y2 - y1, y1 - y0, atol=1e-12)


def test_prosody_cfg_needs_conditions(model, tensors):
    with pytest.raises(GuidanceError):
        cfg_prosody(model, tensors["x"], 3, tensors["c_sem"], None, tensors["psi"], 0.5)
    with pytest.raises(GuidanceError):
        cfg_prosody(model, tensors["x"], 3, tensors["c_sem"], tensors["c_pro"], None, 0.5)


def test_speaker_cfg_zero_weight_and_formula(model, tensors):
    x, c_sem, psi = tensors["x"], tensors["c_sem"], tensors["psi"]
    cond = pred(model, x, 9, c_sem, None, psi)
    uncond = pred(model, x, 9, c_sem, None, None)
    assert np.array_equal(cfg_speaker(model, x, 9, c_sem, psi, 0.0), cond)
    np.testing.assert_allclose(cfg_speaker(model, x, 9, c_sem, psi, 3.0), 4 * cond - 3 * uncond, atol=1e-12)
    with pytest.raises(GuidanceError):
        cfg_speaker(model, x, 9, c_sem, None, 1.0)


def test_speaker_cfg_vanishing_difference(model, tensors):
    # a zero pseudo-speaker makes the conditional and unconditional passes identical
    x, c_sem = tensors["x"], tensors["c_sem"]
    zero = np.zeros_like(tensors["psi"])
    base = pred(model, x, 9, c_sem, None, None)
    for w in (0.0, 1.0, 3.0, 7.5):
        np.testing.assert_allclose(cfg_speaker(model, x, 9, c_sem, zero, w), base, rtol=0, atol=1e-13)


def test_combine_end_points():
    a, b = np.array([0.1, 0.7]), np.array([0.3, -2.0])
    assert np.array_equal(combine(a, b, 0.0), a)
    assert np.array_equal(combine(a, b, 1.0), b)


def test_spec_validation():
    GuidanceSpec().validate()
    with pytest.raises(GuidanceError):
        GuidanceSpec(w_pro=-0.1).validate()
    with pytest.raises(GuidanceError):
        GuidanceSpec(w_pro=2.5).validate()
    with pytest.raises(GuidanceError):
        GuidanceSpec(mode=GuidanceMode.SPEAKER_CFG, use_prosody=True).validate()
    with pytest.raises(GuidanceError):
        GuidanceSpec(n_infer_steps=0).validate()
    with pytest.raises(GuidanceError):
        GuidanceSpec(mode=GuidanceMode.SPEAKER_CFG, w_spk=-1).validate()
    with pytest.warns(UserWarning):
        GuidanceSpec(w_pro=1.5).validate()


def test_spec_labels():
    assert GuidanceSpec(w_pro=0.8).label() == "prosody-cfg:w_pro=0.8"
    assert GuidanceSpec(mode=GuidanceMode.SPEAKER_CFG, w_spk=3).label() == "speaker-cfg:w_spk=3"
    assert GuidanceSpec(mode=GuidanceMode.PLAIN, use_pseudo_speaker=False).label() == "plain:null/null"
    assert GuidanceSpec(prosody_shift=0.5).label().endswith("+shift")


def test_pool_of_one_and_mean():
    pool = build_pool({4: [np.array([1.0]), np.array([3.0])]})
    assert pool.embeddings.tolist() == [[2.0]]
    rng = np.random.default_rng(0)
    assert all(sample_pseudo_speaker(pool, rng)[0] == 4 for _ in range(20))
    with pytest.raises(ValueError):
        sample_pseudo_speaker(PseudoSpeakerPool([], np.zeros((0, 1))), rng)


def test_pool_sampling_uniform():
    pool = PseudoSpeakerPool(list(range(10)), np.eye(10))
    rng = np.random.default_rng(1)
    counts = np.bincount([sample_pseudo_speaker(pool, rng)[0] for _ in range(10_000)], minlength=10)
    assert np.all(np.abs(counts / 10_000 - 0.1) <= 0.03)
    again = np.random.default_rng(1)
    assert sample_pseudo_speaker(pool, again)[0] == sample_pseudo_speaker(pool, np.random.default_rng(1))[0]


def test_pool_from_world_utterances_is_speaker_mean():
    world = generate_world(WorldConfig(n_speakers=4, n_pool_speakers=2, n_semantic_tokens=6, frames=16, embed_dim=16, cond_pro_dim=3, cond_spk_dim=3, seed=1))
    utts = [u for s in world.pool_speakers for u in speaker_utterances(world, s, 3)]
    pool = pool_from_utterances(utts)
    assert pool.labels == sorted(world.pool_speakers)
    assert not set(pool.labels) & set(world.eval_speakers)
    for label, emb in zip(pool.labels, pool.embeddings):
        mine = [u.c_spk[:, 0] for u in utts if u.speaker_id == label]
        np.testing.assert_allclose(emb, np.mean(mine, axis=0), atol=1e-15)


def test_prosody_mean_shift_properties():
    rng = np.random.default_rng(2)
    c = rng.standard_normal((3, 12))
    assert np.array_equal(prosody_mean_shift(c, 0.0), c)
    shifted = prosody_mean_shift(c, np.array([0.5, -1.0, 2.0]))
    np.testing.assert_allclose(shifted[:, 3] - shifted[:, 8], c[:, 3] - c[:, 8], atol=1e-14)
    for ch in range(3):
        assert stats.spearmanr(c[ch], shifted[ch]).statistic == pytest.approx(1.0)
    with pytest.raises(ValueError):
        prosody_mean_shift(c, np.zeros(4))


@pytest.fixture(scope="module")
def source():
    world = generate_world(WorldConfig(n_speakers=4, n_pool_speakers=2, n_semantic_tokens=2, frames=10, embed_dim=8, cond_pro_dim=3, cond_spk_dim=3, seed=2))
    return speaker_utterances(world, world.eval_speakers[0], 2)


def test_anonymize_cfg_identities_end_to_end(model, source):
    sched = make_linear_schedule(40)
    rng = np.random.default_rng(3)
    psi, noise = rng.standard_normal(3), rng.standard_normal(source[0].x0.shape)
    run = lambda spec: anonymize(model, sched, spec, source[0], psi, noise)  # noqa: E731
    plain_full = run(GuidanceSpec(mode=GuidanceMode.PLAIN, use_prosody=True, n_infer_steps=10))
    plain_null = run(GuidanceSpec(mode=GuidanceMode.PLAIN, use_prosody=False, n_infer_steps=10))
    assert np.array_equal(run(GuidanceSpec(w_pro=1.0, n_infer_steps=10)), plain_full)
    assert np.array_equal(run(GuidanceSpec(w_pro=0.0, n_infer_steps=10)), plain_null)
    assert np.array_equal(run(GuidanceSpec(mode=GuidanceMode.SPEAKER_CFG, w_spk=0.0, n_infer_steps=10)), plain_null)
    assert not np.array_equal(plain_full, plain_null)


def test_anonymize_batch_matches_single_and_is_deterministic(model, source):
    sched = make_linear_schedule(40)
    rng = np.random.default_rng(4)
    psis, noise = rng.standard_normal((2, 3)), rng.standard_normal((2,) + source[0].x0.shape)
    spec = GuidanceSpec(w_pro=0.5, n_infer_steps=8)
    batch = anonymize(model, sched, spec, source, psis, noise)
    assert np.array_equal(batch, anonymize(model, sched, spec, source, psis, noise))
    for i in range(2):
        np.testing.assert_allclose(batch[i], anonymize(model, sched, spec, source[i], psis[i], noise[i]), atol=1e-12)


def test_anonymize_null_null_needs_no_pool(model, source):
    sched = make_linear_schedule(40)
    noise = np.random.default_rng(5).standard_normal(source[0].x0.shape)
    spec = GuidanceSpec(mode=GuidanceMode.PLAIN, use_pseudo_speaker=False, n_infer_steps=5)
    assert np.array_equal(anonymize(model, sched, spec, source[0], None, noise), anonymize(model, sched, spec, source[0], None, noise))
    with pytest.raises(GuidanceError):
        anonymize(model, sched, GuidanceSpec(n_infer_steps=5), source[0], None, noise)
    with pytest.raises(GuidanceError):
        anonymize(model, sched, GuidanceSpec(mode=GuidanceMode.SPEAKER_CFG, n_infer_steps=5), source[0], None, noise)


def test_anonymize_ignores_source_speaker(model, source):
    sched = make_linear_schedule(40)
    rng = np.random.default_rng(6)
    psi, noise = rng.standard_normal(3), rng.standard_normal(source[0].x0.shape)
    spec = GuidanceSpec(w_pro=0.8, n_infer_steps=6)
    a = anonymize(model, sched, spec, source[0], psi, noise)
    source[0].c_spk = source[0].c_spk + 100.0
    try:
        assert np.array_equal(a, anonymize(model, sched, spec, source[0], psi, noise))
    finally:
        source[0].c_spk = source[0].c_spk - 100.0
