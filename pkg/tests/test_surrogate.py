"""Surrogate and oracle contracts: masking, prediction, noise model."""

import numpy as np
import pytest

from micas import surrogate as sur_mod
from micas.autodiff import ParamStore, Tape, finite_diff_check
from micas.geometry import PatchSet, chamfer_distance, knn_patches
from micas.sampler import SamplerConfig, init_sampler_params, encode_task, load_sampler, save_sampler
from micas.surrogate import (
    OFFSET_SPAN,
    ORACLE_CENTER_GAIN,
    ORACLE_PROMPT_GAIN,
    ORACLE_SIGMA0,
    MaskPattern,
    OracleModel,
    SurrogateConfig,
    SurrogateModel,
    adaptive_centers_fn,
    fps_centers_fn,
    init_surrogate_params,
    load_surrogate,
    mask_patches,
    oracle_predict,
    oracle_sigma,
    save_surrogate,
    surrogate_predict,
    visible_context,
)
from micas.tasks import gen_pair

CFG = SurrogateConfig(d1=8, m_neighbors=4, width=8)
S_CFG = SamplerConfig(d1=8, d2=8, n_centers=4, width=8)


def random_patchset(rng, n=10, m=4):
    return PatchSet(rng.uniform(size=(n, 3)), rng.uniform(size=(n, m, 3)))


def test_mask_pattern_counts():
    rng = np.random.default_rng(0)
    ps = random_patchset(rng)
    for ratio, expect in ((0.0, 0), (0.6, 6), (1.0, 10)):
        masked, pattern = mask_patches(ps, ratio, np.random.default_rng(1))
        assert len(pattern.indices) == expect
        assert len(np.unique(pattern.indices)) == expect
        assert (masked.patches[pattern.indices] == 0.0).all()
        keep = pattern.visible
        assert np.array_equal(masked.patches[keep], ps.patches[keep])
        assert np.array_equal(masked.centers, ps.centers)
    with pytest.raises(ValueError):
        mask_patches(ps, 1.5, np.random.default_rng(1))


def test_mask_pattern_validation():
    with pytest.raises(ValueError):
        MaskPattern(np.array([0, 0]), 4)
    with pytest.raises(ValueError):
        MaskPattern(np.array([4]), 4)
    pattern = MaskPattern(np.array([3, 1]), 5)
    assert np.array_equal(pattern.indices, [1, 3])
    assert np.array_equal(pattern.visible, [0, 2, 4])


def test_visible_context_mean_and_empty():
    rng = np.random.default_rng(2)
    ps = random_patchset(rng, n=5)
    pattern = MaskPattern(np.array([0, 2]), 5)
    expect = ps.patches[[1, 3, 4]].reshape(-1, 3).mean(axis=0)
    assert np.abs(visible_context(ps, pattern) - expect).max() < 1e-15
    assert np.array_equal(visible_context(ps, MaskPattern(np.arange(5), 5)), np.zeros(3))


def test_zero_parameters_predict_center_copies():
    store = init_surrogate_params(CFG, np.random.default_rng(3))
    for name in store.names():
        store[name].value[...] = 0.0
    tape = Tape()
    centers = tape.const(np.random.default_rng(4).uniform(size=(3, 3)))
    task = tape.const(np.zeros(CFG.d1))
    preds = surrogate_predict(tape, store, CFG, task, centers, np.zeros(3))
    assert len(preds) == 3
    for i, node in enumerate(preds):
        assert node.shape == (CFG.m_neighbors, 3)
        assert np.abs(node.value - centers.value[i]).max() == 0.0


def test_zero_parameter_translation_equivariance():
    store = init_surrogate_params(CFG, np.random.default_rng(5))
    for name in store.names():
        store[name].value[...] = 0.0
    rng = np.random.default_rng(6)
    base = rng.uniform(size=(4, 3))
    shift = np.array([0.3, -0.1, 0.2])
    task = np.zeros(CFG.d1)
    tape = Tape()
    a = surrogate_predict(tape, store, CFG, tape.const(task), tape.const(base), np.zeros(3))
    tape = Tape()
    b = surrogate_predict(tape, store, CFG, tape.const(task), tape.const(base + shift), np.zeros(3))
    for pa, pb in zip(a, b):
        assert np.abs((pa.value + shift) - pb.value).max() < 1e-15


def test_predictions_stay_within_offset_span():
    store = init_surrogate_params(CFG, np.random.default_rng(7))
    for name in store.names():  # exaggerate the weights; the bound must still hold
        store[name].value *= 50.0
    rng = np.random.default_rng(8)
    tape = Tape()
    centers = tape.const(rng.uniform(size=(5, 3)))
    task = tape.const(rng.normal(size=CFG.d1))
    preds = surrogate_predict(tape, store, CFG, task, centers, rng.uniform(size=3))
    for i, node in enumerate(preds):
        assert np.abs(node.value - centers.value[i]).max() <= OFFSET_SPAN + 1e-12


def test_surrogate_gradient_reaches_centers():
    store = init_surrogate_params(CFG, np.random.default_rng(9))
    rng = np.random.default_rng(10)
    target = rng.uniform(size=(2, CFG.m_neighbors, 3))
    task_vec = rng.normal(size=CFG.d1)
    ctx = rng.uniform(size=3)
    probe = ParamStore()
    probe.add("centers", rng.uniform(size=(2, 3)))

    def loss_fn(p):
        tape = Tape()
        preds = surrogate_predict(tape, store, CFG, tape.const(task_vec),
                                  tape.param(p, "centers"), ctx)
        per = [tape.chamfer(node, tape.const(target[i])) for i, node in enumerate(preds)]
        tape.mean_all(tape.stack_scalars(per))
        return tape

    assert finite_diff_check(loss_fn, probe) <= 1e-3


def test_surrogate_task_feature_width_checked():
    store = init_surrogate_params(CFG, np.random.default_rng(11))
    tape = Tape()
    with pytest.raises(ValueError):
        surrogate_predict(tape, store, CFG, tape.const(np.zeros(CFG.d1 + 1)),
                          tape.const(np.zeros((2, 3))), np.zeros(3))


def test_surrogate_model_end_to_end_shapes():
    rng = np.random.default_rng(12)
    sampler_store = init_sampler_params(S_CFG, rng)
    sur_store = init_surrogate_params(CFG, rng)
    for name in sampler_store.names():
        if name.startswith("task_enc"):
            sur_store.add(name, sampler_store[name].value)
    model = SurrogateModel(sur_store, S_CFG, CFG)
    cloud = rng.uniform(size=(20, 3))
    patches = knn_patches(cloud, cloud[:6], CFG.m_neighbors)
    masked, pattern = mask_patches(patches, 0.5, rng)
    out = model.predict(cloud, cloud, masked, pattern, patches.centers)
    assert out.shape == (len(pattern.indices), CFG.m_neighbors, 3)
    with pytest.raises(ValueError):
        SurrogateModel(sur_store, SamplerConfig(d1=16, d2=8, n_centers=4, width=8), CFG)


def test_oracle_sigma_formula_exact():
    rng = np.random.default_rng(13)
    q = rng.uniform(size=(30, 3))
    assert oracle_sigma(q, q, q) == pytest.approx(ORACLE_SIGMA0, abs=0.0)
    p = rng.uniform(size=(30, 3))
    centers = rng.uniform(size=(6, 3))
    expect = ORACLE_SIGMA0 * (1.0
                              + ORACLE_CENTER_GAIN * chamfer_distance(centers, q)
                              + ORACLE_PROMPT_GAIN * chamfer_distance(p, q))
    assert oracle_sigma(q, p, centers) == pytest.approx(expect, rel=1e-15)


def test_oracle_sigma_monotone_in_coverage():
    rng = np.random.default_rng(14)
    q = rng.uniform(size=(40, 3))
    p = rng.uniform(size=(40, 3))
    good = q[:8]
    bad = good + 0.5
    assert oracle_sigma(q, p, bad) > oracle_sigma(q, p, good)


def test_oracle_zero_sigma_returns_ground_truth(monkeypatch):
    monkeypatch.setattr(sur_mod, "ORACLE_SIGMA0", 0.0)
    rng = np.random.default_rng(15)
    q = rng.uniform(size=(10, 3))
    y = rng.uniform(size=(10, 3))
    out = oracle_predict(q, y, rng.uniform(size=(10, 3)), q[:3], np.random.default_rng(0))
    assert np.array_equal(out, y)


def test_oracle_predict_is_pure():
    rng = np.random.default_rng(16)
    q = rng.uniform(size=(12, 3))
    y = rng.uniform(size=(12, 3))
    p = rng.uniform(size=(12, 3))
    a = oracle_predict(q, y, p, q[:4], np.random.default_rng(99))
    b = oracle_predict(q, y, p, q[:4], np.random.default_rng(99))
    assert np.array_equal(a, b)


def test_oracle_expected_error_ordering_follows_sigma():
    # two prompts with different mismatch: the worse one must produce worse
    # expected reconstruction over repeated draws
    rng = np.random.default_rng(17)
    q = rng.uniform(size=(24, 3))
    y = rng.uniform(size=(24, 3))
    centers = q[:6]
    near = q + 0.01 * rng.normal(size=q.shape)
    far = rng.uniform(size=(24, 3)) + 1.0
    assert oracle_sigma(q, near, centers) < oracle_sigma(q, far, centers)
    errs_near = [chamfer_distance(oracle_predict(q, y, near, centers, np.random.default_rng(s)), y)
                 for s in range(100)]
    errs_far = [chamfer_distance(oracle_predict(q, y, far, centers, np.random.default_rng(s)), y)
                for s in range(100)]
    assert np.mean(errs_near) < np.mean(errs_far)


def test_centers_fn_helpers():
    rng = np.random.default_rng(18)
    prompt = gen_pair("denoising", 1, 16, 5)
    q = rng.uniform(size=(16, 3))
    fps_fn = fps_centers_fn(4)
    centers = fps_fn(q, prompt)
    assert centers.shape == (4, 3)
    sampler_store = init_sampler_params(S_CFG, rng)
    ada_fn = adaptive_centers_fn(sampler_store, S_CFG)
    centers = ada_fn(q, prompt)
    assert centers.shape == (S_CFG.n_centers, 3)
    model = OracleModel(ada_fn)
    assert model.differentiable is False
    out = model.predict_cloud(prompt.input.points, prompt.target.points, prompt,
                              np.random.default_rng(1))
    assert out.shape == prompt.target.points.shape


def test_surrogate_checkpoint_round_trip(tmp_path):
    store = init_surrogate_params(CFG, np.random.default_rng(19))
    path = tmp_path / "surrogate.micasnn"
    save_surrogate(store, CFG, path)
    back, cfg = load_surrogate(path)
    assert cfg == CFG
    for name in store.names():
        assert np.array_equal(back[name].value, store[name].value)


def test_surrogate_rejects_foreign_sidecar(tmp_path):
    path = tmp_path / "model.micasnn"
    save_sampler(ParamStore(), S_CFG, path)
    with pytest.raises(ValueError):
        load_surrogate(path)
