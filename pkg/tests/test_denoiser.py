import struct

import numpy as np
import pytest

from gradcheck import fd_array, rel_error
from leqmod.denoiser import (
    ARCHITECTURES, OptimizerState, TrainConfig, adam_step, backward, base_loss, combined_loss,
    denoise_volume, forward, identity_params, init_params, load_checkpoint, save_checkpoint, train,
    zero_params,
)
from leqmod.errors import DimensionError, FormatError, TrainingError
from leqmod.lemod import le_loss
from leqmod.phantom import CohortSpec, CountSimConfig, Subject, generate_cohort
from leqmod.qumod import build_parcellation, qu_loss
from leqmod.seg import OracleProvider
from leqmod.volume import Volume, build_patch_grid


def test_param_counts():
    assert zero_params("convnet").n_params == 2177
    assert zero_params("linfilter").n_params == 126
    assert [n for n, _ in ARCHITECTURES["convnet"]] == ["w1", "b1", "w2", "b2", "w3", "b3"]


def test_forward_identities():
    x = np.random.default_rng(0).normal(size=(8, 8, 8))
    assert np.array_equal(forward(zero_params("convnet"), x), x)
    assert np.array_equal(forward(identity_params("linfilter"), x), x)
    p = zero_params("linfilter")
    p.blocks["w"][:] = 1.0 / 125
    out = forward(p, np.full((9, 9, 9), 2.5))
    assert out[4, 4, 4] == pytest.approx(2.5, rel=1e-14)
    with pytest.raises(DimensionError):
        forward(p, np.zeros((4, 5, 4)))


def test_forward_batch_matches_single():
    rng = np.random.default_rng(1)
    params = init_params("convnet", rng)
    xs = rng.normal(size=(3, 8, 8, 8))
    batch = forward(params, xs)
    for i in range(3):
        np.testing.assert_allclose(batch[i], forward(params, xs[i]), rtol=1e-13, atol=1e-13)


def test_backward_trivial_cases():
    rng = np.random.default_rng(2)
    params = init_params("convnet", rng)
    x = rng.normal(size=(8, 8, 8))
    grads, dx = backward(params, x, np.zeros_like(x))
    assert all(not g.any() for g in grads.values()) and not dx.any()
    up = rng.normal(size=x.shape)
    _, dx = backward(zero_params("convnet"), x, up)
    np.testing.assert_array_equal(dx, up)
    with pytest.raises(DimensionError):
        backward(params, x, np.zeros((8, 8, 7)))


@pytest.mark.parametrize("arch", ["linfilter", "convnet"])
def test_backward_finite_differences(arch):
    rng = np.random.default_rng(3)
    params = init_params(arch, rng)
    for name in params.blocks:
        if name.startswith("b"):
            params.blocks[name] = rng.normal(0, 0.1, size=params.blocks[name].shape)
    x = rng.normal(size=(8, 8, 8))
    up = rng.normal(size=x.shape)
    grads, dx = backward(params, x, up)

    def objective():
        return float(np.sum(forward(params, x) * up))

    for name, block in params.blocks.items():
        assert rel_error(fd_array(objective, block), grads[name]) < 1e-5, name
    assert rel_error(fd_array(objective, x), dx) < 1e-5


def test_combined_loss_contract():
    rng = np.random.default_rng(4)
    plan = build_parcellation(8)
    den, hc = rng.normal(size=(2, 8, 8, 8))
    prob = rng.random(den.shape)
    cfg = TrainConfig()
    total, grad, comps = combined_loss(hc, hc, prob, plan, cfg)
    assert total == 0.0 and not grad.any()
    total, grad, comps = combined_loss(den, hc, prob, plan, cfg)
    b, gb = base_loss(den, hc)
    le, qu = le_loss(den, hc, prob), qu_loss(den, hc, plan)
    assert total == pytest.approx(b + 0.15 * le.value + 0.5 * qu.value, rel=1e-12)
    np.testing.assert_allclose(grad, gb + 0.15 * le.grad + 0.5 * qu.grad, rtol=1e-12, atol=1e-15)
    off = TrainConfig(use_le=False, use_qu=False)
    total, _, comps = combined_loss(den, hc, prob, plan, off)
    assert total == b and comps["le"] == comps["qu"] == 0.0
    with pytest.raises(DimensionError):
        combined_loss(den, hc, prob[:4], plan, cfg)


def test_adam_examples():
    p = zero_params("linfilter")
    state = OptimizerState.for_params(p)
    zero = {k: np.zeros_like(v) for k, v in p.blocks.items()}
    adam_step(p, zero, state, 1e-3)
    assert state.step == 1 and all(not v.any() for v in p.blocks.values())
    p = zero_params("linfilter")
    state = OptimizerState.for_params(p)
    ones = {k: np.ones_like(v) for k, v in p.blocks.items()}
    adam_step(p, ones, state, 1e-3)
    assert p.blocks["b"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    bad = {k: np.full_like(v, np.nan) for k, v in p.blocks.items()}
    with pytest.raises(TrainingError, match="'w'"):
        adam_step(p, bad, state, 1e-3)


@pytest.fixture(scope="module")
def small_cohort():
    spec = CohortSpec(dims=(24, 24, 24), max_lesions=2, lesion_radius=(3.0, 5.0), seed=5)
    return generate_cohort(6, spec, CountSimConfig(count_levels=(5.0,), seed=5))


def _small_config(**kw):
    base = dict(patch_size=16, stride=8, max_epochs=2, epoch_samples=8, batch_size=4,
                val_fraction=0.2, test_fraction=0.2, max_val_patches=4, lr0=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_train_zero_epochs_returns_init(small_cohort):
    cfg = _small_config(max_epochs=0)
    init = init_params("convnet", np.random.default_rng(0))
    params, log = train(small_cohort, OracleProvider(), cfg, params=init)
    assert log.rows == []
    assert all(np.array_equal(params.blocks[k], init.blocks[k]) for k in init.blocks)


def test_train_deterministic_and_toggles(small_cohort):
    cfg = _small_config(use_le=False, use_qu=False, weighted_sampling=False)
    p1, log1 = train(small_cohort, OracleProvider(), cfg)
    p2, log2 = train(small_cohort, OracleProvider(), cfg)
    assert all(np.array_equal(p1.blocks[k], p2.blocks[k]) for k in p1.blocks)
    assert log1.to_csv() == log2.to_csv()
    assert all(r["loss_le"] == 0.0 and r["loss_qu"] == 0.0 for r in log1.rows)
    header = log1.to_csv().splitlines()[0]
    assert header == "epoch,lr,loss_total,loss_base,loss_le,loss_qu,val_loss,lesion_fraction"


def test_train_empty_cohort():
    with pytest.raises(TrainingError):
        train([], OracleProvider(), _small_config())


def test_linfilter_learns_identity():
    rng = np.random.default_rng(6)
    subjects = []
    for i in range(5):
        hc = Volume(rng.uniform(0.5, 3.0, size=(16, 16, 16)), (2, 2, 2))
        subjects.append(Subject(f"s{i}", hc, {5.0: hc}, np.zeros(hc.dims), []))
    cfg = TrainConfig(arch="linfilter", use_le=False, use_qu=False, weighted_sampling=False,
                      patch_size=8, stride=4, lr0=3e-2, max_epochs=320, epoch_samples=16, batch_size=4,
                      patience=10, val_fraction=0.2, test_fraction=0.0)
    params, log = train(subjects, OracleProvider(), cfg)
    assert log.rows[-1]["loss_base"] < 1e-6
    assert params.blocks["w"][2, 2, 2, 0, 0] == pytest.approx(1.0, abs=1e-3)
    # Adam on sampled batches is not strictly monotone; after the decay the
    # validation loss may wiggle but must stay near its level and end lower
    after = [r["val_loss"] for r in log.rows if r["lr"] < cfg.lr0]
    assert len(after) > 5
    assert max(after) - after[0] < 1e-7 and after[-1] < after[0]


def test_denoise_volume_contract():
    rng = np.random.default_rng(7)
    vol = Volume(rng.uniform(0, 2, size=(20, 20, 20)))
    grid = build_patch_grid(vol.dims, 8, 4)
    out = denoise_volume(identity_params("linfilter"), vol, grid)
    np.testing.assert_allclose(out.data, vol.data, rtol=1e-6)
    assert not denoise_volume(zero_params("linfilter"), vol, grid).data.any()
    params = init_params("convnet", rng)
    a = denoise_volume(params, vol, grid)
    b = denoise_volume(params, vol, grid)
    assert np.array_equal(a.data, b.data) and a.data.min() >= 0.0
    with pytest.raises(DimensionError):
        denoise_volume(params, vol, build_patch_grid((24, 24, 24), 8, 4))


def test_checkpoint_roundtrip(tmp_path):
    params = init_params("convnet", np.random.default_rng(8))
    p1, p2 = tmp_path / "a.lqmp", tmp_path / "b.lqmp"
    save_checkpoint(params, p1)
    back = load_checkpoint(p1, expect_arch="convnet")
    assert all(np.array_equal(back.blocks[k], params.blocks[k]) for k in params.blocks)
    save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    raw = p1.read_bytes()
    assert raw[:4] == b"LQMP" and struct.unpack_from("<I", raw, 4)[0] == 1
    assert raw[8:24].rstrip(b"\0") == b"convnet"
    with pytest.raises(FormatError):
        load_checkpoint(p1, expect_arch="linfilter")
    (tmp_path / "t.lqmp").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.lqmp")
