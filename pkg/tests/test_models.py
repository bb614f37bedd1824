import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtrack import autodiff as ad
from vtrack.autodiff import NonFinite
from vtrack.models import (CONTEXT_DIM, NOISE_DIM, CorrectionParams, DiscriminatorParams, Diverged, GeneratorParams,
                           TrainConfig, TrainResult, apply_correction, correct, discriminate, generate,
                           infragan_loss, infragan_train, load_model, mean_min_ade, predict_k, save_model,
                           stack_windows, tgan_train)

from conftest import sampled_grad_check, toy_windows


def _gen(seed=0):
    return GeneratorParams.init(np.random.default_rng(seed))


def _cm(seed=0):
    return CorrectionParams.init(np.random.default_rng(seed))


def test_generator_shapes_and_frame():
    X = toy_windows(1, n_vehicles=4)[0].X
    z = np.zeros((4, NOISE_DIM))
    Y = generate(_gen(), X, z)
    assert Y.shape == (4, 8, 2)
    # translation equivariance: predictions follow each vehicle's last position
    assert np.allclose(generate(_gen(), X + 5.0, z), Y + 5.0)
    assert generate(_gen(), X, z, horizon=5).shape == (4, 5, 2)


def test_discriminator_outputs_probabilities():
    w = toy_windows(1, n_vehicles=5)[0]
    p = discriminate(DiscriminatorParams.init(np.random.default_rng(0)), w.X, w.Y)
    assert p.shape == (5,) and np.all((p > 0) & (p < 1))


def test_apply_correction_identity_at_zero():
    Yt = np.random.default_rng(0).standard_normal((3, 8, 2))
    assert np.array_equal(apply_correction(Yt, np.zeros_like(Yt)), Yt)


@settings(max_examples=300)
@given(arrays(np.float64, (2, 4, 2), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (2, 4, 2), elements=st.floats(-50, 50)))
def test_apply_correction_bounds(Yt, C):
    Y = apply_correction(Yt, C)
    lo, hi = np.minimum(0, 2 * Yt), np.maximum(0, 2 * Yt)
    assert np.all((Y >= lo - 1e-9 * np.abs(Yt)) & (Y <= hi + 1e-9 * np.abs(Yt)))


def test_correct_is_vehicle_centric():
    w = toy_windows(1, n_vehicles=3)[0]
    Yt = generate(_gen(), w.X, np.zeros((3, NOISE_DIM)))
    Yh, C = correct(_cm(), w.S, w.X, Yt)
    last = w.X[:, -1:, :]
    assert C.shape == (3, 8, 2)
    assert np.allclose(Yh - last, (Yt - last) * (1 + np.tanh(C)))
    # shifting the scene moves the corrected output with it
    Yh2, C2 = correct(_cm(), w.S, w.X + 7.0, Yt + 7.0)
    assert np.allclose(C2, C) and np.allclose(Yh2, Yh + 7.0)


def test_nested_k_prefix():
    w = toy_windows(1, n_vehicles=3)[0]
    big = predict_k(_gen(), _cm(), w.X, w.S, k=5, seed=9)
    for k in (1, 3):
        small = predict_k(_gen(), _cm(), w.X, w.S, k=k, seed=9)
        assert np.array_equal(small.trajectories, big.trajectories[:k])
    assert big.trajectories.shape == (5, 3, 8, 2) and big.corrections.shape == (5, 3, 8, 2)
    with pytest.raises(ValueError):
        predict_k(_gen(), None, w.X, None, k=0)


def test_infragan_loss_matches_direct_formula():
    w = toy_windows(1, n_vehicles=2)[0]
    gen, cm = _gen(1), _cm(1)
    z = np.random.default_rng(2).standard_normal((3, 2, NOISE_DIM))
    p = {**ad.to_tensors(gen.arrays(), False), **ad.to_tensors(cm.arrays(), False)}
    loss = float(infragan_loss(p, w.X, w.Y, w.S, z).data)
    expect = 0.0
    for k in range(3):
        Yt = generate(gen, w.X, z[k])
        Yh, C = correct(cm, w.S, w.X, Yt)
        expect += np.sum((Yh - w.Y) ** 2, axis=(1, 2)) + 1.0 / (np.abs(C).sum(axis=(1, 2)) + 1e-6)
    assert loss == pytest.approx(float(np.mean(expect)), rel=1e-10)


@pytest.mark.parametrize("literal, inverse, mink", [(True, True, False), (False, False, False), (False, True, True)])
def test_infragan_loss_variants_grad_check(literal, inverse, mink):
    w = toy_windows(1, n_vehicles=2)[0]
    rng = np.random.default_rng(0)
    z = rng.standard_normal((2, 2, NOISE_DIM))
    params = {**_gen().arrays(), **_cm().arrays()}
    err = sampled_grad_check(lambda p: infragan_loss(p, w.X, w.Y, w.S, z, literal, inverse, mink), params, rng, 4)
    assert err < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    res = TrainResult(_gen(), DiscriminatorParams.init(np.random.default_rng(0)), _cm())
    save_model(tmp_path / "m.ckpt", res, "InfraGAN", TrainConfig(epochs=3))
    back, meta = load_model(tmp_path / "m.ckpt")
    assert meta["model"] == "InfraGAN" and meta["config"]["epochs"] == 3
    for a, b in ((res.generator, back.generator), (res.correction, back.correction)):
        assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())


def test_tgan_training_reduces_error_and_is_seeded():
    train = toy_windows(24, seed=1)
    cfg = TrainConfig(epochs=8, batch=8, seed=3)
    before = mean_min_ade(GeneratorParams.init(np.random.default_rng([3, 1])), None, train)
    a = tgan_train(train, cfg)
    b = tgan_train(train, cfg)
    assert mean_min_ade(a.generator, None, train) < before
    assert all(np.array_equal(x, y) for x, y in zip(a.generator.arrays().values(), b.generator.arrays().values()))
    assert len(a.history) == 8 and {"d_loss", "g_adv", "g_mse", "d_acc"} <= set(a.history[0])


def test_infragan_training_runs_and_tracks_val():
    train, val = toy_windows(16, seed=1), toy_windows(4, seed=2)
    tgan = tgan_train(train, TrainConfig(epochs=2, batch=8))
    res = infragan_train(train, tgan, TrainConfig(epochs=3, batch=8, k=2), val=val)
    assert res.correction is not None and "val_min_ade" in res.history[-1]
    frozen = infragan_train(train, tgan, TrainConfig(epochs=1, batch=8, k=2, train_generator=False))
    assert all(np.array_equal(frozen.generator.arrays()[k], tgan.generator.arrays()[k])
               for k in tgan.generator.arrays())


def test_infragan_requires_pretrained_tgan_and_context():
    train = toy_windows(4, seed=1)
    with pytest.raises(ValueError, match="pretrained TGAN required"):
        infragan_train(train, None, TrainConfig(epochs=1))
    tgan = TrainResult(_gen())
    with pytest.raises(ValueError):
        infragan_train(toy_windows(4, context=False), tgan, TrainConfig(epochs=1))


def test_divergence_is_reported(monkeypatch):
    train = toy_windows(4, seed=1)

    def boom(*a, **k):
        raise NonFinite("gradient of G.W_ee is not finite")

    monkeypatch.setattr(ad, "adam_update", boom)
    with pytest.raises(Diverged) as exc:
        tgan_train(train, TrainConfig(epochs=1, batch=8))
    assert exc.value.epoch == 0


def test_stack_windows_marks_ego_rows():
    b = stack_windows(toy_windows(3, n_vehicles=2))
    assert b.X.shape == (6, 8, 2) and b.S.shape == (6, 8, CONTEXT_DIM)
    assert list(b.ego) == [True, False] * 3 and list(b.window) == [0, 0, 1, 1, 2, 2]


def test_train_config_from_mapping():
    cfg = TrainConfig.from_mapping({"epochs": "7", "lr": "0.01", "inverse_c": "false"})
    assert cfg.epochs == 7 and cfg.lr == 0.01 and cfg.inverse_c is False


def test_vehicle_permutation_equivariance():
    w = toy_windows(1, n_vehicles=4)[0]
    perm = np.array([2, 0, 3, 1])
    a = predict_k(_gen(), _cm(), w.X, w.S, k=1, seed=0).trajectories[0]
    # noise rows follow the vehicles, so feed the permuted noise explicitly
    z = np.random.default_rng(0).standard_normal((4, NOISE_DIM))
    Yt = generate(_gen(), w.X, z)
    Yp = generate(_gen(), w.X[perm], z[perm])
    assert np.allclose(Yp, Yt[perm], atol=1e-12)
    Yh, _ = correct(_cm(), w.S, w.X, Yt)
    Yhp, _ = correct(_cm(), w.S[perm], w.X[perm], Yt[perm])
    assert np.allclose(Yhp, Yh[perm], atol=1e-12)
    assert np.allclose(a, Yh, atol=1e-12)


def test_sampling_is_seeded_and_diverse():
    w = toy_windows(1, n_vehicles=2)[0]
    a = predict_k(_gen(), None, w.X, None, k=1, seed=3).trajectories
    b = predict_k(_gen(), None, w.X, None, k=1, seed=3).trajectories
    assert np.array_equal(a, b)
    five = predict_k(_gen(), None, w.X, None, k=5, seed=3).trajectories
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.linalg.norm(five[i] - five[j]) > 0.0
