import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dpvae.data import synth_dataset
from dpvae.errors import ConfigurationError, NumericError, ParameterError, StateError
from dpvae.nn import Rng
from dpvae.vae import (
    DpConfig,
    TrainConfig,
    VaeConfig,
    VaeModel,
    encode,
    evaluate,
    generate,
    kl_divergence,
    load_model,
    loss_and_grads,
    per_example_grads,
    perturb_via_vae_ldp,
    save_model,
    train,
)

from helpers import fd_check, linear_vae, random_small_vae


def _fixed_encoder(mu, log_var, data_dim=3):
    d = len(mu)
    return linear_vae(np.zeros((data_dim, 2 * d)), np.r_[mu, log_var], np.zeros((d, data_dim)), np.zeros(data_dim))


def test_encode_zero_case():
    enc = encode(_fixed_encoder([0.0], [0.0]), np.ones((1, 3)), eta=np.zeros((1, 1)))
    assert enc.z[0, 0] == 0.0
    assert enc.sigma[0, 0] == 1.0


def test_encode_affine_case():
    enc = encode(_fixed_encoder([1.0], [2 * math.log(2.0)]), np.ones((1, 3)), eta=np.array([[0.5]]))
    assert enc.z[0, 0] == pytest.approx(2.0, abs=1e-15)


def test_encode_sample_moments():
    model = _fixed_encoder([0.7, -1.2], [math.log(0.25), math.log(4.0)])
    x = np.ones((100_000, 3))
    z = encode(model, x, Rng(0)).z
    sigma = np.array([0.5, 2.0])
    n = len(z)
    assert np.all(np.abs(z.mean(axis=0) - [0.7, -1.2]) <= 3 * sigma / math.sqrt(n))
    np.testing.assert_allclose(z.std(axis=0), sigma, rtol=0.02)


def test_encode_rejects_wrong_width_and_non_finite():
    model = _fixed_encoder([0.0], [0.0])
    with pytest.raises(ParameterError):
        encode(model, np.ones((1, 4)))
    with pytest.raises(NumericError):
        encode(model, np.array([[np.nan, 0.0, 0.0]]))


def test_kl_hand_cases():
    assert kl_divergence(np.zeros((1, 3)), np.zeros((1, 3))) == 0.0
    assert kl_divergence(np.ones((1, 1)), np.zeros((1, 1))) == 0.5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=1, max_size=6))
def test_kl_non_negative(pairs):
    mu = np.array([[p[0] for p in pairs]])
    lv = np.array([[p[1] for p in pairs]])
    assert kl_divergence(mu, lv) >= 0.0


def test_kl_matches_monte_carlo():
    rng = Rng(9)
    mu = rng.uniform(-1, 1, 3)
    sigma = rng.uniform(0.5, 2.0, 3)
    z = mu + sigma * rng.child("mc").normal((100_000, 3))
    log_q = stats.norm.logpdf(z, mu, sigma).sum(axis=1)
    log_p = stats.norm.logpdf(z).sum(axis=1)
    mc = float(np.mean(log_q - log_p))
    closed = kl_divergence(mu[None], 2 * np.log(sigma)[None])
    assert mc == pytest.approx(closed, rel=0.02)


@pytest.mark.parametrize("mode", ["standard", "vae_ldp"])
def test_gradients_match_finite_differences(mode):
    rng = Rng(21)
    for i in range(5):
        r = rng.child(i)
        model = random_small_vae(r, mode)
        x = r.uniform(0, 1, (4, model.config.data_dim))
        eta = r.normal((4, model.config.latent_dim))
        assert fd_check(model, x, eta, r.child("coords")) < 1e-4


def test_gradient_with_classifier_head():
    rng = Rng(5)
    cfg = VaeConfig(data_dim=4, latent_dim=2, hidden=(3,), num_classes=3, class_weight=0.5, kl_weight=0.01, recon_weight=50)
    model = VaeModel.create(cfg, rng)
    x = rng.uniform(0, 1, (5, 4))
    y = np.array([0, 1, 2, 1, 0])
    assert fd_check(model, x, rng.normal((5, 2)), rng.child("c"), coords=20, y=y) < 1e-4


def test_per_example_grads_average_to_batch_grad():
    rng = Rng(8)
    model = random_small_vae(rng)
    x = rng.uniform(0, 1, (6, model.config.data_dim))
    eta = rng.normal((6, model.config.latent_dim))
    _, grads = loss_and_grads(model, x, eta)
    flat = np.concatenate([g.ravel() for g in grads])
    np.testing.assert_allclose(per_example_grads(model, x, eta).mean(axis=0), flat, atol=1e-12)


def _blob(n=100, d=16, seed=0):
    rng = Rng(seed)
    centers = rng.uniform(0.2, 0.8, (2, d))
    y = np.arange(n) % 2
    return np.clip(centers[y] + 0.05 * rng.normal((n, d)), 0, 1), y


def _params_equal(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))


def test_zero_noise_infinite_clip_is_bit_identical_to_plain_training():
    x, _ = _blob(40, 8)
    cfg = VaeConfig(data_dim=8, latent_dim=2, hidden=(6,))
    base = VaeModel.create(cfg, Rng(1))
    dp = base.copy()
    tc = TrainConfig(epochs=10, batch_size=8, max_steps=20)
    train(base, x, tc, Rng(2))
    tlog = train(dp, x, tc, Rng(2), dp=DpConfig(0.0, math.inf))
    assert tlog.steps == 20
    assert _params_equal(base, dp)


def test_training_halves_reconstruction_loss():
    data = synth_dataset({"generator": "blob-images", "classes": 2, "n": 100, "noise": 0.1}, seed=0)
    model = VaeModel.create(VaeConfig(data_dim=256, latent_dim=4, hidden=(32,), recon_loss="sse"), Rng(3))
    before = evaluate(model, data.x).reconstruction
    tlog = train(model, data.x, TrainConfig(epochs=50, batch_size=16), Rng(4))
    assert tlog.train_recon[-1] <= 0.5 * before


def test_accountant_counts_steps():
    x, _ = _blob(50, 4)
    model = VaeModel.create(VaeConfig(data_dim=4, latent_dim=2, hidden=()), Rng(0))
    tlog = train(model, x, TrainConfig(epochs=3, batch_size=16), Rng(1), dp=DpConfig(1.0, 1.0))
    assert tlog.accountant.steps == 3 * math.ceil(50 / 16) == tlog.steps
    assert tlog.accountant.sampling_rate == 16 / 50


def test_dp_clipped_norms_bounded():
    x, _ = _blob(40, 6)
    model = VaeModel.create(VaeConfig(data_dim=6, latent_dim=2, hidden=(4,)), Rng(0))
    tlog = train(model, x, TrainConfig(epochs=5, batch_size=8, record_norms=True), Rng(1), dp=DpConfig(1.0, 0.05))
    clipped = np.concatenate(tlog.clipped_norms)
    assert clipped.max() <= 0.05 + 1e-12
    assert np.concatenate(tlog.gradient_norms).max() > 0.05


def test_dp_config_rejects_infinite_clip_with_noise():
    with pytest.raises(ConfigurationError):
        DpConfig(1.0, math.inf)


def test_train_log_has_gap_and_val():
    x, _ = _blob(60, 6)
    model = VaeModel.create(VaeConfig(data_dim=6, latent_dim=2, hidden=(4,)), Rng(0))
    tlog = train(model, x[:30], TrainConfig(epochs=4, batch_size=10), Rng(1), val=x[30:45], test=x[45:])
    assert len(tlog.val_loss) == len(tlog.train_test_gap) == 4
    assert tlog.train_test_gap[-1] == pytest.approx(tlog.test_loss[-1] - tlog.train_loss[-1])


def test_collapse_is_flagged_and_training_continues():
    # zero encoder and no reconstruction term: every gradient is exactly 0, KL stays 0, recon is flat
    x, _ = _blob(40, 6)
    model = linear_vae(np.zeros((6, 4)), np.zeros(4), Rng(0).normal((2, 6)), np.zeros(6), recon_weight=0.0)
    tlog = train(model, x, TrainConfig(epochs=30, batch_size=10, collapse_patience=10), Rng(1))
    assert tlog.collapse_epoch == 10
    assert len(tlog.train_loss) == 30


def test_no_collapse_flag_while_learning():
    data = synth_dataset({"generator": "blob-images", "classes": 2, "n": 60, "noise": 0.1}, seed=0)
    model = VaeModel.create(VaeConfig(data_dim=256, latent_dim=4, hidden=(32,), recon_loss="sse"), Rng(3))
    assert not train(model, data.x, TrainConfig(epochs=20, batch_size=16), Rng(4)).collapsed


def test_generate_identity_decoder_is_standard_normal():
    model = linear_vae(np.zeros((3, 6)), np.zeros(6), np.eye(3), np.zeros(3))
    s = generate(model, 100_000, Rng(0))
    assert np.all(np.abs(s.mean(axis=0)) < 0.01)
    np.testing.assert_allclose(s.var(axis=0), 1.0, atol=0.02)


def test_generate_empty():
    model = linear_vae(np.zeros((3, 6)), np.zeros(6), np.eye(3), np.zeros(3))
    assert generate(model, 0, Rng(0)).shape == (0, 3)


def test_generate_label_errors():
    cfg = dict(num_classes=2, conditional=True)
    model = linear_vae(np.zeros((3, 6)), np.zeros(6), np.eye(3), np.zeros(3), **cfg)
    src = (np.zeros((4, 3)), np.array([0, 1, 0, 1]))
    with pytest.raises(ParameterError):
        generate(model, 3, Rng(0), label=2, source=src)
    with pytest.raises(ParameterError):
        generate(model, 3, Rng(0), source=src)
    plain = linear_vae(np.zeros((3, 6)), np.zeros(6), np.eye(3), np.zeros(3))
    with pytest.raises(ParameterError):
        generate(plain, 3, Rng(0), label=0)


def test_conditional_generation_matches_label():
    data = synth_dataset({"generator": "blob-images", "classes": 2, "n": 200, "noise": 0.1}, seed=1)
    x, y = data.x, data.y
    cfg = VaeConfig(data_dim=256, latent_dim=4, hidden=(32,), num_classes=2, conditional=True, recon_loss="sse")
    model = VaeModel.create(cfg, Rng(0))
    train(model, x, TrainConfig(epochs=30, batch_size=20), Rng(1))
    # oracle: nearest class mean of the clean data
    means = np.stack([x[y == c].mean(axis=0) for c in (0, 1)])
    for label in (0, 1):
        s = generate(model, 200, Rng(2).child(label), label=label, source=(x, y))
        pred = np.argmin(((s[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
        assert np.mean(pred == label) > 0.8


def _ldp_model(noise_bound, seed=0, data_dim=5, latent=3):
    cfg = VaeConfig(data_dim=data_dim, latent_dim=latent, hidden=(8,), mode="vae_ldp", noise_bound=noise_bound)
    return VaeModel.create(cfg, Rng(seed))


def test_vae_ldp_mean_is_bounded():
    model = _ldp_model(0.1)
    x = 1e3 * Rng(1).normal((500, 5))
    mu = encode(model, x).mu
    assert np.all(np.abs(mu) <= 3.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 50.0))
def test_vae_ldp_std_is_floored(seed, bound):
    model = _ldp_model(bound, seed)
    sigma = encode(model, 10 * Rng(seed).normal((20, 5))).sigma
    assert np.all(sigma >= bound)


def test_vae_ldp_zero_floor_is_plain_std():
    model = _ldp_model(0.0)
    x = Rng(3).uniform(0, 1, (10, 5))
    raw = model.encoder.forward(x, keep=False)
    np.testing.assert_allclose(encode(model, x).sigma, np.exp(0.5 * raw[:, 3:]), rtol=1e-15)


def test_vae_ldp_huge_floor_hides_input():
    model = _ldp_model(1e6, data_dim=5, latent=3)
    a = np.zeros((1, 5))
    b = np.ones((1, 5))
    out_a = perturb_via_vae_ldp(model, np.repeat(a, 2000, axis=0), Rng(4))
    out_b = perturb_via_vae_ldp(model, np.repeat(b, 2000, axis=0), Rng(5))
    for j in range(5):
        assert stats.ks_2samp(out_a[:, j], out_b[:, j], method="asymp").pvalue > 0.001


def test_perturb_needs_vae_ldp_mode():
    model = VaeModel.create(VaeConfig(data_dim=3, latent_dim=1, hidden=()), Rng(0))
    with pytest.raises(StateError):
        perturb_via_vae_ldp(model, np.zeros((1, 3)), Rng(0))


def test_model_round_trip(tmp_path):
    model = _ldp_model(0.5)
    save_model(tmp_path / "m", model, note=1)
    back, manifest = load_model(tmp_path / "m")
    assert manifest["note"] == 1 and manifest["mode"] == "vae_ldp"
    assert back.config == model.config
    assert _params_equal(back, model)
