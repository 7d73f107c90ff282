import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sae import autodiff as ad
from sae import vae
from sae.exceptions import (CorruptFileError, DimMismatchError, HashMismatchError,
                            ShapeMismatchError, VersionUnsupportedError)
from sae.graph import lattice_graph
from sae.priors import generate_training_set


def zero_model(d, j=None):
    m = vae.init_vae(d, seed=0, latent_dim=j)
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    return m


@pytest.fixture(scope="module")
def small_trained():
    g = lattice_graph(3, 3)
    ts = generate_training_set(g, 3000, "univariate", rng=5)
    model = vae.init_vae(ts.dim, seed=1)
    cfg = vae.TrainConfig(epochs=60, batch_size=128, learning_rate=3e-3, seed=2, patience=10)
    trained, trace = vae.train(model, ts, cfg)
    return g, ts, trained, trace


def test_init_dims_and_alpha():
    m = vae.init_vae(100, seed=3)
    assert (m.input_dim, m.hidden_dim, m.latent_dim) == (100, 100, 100)
    assert m.alpha == pytest.approx(0.01)
    for k in ("enc_W1", "enc_Wmu", "enc_Wlv", "dec_W1", "dec_Wout"):
        assert m.params[k].shape == (100, 100)
    lim = np.sqrt(6.0 / 200)
    assert np.abs(m.params["enc_W1"]).max() <= lim


def test_init_scalar_network():
    m = vae.init_vae(1, seed=0)
    assert m.alpha == 1.0
    assert m.params["dec_Wout"].shape == (1, 1)


def test_init_deterministic_and_rejects_zero_dim():
    a, b = vae.init_vae(7, seed=11), vae.init_vae(7, seed=11)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    with pytest.raises(DimMismatchError):
        vae.init_vae(0)


def test_encode_zero_weights(rng):
    mu, lv = vae.encode(zero_model(5), rng.normal(size=(4, 5)))
    assert np.all(mu == 0) and np.all(lv == 0)


def test_encode_identical_rows_and_large_inputs(rng):
    m = vae.init_vae(6, seed=4)
    x = rng.normal(size=(1, 6))
    mu, lv = vae.encode(m, np.vstack([x, x]))
    np.testing.assert_array_equal(mu[0], mu[1])
    np.testing.assert_array_equal(lv[0], lv[1])
    mu, lv = vae.encode(m, rng.uniform(-1e3, 1e3, size=(50, 6)))
    assert np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))
    with pytest.raises(ShapeMismatchError):
        vae.encode(m, np.zeros((2, 5)))


def test_reparameterize_limits(rng):
    mu = rng.normal(size=(3, 2))
    np.testing.assert_allclose(vae.reparameterize(mu, np.full((3, 2), -np.inf), rng), mu,
                               atol=1e-6)
    z = vae.reparameterize(np.zeros((100_000, 1)), np.zeros((100_000, 1)), rng)
    assert abs(z.mean()) < 0.02
    assert 0.97 <= z.var() <= 1.03
    np.testing.assert_array_equal(vae.reparameterize(mu, mu, 9), vae.reparameterize(mu, mu, 9))
    with pytest.raises(ShapeMismatchError):
        vae.reparameterize(np.zeros((2, 2)), np.zeros((2, 3)), rng)


def test_decode_zero_weights_returns_bias(rng):
    m = zero_model(4, 2)
    m.params["dec_bout"] = np.array([[1.0, -2.0, 3.0, 0.5]])
    out = vae.decode(m, rng.normal(size=(3, 2)))
    np.testing.assert_array_equal(out, np.repeat(m.params["dec_bout"], 3, axis=0))
    with pytest.raises(ShapeMismatchError):
        vae.decode(m, np.zeros((1, 3)))


def test_decode_matches_formula(rng):
    m = vae.init_vae(5, seed=2, latent_dim=3)
    z = rng.normal(size=(4, 3))
    p = m.params
    h = z @ p["dec_W1"] + p["dec_b1"]
    h = np.where(h > 0, h, np.exp(h) - 1)
    np.testing.assert_allclose(vae.decode(m, z), h @ p["dec_Wout"] + p["dec_bout"], rtol=1e-13)


def test_elbo_kl_zero_at_prior(rng):
    m = zero_model(3)
    value, kl, recon = vae.elbo(m, rng.normal(size=(5, 3)), rng=rng)
    assert kl == 0.0
    assert value == pytest.approx(recon)


def test_elbo_perfect_reconstruction():
    m = zero_model(3)
    x = np.array([[0.3, -1.0, 2.0]])
    m.params["dec_bout"] = x.copy()
    value, kl, recon = vae.elbo(m, x, rng=0)
    assert recon == pytest.approx(-1.5 * np.log(2 * np.pi), rel=1e-14)


def test_elbo_linear_in_alpha(rng):
    m = vae.init_vae(4, seed=7)
    x = rng.normal(size=(6, 4))
    eps = rng.normal(size=(1, 6, 4))
    v1, kl1, r1 = vae.elbo(m, x, eps=eps)
    m2 = m.copy()
    m2.alpha *= 2
    v2, kl2, r2 = vae.elbo(m2, x, eps=eps)
    assert r1 == r2 and kl1 == kl2
    assert (r2 - v2) == pytest.approx(2 * (r1 - v1), rel=1e-12)


def test_elbo_recon_matches_direct_evaluation(rng):
    m = vae.init_vae(4, seed=8, latent_dim=2)
    x = rng.normal(size=(5, 4))
    eps = rng.normal(size=(1, 5, 2))
    _, kl, recon = vae.elbo(m, x, eps=eps)
    mu, lv = vae.encode(m, x)
    xhat = vae.decode(m, mu + np.exp(0.5 * lv) * eps[0])
    direct = np.mean(-0.5 * np.sum((x - xhat) ** 2, axis=1) - 2 * np.log(2 * np.pi))
    assert recon == pytest.approx(direct, rel=1e-12)
    assert kl == pytest.approx(np.mean(vae.kl_terms(mu, lv)), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kl_nonnegative_and_zero_only_at_prior(seed):
    r = np.random.default_rng(seed)
    mu = r.normal(size=(8, 3))
    lv = r.normal(size=(8, 3))
    kl = vae.kl_terms(mu, lv)
    assert np.all(kl > 0)
    assert np.all(vae.kl_terms(np.zeros((2, 3)), np.zeros((2, 3))) == 0)


def test_kl_matches_monte_carlo(rng):
    for _ in range(3):
        mu = rng.normal(size=(1, 2))
        lv = rng.normal(scale=0.5, size=(1, 2))
        s = np.exp(0.5 * lv)
        z = mu + s * rng.standard_normal((100_000, 2))
        log_q = np.sum(-0.5 * ((z - mu) / s) ** 2 - np.log(s), axis=1)
        log_p = np.sum(-0.5 * z**2, axis=1)
        d = log_q - log_p
        se = d.std() / np.sqrt(len(d))
        assert abs(d.mean() - vae.kl_terms(mu, lv)[0]) < 3 * se


def test_elbo_gradient_matches_finite_differences(rng):
    m = vae.init_vae(5, seed=3, latent_dim=3, hidden_dim=4)
    g = vae._ElboGraph(m, 6, 1)
    b = dict(m.params)
    b["x"] = rng.normal(size=(6, 5))
    b["alpha"] = np.array([[m.alpha]])
    b["eps0"] = rng.normal(size=(6, 3))
    assert ad.check_gradient(g.root, b, rng=0) < 1e-4


def test_train_zero_learning_rate_keeps_weights(rng):
    x = rng.normal(size=(100, 4))
    m = vae.init_vae(4, seed=0)
    out, trace = vae.train(m, x, vae.TrainConfig(epochs=8, learning_rate=0.0, patience=3,
                                                 ma_window=2))
    for k in m.params:
        np.testing.assert_array_equal(out.params[k], m.params[k])
    assert len(set(trace.elbo)) == 1
    assert len(trace.elbo) == len(trace.kl) == len(trace.recon)


def test_train_deterministic(rng):
    x = rng.normal(size=(200, 4))
    cfg = vae.TrainConfig(epochs=5, batch_size=64, seed=3)
    a, ta = vae.train(vae.init_vae(4, seed=1), x, cfg)
    b, tb = vae.train(vae.init_vae(4, seed=1), x, cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert ta.elbo == tb.elbo


def test_train_dim_mismatch(rng):
    with pytest.raises(DimMismatchError):
        vae.train(vae.init_vae(4), rng.normal(size=(10, 3)))


def test_recenter_and_whiten_keep_reconstruction(rng):
    x = rng.normal(size=(300, 4))
    m = vae.init_vae(4, seed=5)
    eps = rng.normal(size=(1, 300, 4))
    v0, kl0, r0 = vae.elbo(m, x, eps=eps)
    rc = vae.recenter_latent(m.copy(), x)
    v1, kl1, r1 = vae.elbo(rc, x, eps=eps)
    assert r1 == pytest.approx(r0, rel=1e-10)
    assert v1 >= v0 - 1e-12
    # whitening maps the encoder mean exactly; decoded means are preserved
    wh = vae.whiten_latent(m.copy(), x)
    np.testing.assert_allclose(vae.decode(wh, vae.encode(wh, x)[0]),
                               vae.decode(m, vae.encode(m, x)[0]), atol=1e-10)


def test_trained_trace_and_decoder_mean(small_trained):
    _, ts, model, trace = small_trained
    e = np.asarray(trace.elbo)
    assert np.all(np.diff(e) >= 0)
    ma = trace.moving_average(20)
    assert np.all(np.diff(ma) >= 0)
    assert np.isfinite(trace.final_elbo)
    z = np.random.default_rng(0).standard_normal((10_000, model.latent_dim))
    assert np.abs(vae.decode(model, z).mean(axis=0)).max() < 0.1


def test_artifact_round_trip(tmp_path, small_trained, rng):
    g, _, model, _ = small_trained
    art = vae.DecoderArtifact.from_model(model, {"graph_sha256": g.content_hash,
                                                 "layout": "univariate", "K": 1})
    path = tmp_path / "dec.json"
    vae.save_decoder(art, path)
    back = vae.load_decoder(path)
    z = rng.normal(size=(100, model.latent_dim))
    np.testing.assert_array_equal(back.decode(z), vae.decode(model, z))
    assert back.metadata == art.metadata
    back.check_graph(g.content_hash, "univariate", 1)


def test_artifact_expr_matches_decode(small_trained, rng):
    _, _, model, _ = small_trained
    art = vae.DecoderArtifact.from_model(model)
    z = rng.normal(size=(model.latent_dim, 2))
    out = ad.evaluate(art.expr(ad.constant(z)), {})
    np.testing.assert_allclose(out, art.decode(z.T).T, rtol=1e-12, atol=1e-12)


def test_artifact_tamper_and_version(tmp_path, small_trained):
    g, _, model, _ = small_trained
    path = tmp_path / "dec.json"
    vae.save_decoder(vae.DecoderArtifact.from_model(model, {"graph_sha256": "x"}), path)
    doc = json.loads(path.read_text())
    blob = bytearray(__import__("base64").b64decode(doc["blob"]))
    blob[17] ^= 0x01
    doc["blob"] = __import__("base64").b64encode(bytes(blob)).decode()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(CorruptFileError):
        vae.load_decoder(bad)
    doc = json.loads(path.read_text())
    doc["metadata"]["graph_sha256"] = "y"
    bad.write_text(json.dumps(doc))
    with pytest.raises(CorruptFileError):
        vae.load_decoder(bad)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    bad.write_text(json.dumps(doc))
    with pytest.raises(VersionUnsupportedError):
        vae.load_decoder(bad)
    bad.write_text("not json")
    with pytest.raises(CorruptFileError):
        vae.load_decoder(bad)


def test_artifact_hash_mismatch(small_trained):
    g, _, model, _ = small_trained
    art = vae.DecoderArtifact.from_model(model, {"graph_sha256": g.content_hash,
                                                 "layout": "univariate"})
    with pytest.raises(HashMismatchError):
        art.check_graph(lattice_graph(3, 4).content_hash)
    with pytest.raises(HashMismatchError):
        art.check_graph(g.content_hash, "vectorized")


def test_beta_vae_estimator(rng):
    x = rng.normal(size=(200, 3))
    est = vae.BetaVAE(epochs=3, batch_size=50, random_state=0).fit(x)
    assert est.transform(x).shape == (200, 3)
    assert est.sample(5, random_state=1).shape == (5, 3)
    assert np.isfinite(est.score(x))
    art = est.to_decoder(layout="univariate")
    np.testing.assert_array_equal(art.decode(np.ones((1, 3))), est.decode(np.ones((1, 3))))
