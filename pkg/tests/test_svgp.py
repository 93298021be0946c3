import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfgp import svgp
from mfgp.errors import DimensionMismatch
from mfgp.gp_exact import ExactGP
from mfgp.kernels import RBF


def _layer(m, d_in=1, d_out=1, jitter=svgp.DEFAULT_JITTER, seed=0):
    rng = np.random.default_rng(seed)
    layer = svgp.SvgpLayer(RBF(d_in), m, d_out, jitter)
    return layer, layer.init_params(rng.uniform(size=(m, d_in)), q_sqrt_scale=1.0), rng


def titsias_optimum(kp, x, y, noise):
    """Optimal whitened q(v) for a full-rank layer with Z = X (closed form)."""
    K = np.asarray(RBF(x.shape[1]).K(kp, x))
    L = np.linalg.cholesky(K)
    A = np.linalg.inv(K + noise * np.eye(len(x)))
    mu = L.T @ A @ y
    S = np.eye(len(x)) - L.T @ A @ L  # = (I + L^T L / noise)^-1
    return mu[:, None], np.linalg.cholesky(S)


def test_whitened_prior_gives_prior_marginals():
    layer, p, rng = _layer(6)
    x = rng.uniform(-1, 2, size=(15, 1))
    mean, var = svgp.layer_posterior(layer, p, x)
    np.testing.assert_allclose(mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(var[:, 0], layer.kernel.K_diag(p["kernel"], x), atol=1e-10)
    assert float(svgp.kl_term(layer, p)) == 0.0


def test_single_inducing_point_closed_form():
    layer = svgp.SvgpLayer(RBF(1), 1, jitter=0.0)
    p = layer.init_params(np.array([[0.2]]), q_mu=np.array([[1.7]]))
    x = np.array([[0.0], [0.9]])
    kzn = np.exp(-0.5 * (x[:, 0] - 0.2) ** 2)
    mean, _ = svgp.layer_posterior(layer, p, x)
    np.testing.assert_allclose(mean[:, 0], kzn / 1.0 * 1.7, rtol=1e-12)


def test_full_rank_optimum_matches_exact_gp():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(10, 1))
    y = np.sin(5 * x[:, 0])
    noise = 0.05
    kp = {"log_variance": np.array(0.2), "log_lengthscales": np.array([np.log(0.4)])}
    mu, Lq = titsias_optimum(kp, x, y, noise)
    layer = svgp.SvgpLayer(RBF(1), 10, jitter=0.0)
    p = {"kernel": kp, "q_mu": mu, "q_sqrt": svgp.pack_q_sqrt(Lq), "z": x}
    xs = np.linspace(-0.2, 1.2, 25)[:, None]
    mean, var = svgp.layer_posterior(layer, p, xs)
    gp = ExactGP(x, y, RBF(1), kp, log_noise=np.log(noise))
    gm, gv = gp.predict(xs)
    np.testing.assert_allclose(mean[:, 0], gm, atol=1e-6)
    np.testing.assert_allclose(var[:, 0], gv, atol=1e-6)


def test_kl_closed_forms():
    layer = svgp.SvgpLayer(RBF(1), 1)
    p = layer.init_params(np.array([[0.0]]), q_mu=np.array([[1.0]]), q_sqrt_scale=1.0)
    assert float(svgp.kl_term(layer, p)) == pytest.approx(0.5, abs=1e-12)
    p = layer.init_params(np.array([[0.0]]), q_mu=np.array([[0.3]]), q_sqrt_scale=0.5)
    want = 0.5 * (0.09 + 0.25 - 1 - np.log(0.25))
    assert float(svgp.kl_term(layer, p)) == pytest.approx(want, abs=1e-12)


def test_kl_matches_dense_formula_and_is_nonnegative():
    rng = np.random.default_rng(9)
    layer = svgp.SvgpLayer(RBF(1), 5, d_out=2)
    base = layer.init_params(rng.uniform(size=(5, 1)))
    for _ in range(1000):
        mu = rng.normal(size=(5, 2))
        packed = rng.normal(scale=0.7, size=(2, 15))
        kl = float(svgp.kl_term(layer, {**base, "q_mu": mu, "q_sqrt": packed}))
        assert kl >= 0.0
    Lq = np.asarray(svgp.unpack_q_sqrt(packed, 5))
    want = 0.0
    for d in range(2):
        S = Lq[d] @ Lq[d].T
        want += 0.5 * (np.trace(S) + mu[:, d] @ mu[:, d] - 5 - np.linalg.slogdet(S)[1])
    assert kl == pytest.approx(want, rel=1e-10)


@given(st.integers(0, 10**6), st.integers(1, 6))
def test_pack_unpack_roundtrip(seed, m):
    rng = np.random.default_rng(seed)
    packed = rng.normal(size=(2, svgp.packed_size(m)))
    back = svgp.pack_q_sqrt(np.asarray(svgp.unpack_q_sqrt(packed, m)))
    np.testing.assert_allclose(back, packed, atol=1e-12)


def test_full_cov_diagonal_matches_marginals():
    layer, p, rng = _layer(5, d_out=2)
    p["q_mu"] = rng.normal(size=(5, 2))
    p["q_sqrt"] = rng.normal(scale=0.3, size=(2, 15))
    x = rng.uniform(size=(7, 1))
    mean, var = svgp.layer_posterior(layer, p, x)
    mean2, cov = svgp.layer_posterior(layer, p, x, full_cov=True)
    np.testing.assert_allclose(mean, mean2)
    np.testing.assert_allclose(np.diagonal(cov, axis1=1, axis2=2).T, var, atol=1e-12)


def test_sample_at_zero_noise_is_mean_and_deterministic():
    layer, p, rng = _layer(4)
    x = rng.uniform(size=(6, 1))
    mean, _ = svgp.layer_posterior(layer, p, x)
    np.testing.assert_array_equal(svgp.sample(layer, p, x, np.zeros((6, 1))), np.asarray(mean))
    eps = rng.normal(size=(6, 1))
    a, b = svgp.sample(layer, p, x, eps), svgp.sample(layer, p, x, eps)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(DimensionMismatch):
        svgp.sample(layer, p, x, np.zeros((5, 1)))


def test_sample_variance_matches_marginal():
    layer, p, rng = _layer(4)
    p["q_sqrt"] = rng.normal(scale=0.3, size=(1, 10))
    x = np.array([[0.37]])
    n = 100_000
    eps = rng.normal(size=(n, 1))
    mean, var = (np.asarray(a)[0, 0] for a in svgp.layer_posterior(layer, p, x))
    draws = np.asarray(svgp.reparameterize(mean, var, eps))[:, 0]
    se = var * np.sqrt(2.0 / (n - 1))
    assert abs(draws.var(ddof=1) - var) < 3 * se


def test_variance_nonnegative_after_clamp():
    layer, p, rng = _layer(8, jitter=1e-6)
    x = np.vstack([p["z"], rng.uniform(size=(20, 1))])
    draws = svgp.sample(layer, {**p, "q_sqrt": svgp.pack_q_sqrt(1e-8 * np.eye(8))}, x,
                        np.ones((28, 1)))
    assert np.all(np.isfinite(draws))


def test_input_dimension_checked():
    layer, p, _ = _layer(3)
    with pytest.raises(DimensionMismatch):
        svgp.layer_posterior(layer, p, jnp.zeros((2, 2)))
