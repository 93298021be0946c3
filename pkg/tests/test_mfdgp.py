import itertools
import logging

import jax
import numpy as np
import pytest
from scipy.integrate import trapezoid

from mfgp import benchmarks as bm
from mfgp import svgp
from mfgp.data import MultiFidelityDataset, Scaling
from mfgp.densities import gaussian_log_density, mixture_log_density
from mfgp.diff import ParamVector
from mfgp.errors import ConfigError, DimensionMismatch, UnknownFidelity
from mfgp.gp_exact import ExactGP
from mfgp.kernels import RBF, MfComposite
from mfgp.mfdgp import MFDGP, MfdgpConfig, MiniBatchSpec, TrainingSchedule

LOG_2PI = np.log(2 * np.pi)


def _set(model, **segments):
    vals = model.params.as_dict()
    for k, v in segments.items():
        vals[k.replace("__", ".")] = np.asarray(v, dtype=float).reshape(np.shape(vals[k.replace("__", ".")]))
    model.params = ParamVector(model.layout.pack(vals), model.layout)


@pytest.fixture(scope="module")
def linear_a():
    return bm.generate_dataset("linear-a", (20, 8), 0)


@pytest.fixture(scope="module")
def trained_linear_a(linear_a):
    model = MFDGP(linear_a.data, MfdgpConfig(seed=0))
    model.train(TrainingSchedule(300, 700, 0.01, 0.01))
    return model


def _single_level(n=10, seed=4):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(size=(n, 1)), axis=0)
    y = np.sin(5 * x) + 0.1 * rng.normal(size=(n, 1))
    return MultiFidelityDataset((x,), (y,))


def _full_rank_model(noise=0.05):
    """T=1, M=N, Z=X with the closed-form optimal q(v); jitter 0."""
    data = _single_level()
    model = MFDGP(data, MfdgpConfig(num_inducing=10, jitter=0.0), scaling=Scaling.identity(1))
    x, y = model.data.xs[0], model.data.ys[0][:, 0]
    kp = {"log_variance": np.array(0.2), "log_lengthscales": np.array([np.log(0.4)])}
    K = np.asarray(RBF(1).K(kp, x))
    L = np.linalg.cholesky(K)
    A = np.linalg.inv(K + noise * np.eye(10))
    mu = L.T @ A @ y
    S = np.eye(10) - L.T @ A @ L
    _set(model, layer1__z=x, layer1__q_mu=mu, layer1__q_sqrt=svgp.pack_q_sqrt(np.linalg.cholesky(S)),
         layer1__kernel__log_variance=kp["log_variance"],
         layer1__kernel__log_lengthscales=kp["log_lengthscales"],
         noise__level1=np.log(noise))
    gp = ExactGP(x, y, RBF(1), kp, log_noise=np.log(noise))
    return model, gp


# ------------------------------------------------------------ construction

def test_single_level_is_plain_svgp():
    model = MFDGP(_single_level())
    assert len(model.layers) == 1 and isinstance(model.layers[0].kernel, RBF)
    assert model.fixed_z == {}


def test_layer_two_inducing_points_are_level_one_pairs():
    gen = bm.generate_dataset("linear-a", (20, 8), 3)
    model = MFDGP(gen.data, MfdgpConfig(num_inducing=(20, 20)))
    assert isinstance(model.layers[1].kernel, MfComposite)
    want = np.hstack([model.data.xs[0], model.data.ys[0]])
    np.testing.assert_array_equal(model.fixed_z[2], want)


def test_initialization_is_deterministic(linear_a):
    a = MFDGP(linear_a.data, MfdgpConfig(seed=5))
    b = MFDGP(linear_a.data, MfdgpConfig(seed=5))
    assert a.params.values.tobytes() == b.params.values.tobytes()


def test_default_inducing_count_and_clamp(linear_a, caplog):
    model = MFDGP(linear_a.data)
    assert [l.num_inducing for l in model.layers] == [20, 20]
    with caplog.at_level(logging.WARNING, logger="mfgp.mfdgp"):
        clamped = MFDGP(linear_a.data, MfdgpConfig(num_inducing=(50, 5)))
    assert [l.num_inducing for l in clamped.layers] == [20, 5]
    assert "clamping" in caplog.text


def test_lower_layer_mean_starts_at_regularized_interpolant(linear_a):
    model = MFDGP(linear_a.data)
    layers, _ = model.unpack(model.params.values)
    x, y = model.data.xs[0], model.data.ys[0]
    mean, _ = svgp.layer_posterior(model.layers[0], layers[0], x)
    K = np.asarray(RBF(1).K(layers[0]["kernel"], x))
    want = K @ np.linalg.solve(K + np.exp(model.config.log_noise) * np.eye(len(x)), y)
    # the layer's constant 1e-6 jitter on a near-singular K_zz shifts values by ~1e-5
    np.testing.assert_allclose(np.asarray(mean), want, atol=1e-4)


# --------------------------------------------------------------- objective

def test_prior_state_has_zero_kl(linear_a):
    model = MFDGP(linear_a.data)
    vals = {}
    for name in model.layout.names:
        if name.endswith("q_mu") or name.endswith("q_sqrt"):
            vals[name.replace(".", "__")] = np.zeros(model.layout[name].shape)
    _set(model, **vals)
    assert float(model.kl()) == 0.0


def test_kl_decomposes_over_layers(trained_linear_a):
    m = trained_linear_a
    layers, _ = m.unpack(m.params.values)
    per_layer = [float(svgp.kl_term(l, p)) for l, p in zip(m.layers, layers)]
    assert float(m.kl()) == pytest.approx(sum(per_layer), rel=1e-14)
    eps = m.draw_eps(jax.random.PRNGKey(0), m.data.counts)
    fit = 0.0
    _, noises = m.unpack(m.params.values)
    for t, (x, y, _) in enumerate(m.full_batch(), start=1):
        fit += float(np.sum(m._expected_loglik(layers, noises, t, x, y, eps[t - 1])))
    assert float(m.elbo(eps=eps)) == pytest.approx(fit - sum(per_layer), rel=1e-12)


def test_single_layer_elbo_matches_standalone_oracle():
    rng = np.random.default_rng(0)
    model = MFDGP(_single_level(), MfdgpConfig(num_inducing=6))
    _set(model, layer1__q_mu=rng.normal(size=(6, 1)),
         layer1__q_sqrt=rng.normal(scale=0.3, size=(1, 21)), noise__level1=np.log(0.07))
    layers, _ = model.unpack(model.params.values)
    p = layers[0]
    kp = {k: np.asarray(v) for k, v in p["kernel"].items()}
    x, y, z = model.data.xs[0], model.data.ys[0][:, 0], np.asarray(p["z"])
    # independent dense computation of the sparse variational bound
    rbf = lambda a, b: np.exp(kp["log_variance"]) * np.exp(  # noqa: E731
        -0.5 * ((a[:, None, 0] - b[None, :, 0]) / np.exp(kp["log_lengthscales"][0])) ** 2)
    Kzz = rbf(z, z) + 1e-6 * np.eye(6)
    Kzx = rbf(z, x)
    L = np.linalg.cholesky(Kzz)
    A = np.linalg.solve(L, Kzx)
    Lq = np.asarray(svgp.unpack_q_sqrt(p["q_sqrt"], 6))[0]
    mu = np.asarray(p["q_mu"])[:, 0]
    mean = A.T @ mu
    var = np.exp(kp["log_variance"]) - np.sum(A**2, 0) + np.sum((Lq.T @ A) ** 2, 0)
    s2 = 0.07
    ell = -0.5 * LOG_2PI - 0.5 * np.log(s2) - 0.5 * ((y - mean) ** 2 + var) / s2
    S = Lq @ Lq.T
    kl = 0.5 * (np.trace(S) + mu @ mu - 6 - np.linalg.slogdet(S)[1])
    assert float(model.elbo()) == pytest.approx(np.sum(ell) - kl, rel=1e-10)


def test_full_rank_elbo_equals_log_marginal_likelihood():
    model, gp = _full_rank_model()
    assert float(model.elbo()) == pytest.approx(-gp.nlml(), abs=1e-5)
    xs = np.linspace(-0.1, 1.1, 30)[:, None]
    _, mean, var = model.predict(xs, level=1)
    gm, gv = gp.predict(xs)
    np.testing.assert_allclose(mean[:, 0], gm, atol=1e-6)
    np.testing.assert_allclose(var[:, 0], gv, atol=1e-6)


def test_more_samples_reduce_estimator_variance(trained_linear_a):
    m = trained_linear_a
    est = {1: [], 64: []}
    for i in range(200):
        key = jax.random.PRNGKey(i)
        for S in est:
            est[S].append(float(m.elbo(eps=m.draw_eps(key, m.data.counts, S))))
    assert np.var(est[64]) < np.var(est[1])


def test_minibatch_average_over_all_subsets_equals_full_batch():
    rng = np.random.default_rng(8)
    x1, x2 = rng.uniform(size=(6, 1)), rng.uniform(size=(3, 1))
    data = MultiFidelityDataset((x1, x2), (np.sin(4 * x1), 2 * np.sin(4 * x2) + x2))
    m = MFDGP(data, MfdgpConfig(num_inducing=(4, 4), samples_train=3))
    theta = m.params.values + rng.normal(scale=0.1, size=m.layout.size)
    eps = m.draw_eps(jax.random.PRNGKey(1), m.data.counts)
    (xa, ya, _), (xb, yb, _) = m.full_batch()
    full = float(m.elbo(theta, eps=eps))
    for B in (1, 2, 4):
        vals = []
        for idx in itertools.combinations(range(6), B):
            idx = np.array(idx)
            batch = [(xa[idx], ya[idx], 6 / B), (xb, yb, 1.0)]
            vals.append(float(m.elbo(theta, batch, [eps[0][:, idx], eps[1]])))
        assert np.mean(vals) == pytest.approx(full, abs=1e-10)


def test_stochastic_loss_uses_subset_scaling():
    gen = bm.generate_dataset("currin", (40, 5), 0)
    m = MFDGP(gen.data)
    loss = m.stochastic_loss(MiniBatchSpec((10, None)))
    vals = [float(loss(m.params.values, jax.random.PRNGKey(i))) for i in range(3)]
    assert len(set(vals)) == 3 and all(np.isfinite(vals))
    full = m.stochastic_loss()
    assert np.isfinite(float(full(m.params.values, jax.random.PRNGKey(0))))


def test_batch_spec_validation():
    assert MiniBatchSpec((10, None)).resolve((100, 7)) == (10, 7)
    assert MiniBatchSpec.subsample_lower(3, 5).resolve((4, 9, 9)) == (4, 5, 9)
    with pytest.raises(ConfigError):
        MiniBatchSpec((1,)).resolve((3, 3))
    with pytest.raises(ConfigError):
        MiniBatchSpec((0, None)).resolve((3, 3))
    with pytest.raises(ConfigError):
        TrainingSchedule(-1, 5)
    with pytest.raises(ConfigError):
        TrainingSchedule(5, 5, lr1=0.0)


# ---------------------------------------------------------------- training

def test_phase_one_freezes_the_listed_segments(linear_a):
    m = MFDGP(linear_a.data)
    before = m.params.as_dict()
    m.train(TrainingSchedule(150, 0))
    after = m.params.as_dict()
    for name in m.phase1_frozen():
        assert after[name].tobytes() == before[name].tobytes(), name
    assert not np.array_equal(after["layer2.q_mu"], before["layer2.q_mu"])
    assert not np.array_equal(after["layer1.kernel.log_variance"],
                              before["layer1.kernel.log_variance"])


def test_phase_two_only_schedule_runs(linear_a):
    m = MFDGP(linear_a.data)
    res = m.train(TrainingSchedule(0, 50, trace_every=10))
    assert res.history.shape == (50,) and not res.diverged
    assert [r["phase"] for r in res.trace] == [2] * 5


def test_training_is_reproducible(linear_a):
    a, b = MFDGP(linear_a.data), MFDGP(linear_a.data)
    a.train(TrainingSchedule(50, 50))
    b.train(TrainingSchedule(50, 50))
    assert a.params.values.tobytes() == b.params.values.tobytes()


def test_elbo_improves_over_default_schedule(linear_a):
    m = MFDGP(linear_a.data)
    res = m.train()
    h = res.history
    smooth = np.convolve(h, np.ones(50) / 50, mode="valid")
    assert smooth[-1] > smooth[100 - 49]
    lrs = {r["step"]: r["lr"] for r in res.trace}
    assert lrs[4900] == 0.003 and lrs[5000] == 0.001


# -------------------------------------------------------------- prediction

def test_level_one_prediction_is_layer_posterior(trained_linear_a):
    m = trained_linear_a
    xs = np.linspace(0, 1, 9)[:, None]
    _, mean, var = m.predict(xs, level=1)
    layers, _ = m.unpack(m.params.values)
    lm, lv = svgp.layer_posterior(m.layers[0], layers[0], m.scaling.x(xs))
    c = m.scaling.y_scale
    np.testing.assert_array_equal(mean, np.asarray(lm) * c)
    np.testing.assert_array_equal(var, np.maximum(np.asarray(lv), 0) * c**2)


def test_zero_noise_prediction_is_mean_chain(trained_linear_a):
    m = trained_linear_a
    xs = np.linspace(0, 1, 9)[:, None]
    _, mean, var = m.predict(xs, s=1, eps=np.zeros((1, 9, 2, 1)))
    layers, _ = m.unpack(m.params.values)
    x = m.scaling.x(xs)
    m1, _ = svgp.layer_posterior(m.layers[0], layers[0], x)
    m2, v2 = svgp.layer_posterior(m.layers[1], layers[1], np.hstack([x, np.asarray(m1)]))
    c = m.scaling.y_scale
    np.testing.assert_allclose(mean, np.asarray(m2) * c, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(var, np.asarray(v2) * c**2, rtol=1e-12, atol=1e-12)
    ld = m.log_density(xs, np.zeros(9), s=1, eps=np.zeros((1, 9, 2, 1)))
    want = gaussian_log_density(0.0, mean[:, 0], var[:, 0] + m.noise_variance(2))
    np.testing.assert_allclose(ld, want, rtol=1e-12)


def test_unit_gaussian_log_density():
    assert mixture_log_density(0.0, np.zeros((1, 1)), np.ones((1, 1)))[0] == pytest.approx(
        -0.91894, abs=1e-5)


def test_predictive_density_integrates_to_one(trained_linear_a):
    m = trained_linear_a
    s = 50
    eps1 = np.random.default_rng(0).standard_normal((s, 1, 2, 1))
    comp_m, comp_v, _ = m._components(np.array([[0.63]]), 2, s, 0, eps1)
    c = m.scaling.y_scale
    sd = np.sqrt(comp_v[:, 0, 0] + float(np.exp(m.params.segment("noise.level2")))) * c
    centres = comp_m[:, 0, 0] * c
    grid = np.arange(centres.min() - 12 * sd.max(), centres.max() + 12 * sd.max(), sd.min() / 20)
    eps = np.broadcast_to(eps1, (s, grid.size, 2, 1))
    dens = np.exp(m.log_density(np.full((grid.size, 1), 0.63), grid, s=s, eps=eps))
    assert trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


def _moments(m, v):
    """Mixture mean and variance along the sample axis (axis -2)."""
    return m.mean(-2), v.mean(-2) + m.var(-2)


def test_monte_carlo_moments_converge():
    gen = bm.generate_dataset("nonlinear-a", (50, 14), 0)
    model = MFDGP(gen.data)
    model.train(TrainingSchedule(300, 300, 0.01, 0.01))
    x, _ = bm.test_grid("nonlinear-a", 200, 0)
    # MC standard error of the s=100 estimator, measured over 200 independent replicates
    m, v, _ = model._components(x, 2, 20_000, 7, None)
    reps = _moments(m[..., 0].reshape(200, 100, -1), v[..., 0].reshape(200, 100, -1))
    se_mean, se_var = reps[0].std(0), reps[1].std(0)
    small = _moments(*(a[..., 0] for a in model._components(x, 2, 100, 1, None)[:2]))
    big = _moments(*(a[..., 0] for a in model._components(x, 2, 10_000, 2, None)[:2]))
    # per-point 3-SE agreement; ~99% expected, a couple of 200 points may fall outside
    assert np.mean(np.abs(small[0] - big[0]) <= 3 * se_mean) >= 0.97
    assert np.mean(np.abs(small[1] - big[1]) <= 3 * se_var) >= 0.97


def test_lower_level_prediction_ignores_higher_layers():
    gen = bm.generate_dataset("hartmann3d", (15, 10, 6), 0)
    m = MFDGP(gen.data)
    xs = np.random.default_rng(0).uniform(size=(7, 3))
    before = [m.predict(xs, level=l, s=20) for l in (1, 2)]
    rng = np.random.default_rng(1)
    vals = m.params.as_dict()
    for name in vals:
        if name.startswith("layer3") or name == "noise.level3":
            vals[name] = vals[name] + rng.normal(size=np.shape(vals[name]))
    m.params = ParamVector(m.layout.pack(vals), m.layout)
    m.fixed_z[3] = m.fixed_z[3] + 1.0
    after = [m.predict(xs, level=l, s=20) for l in (1, 2)]
    for b, a in zip(before, after):
        for u, v in zip(b, a):
            assert u.tobytes() == v.tobytes()


def test_covariance_consistent_with_marginals(trained_linear_a):
    xs = np.linspace(0, 1, 6)[:, None]
    _, mean, var = trained_linear_a.predict(xs, s=40, seed=3)
    cm, cov = trained_linear_a.predict_cov(xs, s=40, seed=3)
    np.testing.assert_allclose(cm, mean[:, 0], rtol=1e-10)
    np.testing.assert_allclose(np.diag(cov), var[:, 0], rtol=1e-8)
    assert np.allclose(cov, cov.T)


def test_prediction_errors(trained_linear_a):
    with pytest.raises(UnknownFidelity):
        trained_linear_a.predict(np.zeros((2, 1)), level=3)
    with pytest.raises(DimensionMismatch):
        trained_linear_a.predict(np.zeros((2, 2)))
    with pytest.raises(DimensionMismatch):
        trained_linear_a.predict(np.zeros((2, 1)), s=3, eps=np.zeros((3, 2, 1, 1)))


def test_chunked_prediction_matches_single_call(trained_linear_a, monkeypatch):
    from mfgp import mfdgp

    x = np.linspace(0, 1, 7)[:, None]
    whole = trained_linear_a._components(x, 2, 30, 3, None)
    monkeypatch.setattr(mfdgp, "PREDICT_CHUNK_POINTS", 20)  # chunks of 2 samples, last one short
    split = trained_linear_a._components(x, 2, 30, 3, None)
    for a, b in zip(whole, split):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)  # batch shape changes rounding
