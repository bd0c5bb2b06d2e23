import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.stats import kstest, gamma as gamma_dist

from spatialnb.distributions import make_rng
from spatialnb.mcmc import (
    McmcConfig,
    SamplerContext,
    adapt_step,
    draw_beta,
    draw_phi,
    draw_sigma2,
    gibbs_sweep,
    mcse,
    metropolis_tau,
    psrf,
    run_mcmc,
    sample_L,
    write_draws,
)
from spatialnb.model import Dataset, Hyperparams, initial_state
from spatialnb.simulate import Scenario, generate
from spatialnb.spatial import SpatialWeights, mess_apply


class ZeroNormal:
    """Generator stand-in whose normal draws are all zero (exposes conditional means)."""

    def standard_normal(self, shape=None):
        return 0.0 if shape is None else np.zeros(shape)


def single_unit(y=4, x=1.0):
    W = SpatialWeights(sp.csr_matrix((1, 1)), 0)
    return Dataset(np.array([y]), np.zeros((1, 1)), np.array([[x]]), W)


@pytest.fixture(scope="module")
def small():
    data, _ = generate(Scenario(N=60, seed=11), 0)
    return data, Hyperparams.default(data.Q, data.K)


def test_config_retained_count():
    assert McmcConfig(n_iter=40000, burn_in=20000, thin=5, n_chains=2).n_keep == 4000
    with pytest.raises(ValueError):
        McmcConfig(n_iter=10, burn_in=10)
    with pytest.raises(ValueError):
        McmcConfig(thin=0)


def test_sigma2_conditional_without_design():
    # with M = X = 0 only the phi prior informs sigma^-2
    data, _ = generate(Scenario(N=30, seed=2), 0)
    data = Dataset(data.y, np.zeros((30, 1)), np.zeros((30, 1)), data.W)
    hyper = Hyperparams.default(1, 1)
    ctx = SamplerContext(data, hyper)
    s = initial_state(data)
    s.tau = -0.4
    s.phi = make_rng(0).standard_normal(30)
    gen = make_rng(1)
    prec = []
    for _ in range(20000):
        draw_sigma2(s, ctx, gen)
        prec.append(1 / s.sigma2)
    e = mess_apply(-0.4, data.W, s.phi)
    rate = hyper.c_sigma2 + 0.5 * e @ e
    ref = gamma_dist(hyper.b_sigma2 + 15, scale=1 / rate)
    assert kstest(prec, ref.cdf).pvalue > 1e-3


def test_beta_conditional_single_unit():
    data = single_unit(y=4, x=1.0)
    hyper = Hyperparams.default(1, 1)
    ctx = SamplerContext(data, hyper)
    s = initial_state(data)
    s.omega = np.array([1.0])
    s.r = 2.0
    s.mu = np.array([0.3])
    s.Sigma = np.array([[0.5]])
    draw_beta(s, ctx, ZeroNormal())
    z = (4 - 2.0) / (2 * 1.0)
    expected = (1.0 * z + 0.3 / 0.5) / (1.0 + 1 / 0.5)
    assert s.beta[0, 0] == pytest.approx(expected, rel=1e-13)


def test_phi_conditional_mean():
    data, _ = generate(Scenario(N=25, seed=3), 0)
    hyper = Hyperparams.default(data.Q, data.K)
    ctx = SamplerContext(data, hyper)
    s = initial_state(data)
    s.tau, s.sigma2 = 0.5, 0.2
    s.omega = make_rng(2).uniform(0.2, 2, 25)
    draw_phi(s, ctx, ZeroNormal())
    S = np.array([mess_apply(0.5, data.W, e) for e in np.eye(25)]).T
    P = S.T @ S / 0.2 + np.diag(s.omega)
    rhs = 0.5 * (data.y - s.r) - s.omega * (data.M @ s.gamma)
    assert np.allclose(s.phi, np.linalg.solve(P, rhs), atol=1e-10)


def test_cholesky_failure_names_block():
    data, _ = generate(Scenario(N=20, seed=4), 0)
    ctx = SamplerContext(data, Hyperparams.default(data.Q, data.K))
    s = initial_state(data)
    s.sigma2 = -1.0
    with pytest.raises(np.linalg.LinAlgError, match="phi"):
        draw_phi(s, ctx, make_rng(0))


def test_sample_L_trivial():
    for seed in range(10):
        assert sample_L(0, 1.5, make_rng(seed)) == 0
        assert sample_L(1, 1.5, make_rng(seed)) == 1
    draws = [sample_L(6, 0.8, make_rng(seed)) for seed in range(200)]
    assert min(draws) >= 1 and max(draws) <= 6


def test_metropolis_zero_step_always_accepts(small):
    data, hyper = small
    ctx = SamplerContext(data, hyper)
    s = initial_state(data)
    s.tau = 0.5
    s.phi = make_rng(0).standard_normal(data.N)
    gen = make_rng(1)
    for _ in range(100):
        tau, acc = metropolis_tau(s, hyper, 1e-40, gen, ctx=ctx)
        assert acc and tau == 0.5


def test_metropolis_prior_only_when_phi_zero(small):
    data, hyper = small
    ctx = SamplerContext(data, hyper)
    s = initial_state(data)
    s.phi = np.zeros(data.N)
    gen = make_rng(3)
    taus = []
    for _ in range(40000):
        s.tau, _ = metropolis_tau(s, hyper, 2.0, gen, ctx=ctx)
        taus.append(s.tau)
    taus = np.array(taus)
    assert abs(taus.mean() - hyper.zeta_tau) < 0.05
    assert abs(taus.var() - hyper.sigma2_tau) < 0.05


def test_metropolis_requires_context_or_data(small):
    data, hyper = small
    s = initial_state(data)
    with pytest.raises(ValueError):
        metropolis_tau(s, hyper, 0.1, make_rng(0))
    with pytest.raises(ValueError):
        metropolis_tau(s, hyper, 0.0, make_rng(0), data=data)
    tau, acc = metropolis_tau(s, hyper, 0.1, make_rng(0), data=data)
    assert isinstance(acc, bool)


def test_adapt_step_direction():
    assert adapt_step(0.1, [1] * 50, 1) > 0.1
    assert adapt_step(0.1, [0] * 50, 1) < 0.1
    hist = [1] * 22 + [0] * 28
    assert adapt_step(0.1, hist, 3) == pytest.approx(0.1, rel=1e-15)
    # the increment decays with the window index
    assert adapt_step(0.1, [1] * 50, 100) < adapt_step(0.1, [1] * 50, 1)


def test_gibbs_sweep_leaves_input_untouched(small):
    data, hyper = small
    s0 = initial_state(data)
    s1 = gibbs_sweep(s0, data, hyper, make_rng(0))
    assert np.all(s0.phi == 0) and s0.r == 1.0
    assert not np.all(s1.phi == 0)
    s2 = gibbs_sweep(s0, data, hyper, make_rng(0))
    assert np.array_equal(s1.phi, s2.phi) and s1.tau == s2.tau


def test_run_mcmc_shapes_and_determinism(small, tmp_path):
    data, hyper = small
    cfg = McmcConfig(n_chains=2, n_iter=80, burn_in=20, thin=3, seed=5)
    a = run_mcmc(data, hyper, cfg)
    b = run_mcmc(data, hyper, cfg)
    assert a["gamma"].shape == (2, 20, data.Q)
    assert a["Sigma"].shape == (2, 20, data.K, data.K)
    assert a["psi"].shape == (2, 20, data.N)
    assert a["tau"].shape == (2, 20)
    for k in a.draws:
        assert np.array_equal(a[k], b[k])
    assert not np.array_equal(a["gamma"][0], a["gamma"][1])
    assert 0 <= a.acceptance_rate_tau <= 1
    assert set(a.psrf) >= {"gamma", "mu", "r", "tau"}
    paths = write_draws(a, tmp_path)
    assert (tmp_path / "draws_gamma.csv").exists() and not (tmp_path / "draws_psi.csv").exists()
    lines = (tmp_path / "draws_tau.csv").read_text().splitlines()
    assert lines[0] == "chain,iteration,tau" and len(lines) == 41
    assert lines[1].split(",")[1] == "23"
    assert len(paths) == len(a.draws) - 1


def test_run_mcmc_parallel_matches_serial(small):
    data, hyper = small
    cfg = McmcConfig(n_chains=2, n_iter=30, burn_in=10, thin=2, seed=8)
    serial = run_mcmc(data, hyper, cfg)
    par = run_mcmc(data, hyper, McmcConfig(n_chains=2, n_iter=30, burn_in=10, thin=2, seed=8, n_workers=2))
    for k in serial.draws:
        assert np.array_equal(serial[k], par[k])


def test_acceptance_rate_adapts():
    data, _ = generate(Scenario(N=100, tau=0.7, sigma=0.4, seed=6), 0)
    hyper = Hyperparams.default(data.Q, data.K)
    post = run_mcmc(data, hyper, McmcConfig(n_chains=1, n_iter=6000, burn_in=3000, thin=5, seed=1, store_psi=False))
    assert 0.34 <= post.acceptance_rate_tau <= 0.54


def test_psrf_cases():
    x = make_rng(0).standard_normal(500)
    assert psrf(np.stack([x, x])) < 1.001
    far = np.stack([x, x + 10])
    assert psrf(far) > 1.1
    with pytest.raises(ValueError):
        psrf(x[None, :])
    with pytest.raises(ValueError):
        psrf(np.zeros((2, 5)))
    multi = psrf(np.stack([np.column_stack([x, x]), np.column_stack([x, x + 10])]))
    assert multi.shape == (2,) and multi[0] < 1.001 and multi[1] > 1.1


def test_mcse_iid():
    x = make_rng(1).standard_normal((2, 40000))
    se = mcse(x)
    assert se == pytest.approx(1 / math.sqrt(80000), rel=0.2)
