"""Successive-conditional (Geweke) harness for the Gibbs blocks.

Each replicate starts from an exact prior draw, then alternates a kernel
step on the parameters with a fresh draw of the data ``(y, omega, L)``
from its conditional given the parameters. If every kernel leaves the
posterior invariant, the parameters at the end of each replicate are
exact prior draws, which is tested against independent prior draws with
two-sample Kolmogorov-Smirnov tests.
"""

import copy
import functools
import math

import numpy as np
from scipy.stats import ks_2samp

from spatialnb.distributions import make_rng, sample_inverse_wishart, sample_polya_gamma
from spatialnb.mcmc import SWEEP_ORDER, SamplerContext, _draw_tau
from spatialnb.model import CrtTable, Dataset, Hyperparams, McmcState
from spatialnb.spatial import knn_weight_matrix, mess_apply

N, Q, K = 20, 2, 2
TAU_STEP = 1.0

# informative enough that prior draws stay in a numerically tame region
HYPER = Hyperparams(
    zeta_mu=np.array([0.2, -0.2]),
    Delta_mu=0.1 * np.eye(K),
    zeta_gamma=np.array([0.0, 0.2]),
    Delta_gamma=0.1 * np.eye(Q),
    zeta_tau=0.3,
    sigma2_tau=0.09,
    b_sigma2=20.0,
    c_sigma2=2.0,
    r0=20.0,
    b0=50.0,
    c0=5.0,
    nu=10.0,
    A=np.array([0.3, 0.3]),
)

SCALARS = {
    "gamma_1": lambda s: s.gamma[0],
    "gamma_2": lambda s: s.gamma[1],
    "beta_11": lambda s: s.beta[0, 0],
    "beta_52": lambda s: s.beta[4, 1],
    "mu_1": lambda s: s.mu[0],
    "mu_2": lambda s: s.mu[1],
    "a_1": lambda s: s.a[0],
    "Sigma_11": lambda s: s.Sigma[0, 0],
    "Sigma_12": lambda s: s.Sigma[0, 1],
    "Sigma_22": lambda s: s.Sigma[1, 1],
    "sigma2": lambda s: s.sigma2,
    "phi_1": lambda s: s.phi[0],
    "phi_sum": lambda s: s.phi.sum(),
    "tau": lambda s: s.tau,
    "r": lambda s: s.r,
    "h": lambda s: s.h,
}


def design(seed=0):
    gen = np.random.default_rng(seed)
    W = knn_weight_matrix(gen.random((N, 2)), 4)
    M = np.column_stack([np.ones(N), gen.standard_normal(N)])
    X = gen.standard_normal((N, K))
    return M, X, W


class Model:
    def __init__(self, seed=0, hyper=HYPER):
        self.M, self.X, self.W = design(seed)
        self.hyper = hyper
        self.ctx = SamplerContext(Dataset(np.zeros(N, dtype=int), self.M, self.X, self.W), hyper)

    def prior(self, gen) -> McmcState:
        h = self.hyper
        gamma = gen.multivariate_normal(h.zeta_gamma, h.Delta_gamma)
        mu = gen.multivariate_normal(h.zeta_mu, h.Delta_mu)
        a = gen.standard_gamma(np.full(K, 0.5)) / h.eta
        Sigma = sample_inverse_wishart(h.rho, 2.0 * h.nu * np.diag(a), gen)
        beta = gen.multivariate_normal(mu, Sigma, size=N)
        tau = h.zeta_tau + math.sqrt(h.sigma2_tau) * gen.standard_normal()
        sigma2 = 1.0 / (gen.standard_gamma(h.b_sigma2) / h.c_sigma2)
        phi = mess_apply(-tau, self.W, math.sqrt(sigma2) * gen.standard_normal(N))
        hh = gen.standard_gamma(h.b0) / h.c0
        r = gen.standard_gamma(h.r0) / hh
        return McmcState(phi=phi, gamma=gamma, beta=beta, mu=mu, a=a, Sigma=Sigma, sigma2=sigma2,
                         omega=np.ones(N), r=r, h=hh, tau=tau, L=np.zeros(N, dtype=np.int64))

    def resimulate(self, s: McmcState, gen) -> SamplerContext:
        """Draw ``y | theta`` then ``omega`` and ``L`` given ``(y, theta)``; returns the matching context."""
        psi = s.psi(self.ctx.data)
        y = gen.poisson(gen.standard_gamma(s.r, N) * np.exp(psi))
        ctx = copy.copy(self.ctx)
        ctx.data = Dataset(y, self.M, self.X, self.W)
        ctx.yf = y.astype(float)
        ctx.crt = CrtTable(y)
        s.omega = sample_polya_gamma(ctx.yf + s.r, psi, gen)
        s.L = ctx.crt.sample(s.r, gen)
        return ctx


# kernels under test and the parameters each one moves; omega only matters
# through the blocks that condition on it, so it is paired with phi
KERNELS = {
    "phi": (["phi"], ["phi_1", "phi_sum"]),
    "gamma": (["gamma"], ["gamma_1", "gamma_2"]),
    "beta": (["beta"], ["beta_11", "beta_52"]),
    "mu": (["mu"], ["mu_1", "mu_2"]),
    "a": (["a"], ["a_1"]),
    "Sigma": (["Sigma"], ["Sigma_11", "Sigma_12", "Sigma_22"]),
    "sigma2": (["sigma2"], ["sigma2"]),
    "L_r": (["L_r"], ["r"]),
    "omega": (["omega", "phi"], ["phi_1", "phi_sum"]),
    "h": (["h"], ["h"]),
    "tau": (["tau"], ["tau"]),
    "sweep": ([b for b, _ in SWEEP_ORDER] + ["tau"], list(SCALARS)),
}


def kernel(order):
    """Run the named blocks in the given order; ``"tau"`` is the Metropolis step."""
    named = dict(SWEEP_ORDER)

    def step(s, ctx, gen):
        for b in order:
            if b == "tau":
                _draw_tau(s, ctx, gen, TAU_STEP)
            else:
                named[b](s, ctx, gen)

    return step


@functools.lru_cache(maxsize=None)
def prior_sample(n_prior, seed):
    model = Model()
    gen = make_rng(seed, 2)
    draws = [model.prior(gen) for _ in range(n_prior)]
    return {name: np.array([f(s) for s in draws]) for name, f in SCALARS.items()}


def run(name, n_rep=400, n_steps=20, n_prior=4000, seed=0):
    """Return ``{parameter: KS p-value}`` for the kernel ``KERNELS[name]``."""
    order, params = KERNELS[name]
    model = Model()
    step = kernel(order)
    gen = make_rng(seed, 1)
    finals = []
    for _ in range(n_rep):
        s = model.prior(gen)
        for _ in range(n_steps):
            ctx = model.resimulate(s, gen)
            step(s, ctx, gen)
        finals.append(s)
    ref = prior_sample(n_prior, seed)
    out = {}
    for p in params:
        a = np.array([SCALARS[p](s) for s in finals])
        out[p] = float(ks_2samp(a, ref[p]).pvalue)
    return out
