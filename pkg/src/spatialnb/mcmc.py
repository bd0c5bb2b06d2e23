"""Pólya-Gamma Gibbs sampler for the spatial negative binomial model."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .distributions import (
    as_generator,
    make_rng,
    sample_inverse_wishart,
    sample_polya_gamma,
)
from .model import CrtTable, Dataset, Hyperparams, McmcState, initial_state
from .spatial import MessGram, mess_apply

__all__ = [
    "McmcConfig",
    "PosteriorDraws",
    "SamplerContext",
    "gibbs_sweep",
    "sample_L",
    "metropolis_tau",
    "adapt_step",
    "run_chain",
    "run_mcmc",
    "psrf",
    "mcse",
    "write_draws",
    "SWEEP_ORDER",
]


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 2
    n_iter: int = 40000
    burn_in: int = 20000
    thin: int = 5
    target_accept: float = 0.44
    seed: int = 0
    adapt_window: int = 50
    initial_step: float = 1.0
    n_workers: int = 1
    store_psi: bool = True

    def __post_init__(self):
        if not (0 <= self.burn_in < self.n_iter):
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.adapt_window < 1 or not self.initial_step > 0:
            raise ValueError("invalid adaptation settings")

    @property
    def n_keep(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


@dataclass
class PosteriorDraws:
    """Retained draws, each array shaped ``(chains, kept, ...)``.

    ``phi_mean`` and ``beta_mean`` hold per-chain posterior means of the
    high-dimensional blocks instead of their full draw history.
    """

    draws: dict
    acceptance_rate_tau: float
    acceptance_by_chain: np.ndarray
    phi_mean: np.ndarray
    beta_mean: np.ndarray
    step_scale: np.ndarray
    config: McmcConfig
    elapsed: float = 0.0
    psrf: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.draws[name]

    def pooled(self, name) -> np.ndarray:
        d = self.draws[name]
        return d.reshape((-1,) + d.shape[2:])

    def mean(self, name) -> np.ndarray:
        return self.pooled(name).mean(axis=0)

    def sd(self, name) -> np.ndarray:
        return self.pooled(name).std(axis=0, ddof=1)


class SamplerContext:
    """Per-dataset quantities reused across sweeps."""

    def __init__(self, data: Dataset, hyper: Hyperparams):
        if hyper.K != data.K or hyper.Q != data.Q:
            raise ValueError("hyperparameter dimensions do not match the data")
        self.data = data
        self.hyper = hyper
        self.yf = data.y.astype(float)
        self.crt = CrtTable(data.y)
        self.gram = MessGram(data.W)
        self._gram_tau = None
        self._gram = None
        self.Delta_gamma_inv = np.linalg.inv(hyper.Delta_gamma)
        self.Delta_mu_inv = np.linalg.inv(hyper.Delta_mu)

    def StS(self, tau: float) -> np.ndarray:
        if tau != self._gram_tau:
            self._gram = self.gram(tau)
            self._gram_tau = tau
        return self._gram

    def S_apply(self, tau: float, v) -> np.ndarray:
        return mess_apply(tau, self.data.W, v)


def _chol(P, name):
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"conditional precision of {name} is not positive definite") from exc


def _gaussian_from_precision(P, rhs, gen, name):
    """Draw from ``N(P^-1 rhs, P^-1)``."""
    L = _chol(P, name)
    mean = scipy.linalg.cho_solve((L, True), rhs)
    z = gen.standard_normal(rhs.shape[0])
    return mean + scipy.linalg.solve_triangular(L.T, z, lower=False)


def _kappa(ctx, s):
    return 0.5 * (ctx.yf - s.r)


def _xb(ctx, s):
    return np.einsum("ik,ik->i", ctx.data.X, s.beta)


def draw_phi(s: McmcState, ctx: SamplerContext, gen) -> None:
    d = ctx.data
    P = ctx.StS(s.tau) / s.sigma2
    P[np.diag_indices_from(P)] += s.omega
    rhs = _kappa(ctx, s) - s.omega * (d.M @ s.gamma + _xb(ctx, s))
    s.phi = _gaussian_from_precision(P, rhs, gen, "phi")


def draw_gamma(s, ctx, gen) -> None:
    d, h = ctx.data, ctx.hyper
    P = d.M.T @ (s.omega[:, None] * d.M) + ctx.Delta_gamma_inv
    rhs = d.M.T @ (_kappa(ctx, s) - s.omega * (_xb(ctx, s) + s.phi)) + ctx.Delta_gamma_inv @ h.zeta_gamma
    s.gamma = _gaussian_from_precision(P, rhs, gen, "gamma")


def draw_beta(s, ctx, gen) -> None:
    d = ctx.data
    X = d.X
    Sinv = np.linalg.inv(s.Sigma)
    P = s.omega[:, None, None] * X[:, :, None] * X[:, None, :] + Sinv
    resid = _kappa(ctx, s) - s.omega * (d.M @ s.gamma + s.phi)
    rhs = resid[:, None] * X + Sinv @ s.mu
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("conditional precision of beta is not positive definite") from exc
    mean = np.linalg.solve(P, rhs[..., None])[..., 0]
    z = gen.standard_normal(X.shape)
    noise = np.linalg.solve(np.swapaxes(L, 1, 2), z[..., None])[..., 0]
    s.beta = mean + noise


def draw_mu(s, ctx, gen) -> None:
    h = ctx.hyper
    Sinv = np.linalg.inv(s.Sigma)
    N = ctx.data.N
    P = N * Sinv + ctx.Delta_mu_inv
    rhs = Sinv @ s.beta.sum(axis=0) + ctx.Delta_mu_inv @ h.zeta_mu
    s.mu = _gaussian_from_precision(P, rhs, gen, "mu")


def draw_a(s, ctx, gen) -> None:
    h = ctx.hyper
    K = h.K
    Sinv = np.linalg.inv(s.Sigma)
    rate = h.eta + h.nu * np.diag(Sinv)
    s.a = gen.standard_gamma(np.full(K, (h.nu + K) / 2.0)) / rate


def draw_Sigma(s, ctx, gen) -> None:
    h = ctx.hyper
    N, K = ctx.data.N, h.K
    dev = s.beta - s.mu
    scale = 2.0 * h.nu * np.diag(s.a) + dev.T @ dev
    s.Sigma = sample_inverse_wishart(h.nu + N + K - 1, scale, gen)


def draw_sigma2(s, ctx, gen) -> None:
    h = ctx.hyper
    e = ctx.S_apply(s.tau, s.phi)
    prec = gen.standard_gamma(h.b_sigma2 + ctx.data.N / 2.0) / (h.c_sigma2 + 0.5 * e @ e)
    s.sigma2 = 1.0 / prec


def draw_L_r(s, ctx, gen) -> None:
    h = ctx.hyper
    s.L = ctx.crt.sample(s.r, gen)
    psi = s.psi(ctx.data)
    rate = s.h + np.sum(np.logaddexp(0.0, psi))
    s.r = gen.standard_gamma(h.r0 + s.L.sum()) / rate


def draw_omega(s, ctx, gen) -> None:
    s.omega = sample_polya_gamma(ctx.yf + s.r, s.psi(ctx.data), gen)


def draw_h(s, ctx, gen) -> None:
    h = ctx.hyper
    s.h = gen.standard_gamma(h.r0 + h.b0) / (s.r + h.c0)


def _log_target_tau(tau, s, ctx):
    h = ctx.hyper
    e = ctx.S_apply(tau, s.phi)
    return -0.5 * (tau - h.zeta_tau) ** 2 / h.sigma2_tau - 0.5 * (e @ e) / s.sigma2


def metropolis_tau(state: McmcState, hyper: Hyperparams, step_scale: float, rng,
                   ctx: SamplerContext | None = None, data: Dataset | None = None):
    """Random-walk Metropolis update of tau.

    Proposes ``tau + sqrt(step_scale) * sigma_tau * z`` and accepts when
    ``u <= xi`` with ``xi`` the ratio of prior times MESS Gaussian density
    of ``phi``. Returns ``(new_tau, accepted)``; ``state`` is not modified.
    """
    if not step_scale > 0:
        raise ValueError("step_scale must be positive")
    if ctx is None:
        if data is None:
            raise ValueError("metropolis_tau needs a SamplerContext or the dataset")
        ctx = SamplerContext(data, hyper)
    gen = as_generator(rng)
    prop = state.tau + math.sqrt(step_scale * hyper.sigma2_tau) * gen.standard_normal()
    log_xi = _log_target_tau(prop, state, ctx) - _log_target_tau(state.tau, state, ctx)
    if math.log(gen.random()) <= log_xi:
        return float(prop), True
    return float(state.tau), False


def adapt_step(step_scale: float, accept_history, index: int = 1, target: float = 0.44) -> float:
    """Robbins-Monro update ``log s += index^-0.6 (rate - target)`` for one window."""
    rate = float(np.mean(accept_history)) if len(accept_history) else target
    return float(step_scale * math.exp(index ** -0.6 * (rate - target)))


def sample_L(y_i: int, r: float, rng) -> int:
    """Draw a table count ``L ~ R_r(y_i, .)`` for a single observation."""
    return int(CrtTable(np.array([int(y_i)])).sample(r, rng)[0])


def _draw_tau(s, ctx, gen, step_scale):
    tau, acc = metropolis_tau(s, ctx.hyper, step_scale, gen, ctx=ctx)
    s.tau = tau
    return acc


SWEEP_ORDER = (
    ("phi", draw_phi),
    ("gamma", draw_gamma),
    ("beta", draw_beta),
    ("mu", draw_mu),
    ("a", draw_a),
    ("Sigma", draw_Sigma),
    ("sigma2", draw_sigma2),
    ("L_r", draw_L_r),
    ("omega", draw_omega),
    ("h", draw_h),
)


def gibbs_sweep(state: McmcState, data: Dataset, hyper: Hyperparams, rng,
                step_scale: float = 1.0, ctx: SamplerContext | None = None):
    """One full sweep; returns the new state (the input is left untouched).

    Blocks run in the order phi, gamma, beta, mu, a, Sigma, sigma^-2,
    (L, r), omega, h, tau. ``L`` is drawn immediately before ``r`` and
    ``omega`` after both, so the PG draw always conditions on the current r.
    """
    ctx = ctx or SamplerContext(data, hyper)
    gen = as_generator(rng)
    s = state.copy()
    for _, step in SWEEP_ORDER:
        step(s, ctx, gen)
    _draw_tau(s, ctx, gen, step_scale)
    return s


_SCALAR_BLOCKS = ("sigma", "sigma2", "tau", "r", "h")


def run_chain(data: Dataset, hyper: Hyperparams, config: McmcConfig, chain: int) -> dict:
    """Run one chain on its own random stream."""
    gen = make_rng(config.seed, chain)
    ctx = SamplerContext(data, hyper)
    s = initial_state(data)
    K, Q, N = data.K, data.Q, data.N
    n_keep = config.n_keep
    out = {
        "gamma": np.empty((n_keep, Q)),
        "mu": np.empty((n_keep, K)),
        "Sigma": np.empty((n_keep, K, K)),
        "sd_beta": np.empty((n_keep, K)),
        "a": np.empty((n_keep, K)),
    }
    for name in _SCALAR_BLOCKS:
        out[name] = np.empty(n_keep)
    if config.store_psi:
        out["psi"] = np.empty((n_keep, N))
    phi_sum = np.zeros(N)
    beta_sum = np.zeros((N, K))

    step = config.initial_step
    window = []
    n_window = 0
    accepted_after = 0
    kept = 0
    for it in range(config.n_iter):
        for _, block in SWEEP_ORDER:
            block(s, ctx, gen)
        acc = _draw_tau(s, ctx, gen, step)
        if it < config.burn_in:
            window.append(acc)
            if len(window) == config.adapt_window:
                n_window += 1
                step = adapt_step(step, window, n_window, config.target_accept)
                window = []
            continue
        accepted_after += acc
        if (it - config.burn_in) % config.thin == config.thin - 1 and kept < n_keep:
            out["gamma"][kept] = s.gamma
            out["mu"][kept] = s.mu
            out["Sigma"][kept] = s.Sigma
            out["sd_beta"][kept] = np.sqrt(np.diag(s.Sigma))
            out["a"][kept] = s.a
            out["sigma"][kept] = math.sqrt(s.sigma2)
            out["sigma2"][kept] = s.sigma2
            out["tau"][kept] = s.tau
            out["r"][kept] = s.r
            out["h"][kept] = s.h
            if config.store_psi:
                out["psi"][kept] = s.psi(data)
            phi_sum += s.phi
            beta_sum += s.beta
            kept += 1
    n_after = config.n_iter - config.burn_in
    return {
        "draws": out,
        "accept": accepted_after / n_after,
        "phi_mean": phi_sum / max(kept, 1),
        "beta_mean": beta_sum / max(kept, 1),
        "step": step,
    }


def _run_chain_limited(args):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        return run_chain(*args)


def run_mcmc(data: Dataset, hyper: Hyperparams, config: McmcConfig) -> PosteriorDraws:
    """Run ``config.n_chains`` chains, in parallel when ``n_workers > 1``."""
    import time

    t0 = time.perf_counter()
    jobs = [(data, hyper, config, c) for c in range(config.n_chains)]
    if config.n_workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.n_workers, config.n_chains)) as ex:
            results = list(ex.map(_run_chain_limited, jobs))
    else:
        results = [run_chain(*j) for j in jobs]
    draws = {k: np.stack([r["draws"][k] for r in results]) for k in results[0]["draws"]}
    acc = np.array([r["accept"] for r in results])
    post = PosteriorDraws(
        draws=draws,
        acceptance_rate_tau=float(acc.mean()),
        acceptance_by_chain=acc,
        phi_mean=np.stack([r["phi_mean"] for r in results]),
        beta_mean=np.stack([r["beta_mean"] for r in results]),
        step_scale=np.array([r["step"] for r in results]),
        config=config,
        elapsed=time.perf_counter() - t0,
    )
    if config.n_chains >= 2 and config.n_keep >= 10:
        post.psrf = {k: psrf(v) for k, v in draws.items() if k != "psi"}
    return post


def psrf(draws) -> np.ndarray:
    """Gelman-Rubin potential scale reduction factor.

    ``draws`` is shaped ``(chains, n, ...)``; one value per trailing entry.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim < 2 or x.shape[0] < 2:
        raise ValueError("psrf needs at least two chains")
    m, n = x.shape[:2]
    if n < 10:
        raise ValueError("psrf needs at least 10 draws per chain")
    chain_means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * chain_means.var(axis=0, ddof=1)
    V = (n - 1) / n * W + (1 + 1 / m) * B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        R = np.sqrt(V / W)
    R = np.where(W > 0, R, np.where(B > 0, np.inf, 1.0))
    return R[()] if R.ndim == 0 else R


def mcse(draws) -> np.ndarray:
    """Monte Carlo standard error of the pooled mean by non-overlapping batch means.

    ``draws`` is shaped ``(chains, n, ...)``.
    """
    x = np.asarray(draws, dtype=float)
    m, n = x.shape[:2]
    b = max(1, int(math.floor(math.sqrt(n))))
    n_batch = n // b
    trimmed = x[:, : n_batch * b].reshape((m, n_batch, b) + x.shape[2:])
    means = trimmed.mean(axis=2).reshape((m * n_batch,) + x.shape[2:])
    if means.shape[0] < 2:
        return np.zeros(x.shape[2:])
    return means.std(axis=0, ddof=1) / math.sqrt(means.shape[0])


def write_draws(post: PosteriorDraws, out_dir, include_psi: bool = False) -> list[Path]:
    """One CSV per block with columns ``chain, iteration, <values>``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = post.config
    iters = cfg.burn_in + cfg.thin * np.arange(1, cfg.n_keep + 1)
    paths = []
    for name, arr in post.draws.items():
        if name == "psi" and not include_psi:
            continue
        flat = arr.reshape(arr.shape[0], arr.shape[1], -1)
        width = flat.shape[2]
        if arr.ndim == 2:
            cols = [name]
        elif name == "Sigma":
            K = arr.shape[-1]
            cols = [f"Sigma_{i + 1}{j + 1}" for i in range(K) for j in range(K)]
        else:
            cols = [f"{name}_{i + 1}" for i in range(width)]
        path = out_dir / f"draws_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "iteration"] + cols)
            for c in range(flat.shape[0]):
                for t in range(flat.shape[1]):
                    w.writerow([c, int(iters[t])] + [repr(float(v)) for v in flat[c, t]])
        paths.append(path)
    return paths


def default_workers() -> int:
    env = os.environ.get("SPATIALNB_WORKERS")
    return int(env) if env else 1
