"""Integrated non-factorised variational Bayes over a (tau, sigma) grid.

At each grid point the continuous block is fitted by coordinate ascent.
The grid points are independent, so they are farmed out to a process pool
and combined once through a softmax of their conditional ELBOs.

Two likelihood treatments are available at each point:

``"tangent"`` (default)
    The logistic term ``log(1 + e^psi)`` is bounded by its Jaakkola-Jordan
    quadratic tangent at ``xi_i``, and the table counts ``L_i`` stay in the
    bound. Every update, including ``xi``, is then an exact coordinate
    maximiser, so the ELBO cannot decrease. ``E[omega_i]`` becomes
    ``(y_i + E r) tanh(xi_i/2)/(2 xi_i)`` with ``xi_i^2 = E[psi_i^2]``.
``"quadrature"``
    ``E[omega_i]`` and ``E[log(1 + e^psi)]`` are Gaussian expectations
    evaluated by quadrature and the ELBO uses the exact ``E_q[log NB]``.
    This bound is tighter, but the omega and r updates are not maximisers
    of it and the trace may dip.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.linalg.lapack import dtrtri
from scipy.special import digamma, gammaln

from .distributions import (
    as_generator,
    expect_lgamma_ratio,
    gauss_hermite_expectations,
    gauss_hermite_rule,
    tanh_ratio,
)
from .model import CrtTable, Dataset, Hyperparams
from .spatial import matrix_exponential

__all__ = [
    "GridSpec",
    "GridFit",
    "CombinedPosterior",
    "ElboDecreaseError",
    "make_grid",
    "cavi_at_point",
    "conditional_elbo",
    "combine",
    "run_infvb",
    "write_grid_diagnostics",
]

MODES = ("tangent", "quadrature")


class ElboDecreaseError(RuntimeError):
    """The conditional ELBO went down between two iterations."""


@dataclass(frozen=True)
class GridSpec:
    tau_points: np.ndarray
    sigma_points: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.tau_points, dtype=float))
        s = np.atleast_1d(np.asarray(self.sigma_points, dtype=float))
        if t.size == 0 or s.size == 0:
            raise ValueError("grid axes must be nonempty")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(s) <= 0):
            raise ValueError("grid axes must be strictly increasing")
        if np.any(s <= 0):
            raise ValueError("sigma grid points must be positive")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
            raise ValueError("grid points must be finite")
        object.__setattr__(self, "tau_points", t)
        object.__setattr__(self, "sigma_points", s)

    @property
    def G(self) -> int:
        return self.tau_points.size * self.sigma_points.size

    def points(self) -> list[tuple[float, float]]:
        """Cartesian product, tau varying slowest."""
        return [(float(t), float(s)) for t in self.tau_points for s in self.sigma_points]


def make_grid(tau_lo, tau_hi, n_tau, sigma_lo, sigma_hi, n_sigma) -> GridSpec:
    """Equidistant grid including both endpoints of each axis."""
    if not (tau_lo < tau_hi and sigma_lo < sigma_hi):
        raise ValueError("grid bounds must satisfy lo < hi")
    if n_tau < 2 or n_sigma < 2:
        raise ValueError("each grid axis needs at least two points")
    if not sigma_lo > 0:
        raise ValueError("sigma_lo must be positive")
    return GridSpec(np.linspace(tau_lo, tau_hi, int(n_tau)), np.linspace(sigma_lo, sigma_hi, int(n_sigma)))


@dataclass
class GridFit:
    """Variational parameters and ELBO history at one grid point.

    ``q(phi)`` is summarised by its mean, the diagonal and log-determinant
    of its covariance, and the ``E[omega]`` vector used to form its
    precision ``E[Omega] + S^T S / sigma^2``; the dense covariance can be
    rebuilt from these when needed.
    """

    tau: float
    sigma: float
    mode: str
    lambda_phi: np.ndarray
    diag_Lambda_phi: np.ndarray
    logdet_Lambda_phi: float
    omega_phi: np.ndarray
    quad_phi: float
    lambda_gamma: np.ndarray
    Lambda_gamma: np.ndarray
    lambda_beta: np.ndarray
    Lambda_beta: np.ndarray
    lambda_mu: np.ndarray
    Lambda_mu: np.ndarray
    b_a: float
    c_a: np.ndarray
    rho_tilde: float
    B_tilde: np.ndarray
    b_h: float
    c_h: float
    b_r: float
    c_r: float
    E_L: np.ndarray
    E_logF: np.ndarray
    H_L: np.ndarray
    lambda_psi: np.ndarray
    diag_Lambda_psi: np.ndarray
    xi: np.ndarray
    omega_bar: np.ndarray
    elbo_trace: list = field(default_factory=list)
    log_weight: float = float("nan")
    n_iter: int = 0
    converged: bool = False
    elapsed: float = 0.0

    @property
    def sigma2(self) -> float:
        return self.sigma**2

    @property
    def mean_r(self) -> float:
        return self.b_r / self.c_r

    def sd_beta_moments(self):
        """Mean and variance of ``sqrt(Sigma_kk)`` under ``q(Sigma)``.

        Each diagonal entry of an ``IW(rho, B)`` matrix is inverse gamma
        with shape ``(rho - K + 1)/2`` and scale ``B_kk / 2``.
        """
        K = self.B_tilde.shape[0]
        alpha = (self.rho_tilde - K + 1) / 2.0
        beta = np.diag(self.B_tilde) / 2.0
        m = np.sqrt(beta) * np.exp(gammaln(alpha - 0.5) - gammaln(alpha))
        second = beta / (alpha - 1.0)
        return m, second - m * m

    def Sigma_mean(self) -> np.ndarray:
        K = self.B_tilde.shape[0]
        return self.B_tilde / (self.rho_tilde - K - 1)


class _PointContext:
    def __init__(self, data: Dataset, hyper: Hyperparams, tau: float, sigma: float):
        self.data = data
        self.hyper = hyper
        self.yf = data.y.astype(float)
        S = matrix_exponential(tau, data.W, method="taylor").S
        self.G = S.T @ S
        self.crt = CrtTable(data.y)
        self.Dg_inv = np.linalg.inv(hyper.Delta_gamma)
        self.Dm_inv = np.linalg.inv(hyper.Delta_mu)


def _initial_fit(data: Dataset, hyper: Hyperparams, tau, sigma, mode) -> GridFit:
    N, Q, K = data.N, data.Q, data.K
    b_a = (hyper.nu + K) / 2.0
    rho_t = hyper.nu + N + K - 1
    b_h = hyper.r0 + hyper.b0
    return GridFit(
        tau=float(tau), sigma=float(sigma), mode=mode,
        lambda_phi=np.zeros(N), diag_Lambda_phi=np.zeros(N), logdet_Lambda_phi=0.0,
        omega_phi=np.zeros(N), quad_phi=0.0,
        lambda_gamma=np.zeros(Q), Lambda_gamma=np.zeros((Q, Q)),
        lambda_beta=np.zeros((N, K)), Lambda_beta=np.zeros((N, K, K)),
        lambda_mu=np.zeros(K), Lambda_mu=np.zeros((K, K)),
        # neutral start: E[a_k] = 1, E[Sigma^-1] = I, E[r] = 1, E[h] = 1
        b_a=b_a, c_a=np.full(K, b_a), rho_tilde=rho_t, B_tilde=rho_t * np.eye(K),
        b_h=b_h, c_h=b_h, b_r=1.0, c_r=1.0,
        E_L=np.zeros(N), E_logF=np.zeros(N), H_L=np.zeros(N),
        lambda_psi=np.zeros(N), diag_Lambda_psi=np.zeros(N), xi=np.zeros(N),
        omega_bar=np.zeros(N),
    )


def _logcosh_half(x):
    a = np.abs(x) / 2.0
    return a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0)


def _tangent_U(fit: GridFit):
    """Jaakkola-Jordan upper bound on ``E[log(1 + e^psi)]`` at ``xi``."""
    second = fit.lambda_psi**2 + fit.diag_Lambda_psi
    xi = fit.xi
    return (fit.lambda_psi / 2.0 + math.log(2.0) + _logcosh_half(xi)
            + 0.5 * tanh_ratio(xi) * (second - xi * xi))


def _update_omega(fit: GridFit, ctx: _PointContext, rule):
    rbar = fit.mean_r
    if fit.mode == "tangent":
        w = tanh_ratio(fit.xi)
    else:
        if fit.n_iter == 0:
            w = np.full(ctx.data.N, 0.25)
        else:
            _, w = gauss_hermite_expectations(fit.lambda_psi, fit.diag_Lambda_psi, rule)
    fit.omega_bar = (ctx.yf + rbar) * w
    return 0.5 * (ctx.yf - rbar)


def _update_phi(fit: GridFit, ctx: _PointContext, kappa):
    d = ctx.data
    P = ctx.G / fit.sigma2
    P[np.diag_indices_from(P)] += fit.omega_bar
    try:
        L = scipy.linalg.cholesky(P, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance of q(phi) is not positive definite") from exc
    rhs = kappa - fit.omega_bar * (d.M @ fit.lambda_gamma + np.einsum("ik,ik->i", d.X, fit.lambda_beta))
    fit.lambda_phi = scipy.linalg.cho_solve((L, True), rhs, check_finite=False)
    Linv, info = dtrtri(L, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("covariance of q(phi) is not positive definite")
    fit.diag_Lambda_phi = np.einsum("ij,ij->j", Linv, Linv)
    fit.logdet_Lambda_phi = -2.0 * float(np.sum(np.log(np.diag(L))))
    fit.omega_phi = fit.omega_bar.copy()
    fit.quad_phi = float(fit.lambda_phi @ (ctx.G @ fit.lambda_phi)) / fit.sigma2


def _spd_inverse(P, name):
    try:
        c = scipy.linalg.cho_factor(P, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"covariance of q({name}) is not positive definite") from exc
    return scipy.linalg.cho_solve(c, np.eye(P.shape[0]))


def _update_gamma(fit, ctx, kappa):
    d = ctx.data
    P = ctx.Dg_inv + d.M.T @ (fit.omega_bar[:, None] * d.M)
    fit.Lambda_gamma = _spd_inverse(P, "gamma")
    resid = kappa - fit.omega_bar * (np.einsum("ik,ik->i", d.X, fit.lambda_beta) + fit.lambda_phi)
    fit.lambda_gamma = fit.Lambda_gamma @ (d.M.T @ resid + ctx.Dg_inv @ ctx.hyper.zeta_gamma)


def _update_beta(fit, ctx, kappa):
    d = ctx.data
    X = d.X
    Einv = fit.rho_tilde * np.linalg.inv(fit.B_tilde)
    P = fit.omega_bar[:, None, None] * X[:, :, None] * X[:, None, :] + Einv
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance of q(beta) is not positive definite") from exc
    fit.Lambda_beta = np.linalg.inv(P)
    resid = kappa - fit.omega_bar * (d.M @ fit.lambda_gamma + fit.lambda_phi)
    rhs = resid[:, None] * X + Einv @ fit.lambda_mu
    fit.lambda_beta = np.einsum("ikl,il->ik", fit.Lambda_beta, rhs)


def _update_mu(fit, ctx):
    h = ctx.hyper
    Einv = fit.rho_tilde * np.linalg.inv(fit.B_tilde)
    P = ctx.data.N * Einv + ctx.Dm_inv
    fit.Lambda_mu = _spd_inverse(P, "mu")
    fit.lambda_mu = fit.Lambda_mu @ (Einv @ fit.lambda_beta.sum(axis=0) + ctx.Dm_inv @ h.zeta_mu)


def _update_a(fit, ctx):
    h = ctx.hyper
    fit.c_a = h.eta + h.nu * fit.rho_tilde * np.diag(np.linalg.inv(fit.B_tilde))


def _update_B(fit, ctx):
    h = ctx.hyper
    dev = fit.lambda_beta - fit.lambda_mu
    B = (2.0 * h.nu * np.diag(fit.b_a / fit.c_a) + ctx.data.N * fit.Lambda_mu
         + fit.Lambda_beta.sum(axis=0) + dev.T @ dev)
    fit.B_tilde = 0.5 * (B + B.T)


def _update_psi(fit, ctx):
    d = ctx.data
    fit.lambda_psi = d.M @ fit.lambda_gamma + np.einsum("ik,ik->i", d.X, fit.lambda_beta) + fit.lambda_phi
    fit.diag_Lambda_psi = (np.einsum("iq,qp,ip->i", d.M, fit.Lambda_gamma, d.M)
                           + np.einsum("ik,ikl,il->i", d.X, fit.Lambda_beta, d.X)
                           + fit.diag_Lambda_phi)


def _update_h(fit, ctx):
    fit.c_h = fit.mean_r + ctx.hyper.c0


def _update_L(fit, ctx):
    log_r = digamma(fit.b_r) - math.log(fit.c_r)
    fit.E_L, fit.E_logF, fit.H_L = ctx.crt.moments(log_r)


def _update_r(fit, ctx, rule):
    if fit.mode == "tangent":
        s = float(np.sum(_tangent_U(fit)))
    else:
        e_lse, _ = gauss_hermite_expectations(fit.lambda_psi, fit.diag_Lambda_psi, rule)
        s = float(np.sum(e_lse))
    fit.b_r = ctx.hyper.r0 + float(np.sum(fit.E_L))
    fit.c_r = fit.b_h / fit.c_h + s


def _update_xi(fit):
    fit.xi = np.sqrt(fit.lambda_psi**2 + fit.diag_Lambda_psi)


def conditional_elbo(fit: GridFit, data: Dataset, hyper: Hyperparams, rule=None, terms: bool = False):
    """Conditional ELBO at the fit's grid point, up to a constant shared by all points.

    With ``terms=True`` returns the dictionary of named contributions.
    """
    N, K = data.N, data.K
    y = data.y.astype(float)
    s2 = fit.sigma2
    h = hyper
    b_r, c_r = fit.b_r, fit.c_r
    rbar = b_r / c_r
    e_log_r = digamma(b_r) - math.log(c_r)
    b_h, c_h = fit.b_h, fit.c_h
    Binv = np.linalg.inv(fit.B_tilde)
    _, logdet_B = np.linalg.slogdet(fit.B_tilde)
    Ea = fit.b_a / fit.c_a
    rho = h.rho
    T = {}

    if fit.mode == "tangent":
        T["likelihood"] = float(np.sum(fit.E_logF + fit.E_L * e_log_r + fit.H_L)
                                + y @ fit.lambda_psi - (y + rbar) @ _tangent_U(fit))
    else:
        rule = rule or gauss_hermite_rule(30)
        e_lse, _ = gauss_hermite_expectations(fit.lambda_psi, fit.diag_Lambda_psi, rule)
        T["likelihood"] = float(np.sum(expect_lgamma_ratio(y, b_r, c_r))
                                + y @ fit.lambda_psi - (y + rbar) @ e_lse)

    trace_phi = N - float(fit.omega_phi @ fit.diag_Lambda_phi)
    T["phi_prior"] = -0.5 * N * math.log(s2) - 0.5 * (fit.quad_phi + trace_phi)
    dg = fit.lambda_gamma - h.zeta_gamma
    Dg_inv = np.linalg.inv(h.Delta_gamma)
    T["gamma_prior"] = -0.5 * dg @ Dg_inv @ dg - 0.5 * np.sum(Dg_inv * fit.Lambda_gamma)
    dm = fit.lambda_mu - h.zeta_mu
    Dm_inv = np.linalg.inv(h.Delta_mu)
    T["mu_prior"] = -0.5 * dm @ Dm_inv @ dm - 0.5 * np.sum(Dm_inv * fit.Lambda_mu)
    dev = fit.lambda_beta - fit.lambda_mu
    T["beta_prior"] = -0.5 * N * logdet_B - 0.5 * fit.rho_tilde * (
        np.einsum("ik,kl,il->", dev, Binv, dev)
        + np.sum(Binv * fit.Lambda_beta.sum(axis=0))
        + N * np.sum(Binv * fit.Lambda_mu))
    T["Sigma_prior"] = (-0.5 * rho * np.sum(np.log(fit.c_a)) - 0.5 * (rho + K + 1) * logdet_B
                        - h.nu * fit.rho_tilde * np.sum(Ea * np.diag(Binv)))
    T["a_prior"] = float(np.sum(0.5 * np.log(fit.c_a) - h.eta * Ea))
    T["r_prior"] = -h.r0 * math.log(c_h) + (h.r0 - 1.0) * e_log_r - (b_h / c_h) * rbar
    T["h_prior"] = (1.0 - h.b0) * math.log(c_h) - h.c0 * b_h / c_h
    T["sigma_prior"] = (h.b_sigma2 - 1.0) * math.log(1.0 / s2) - h.c_sigma2 / s2
    T["tau_prior"] = -0.5 * (fit.tau - h.zeta_tau) ** 2 / h.sigma2_tau

    _, ld_g = np.linalg.slogdet(fit.Lambda_gamma)
    _, ld_m = np.linalg.slogdet(fit.Lambda_mu)
    _, ld_b = np.linalg.slogdet(fit.Lambda_beta)
    T["entropy_gauss"] = 0.5 * (fit.logdet_Lambda_phi + ld_g + float(np.sum(ld_b)) + ld_m)
    T["entropy_a"] = -float(np.sum(np.log(fit.c_a)))
    T["entropy_Sigma"] = 0.5 * (K + 1) * logdet_B
    T["entropy_h"] = -math.log(c_h)
    T["entropy_r"] = b_r - math.log(c_r) + gammaln(b_r) + (1.0 - b_r) * digamma(b_r)

    for name, v in T.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"ELBO term {name!r} is not finite")
    if terms:
        return T
    return float(sum(T.values()))


def cavi_at_point(point, data: Dataset, hyper: Hyperparams, tol: float = 1e-6, max_iter: int = 500,
                  mode: str = "tangent", strict: bool | None = None, mono_tol: float = 1e-8) -> GridFit:
    """Coordinate ascent for ``q(Theta_c | tau, sigma)`` at one grid point.

    Stops when the relative ELBO change drops below ``tol`` or after
    ``max_iter`` sweeps. With ``strict`` (default for tangent mode) an ELBO
    decrease larger than ``mono_tol`` raises ``ElboDecreaseError``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    tau, sigma = float(point[0]), float(point[1])
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if strict is None:
        strict = mode == "tangent"
    t0 = time.perf_counter()
    ctx = _PointContext(data, hyper, tau, sigma)
    rule = gauss_hermite_rule(30)
    fit = _initial_fit(data, hyper, tau, sigma, mode)
    prev = None
    for it in range(max_iter):
        kappa = _update_omega(fit, ctx, rule)
        _update_phi(fit, ctx, kappa)
        _update_gamma(fit, ctx, kappa)
        _update_beta(fit, ctx, kappa)
        _update_mu(fit, ctx)
        _update_a(fit, ctx)
        _update_B(fit, ctx)
        _update_psi(fit, ctx)
        _update_h(fit, ctx)
        _update_L(fit, ctx)
        _update_r(fit, ctx, rule)
        if mode == "tangent":
            _update_xi(fit)
        fit.n_iter = it + 1
        elbo = conditional_elbo(fit, data, hyper, rule)
        fit.elbo_trace.append(elbo)
        if prev is not None:
            if strict and elbo < prev - mono_tol:
                raise ElboDecreaseError(
                    f"ELBO decreased by {prev - elbo:.3e} at iteration {it + 1} (tau={tau}, sigma={sigma})")
            if abs(elbo - prev) <= tol * abs(prev):
                fit.converged = True
                break
        prev = elbo
    fit.log_weight = fit.elbo_trace[-1]
    fit.elapsed = time.perf_counter() - t0
    return fit


@dataclass
class CombinedPosterior:
    """Grid-mixture posterior.

    ``moments`` maps a block name to ``(mean, variance)`` under the mixture
    (within-point plus between-point variance).
    """

    grid_weights: np.ndarray
    tau_points: np.ndarray
    sigma_points: np.ndarray
    tau_values: np.ndarray
    tau_marginal: np.ndarray
    sigma_values: np.ndarray
    sigma_marginal: np.ndarray
    moments: dict

    def mean(self, name):
        return self.moments[name][0]

    def sd(self, name):
        return np.sqrt(self.moments[name][1])


def _fit_moments(f: GridFit) -> dict:
    sd_m, sd_v = f.sd_beta_moments()
    return {
        "gamma": (f.lambda_gamma, np.diag(f.Lambda_gamma)),
        "mu": (f.lambda_mu, np.diag(f.Lambda_mu)),
        "sd_beta": (sd_m, sd_v),
        "r": (np.array(f.mean_r), np.array(f.b_r / f.c_r**2)),
        "tau": (np.array(f.tau), np.array(0.0)),
        "sigma": (np.array(f.sigma), np.array(0.0)),
        "phi": (f.lambda_phi, f.diag_Lambda_phi),
        "beta": (f.lambda_beta, np.diagonal(f.Lambda_beta, axis1=1, axis2=2)),
        "psi": (f.lambda_psi, f.diag_Lambda_psi),
    }


def combine(fits) -> CombinedPosterior:
    """Softmax the log weights and form mixture moments and grid marginals."""
    fits = list(fits)
    if not fits:
        raise ValueError("combine needs at least one grid fit")
    lw = np.array([f.log_weight for f in fits], dtype=float)
    if not np.all(np.isfinite(lw)):
        raise ValueError("all grid fits need a finite log weight")
    w = np.exp(lw - lw.max())
    w /= w.sum()
    per = [_fit_moments(f) for f in fits]
    moments = {}
    for name in per[0]:
        means = np.stack([p[name][0] for p in per])
        vars_ = np.stack([p[name][1] for p in per])
        m = np.tensordot(w, means, axes=1)
        second = np.tensordot(w, vars_ + means**2, axes=1)
        moments[name] = (m, np.maximum(second - m**2, 0.0))
    taus = np.array([f.tau for f in fits])
    sigmas = np.array([f.sigma for f in fits])
    tv = np.unique(taus)
    sv = np.unique(sigmas)
    tm = np.array([w[taus == t].sum() for t in tv])
    sm = np.array([w[sigmas == s].sum() for s in sv])
    return CombinedPosterior(w, taus, sigmas, tv, tm, sv, sm, moments)


_WORKER = {}


def _worker_init(data, hyper, tol, max_iter, mode):
    from threadpoolctl import threadpool_limits

    _WORKER["limits"] = threadpool_limits(limits=1)
    _WORKER["args"] = (data, hyper, tol, max_iter, mode)


def _worker_run(point):
    data, hyper, tol, max_iter, mode = _WORKER["args"]
    try:
        return cavi_at_point(point, data, hyper, tol, max_iter, mode)
    except Exception as exc:  # attach the grid point for the coordinator
        raise RuntimeError(f"grid point tau={point[0]}, sigma={point[1]} failed: {exc}") from exc


def run_infvb(data: Dataset, hyper: Hyperparams, grid: GridSpec, tol: float = 1e-6, max_iter: int = 500,
              n_workers: int = 1, mode: str = "tangent"):
    """Fit every grid point (in parallel when ``n_workers > 1``) and combine.

    Returns ``(CombinedPosterior, fits)`` with fits in grid order. The
    result does not depend on ``n_workers``: each point is deterministic
    and uses single-threaded linear algebra.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be at least 1")
    points = grid.points()
    if n_workers == 1:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            fits = []
            for p in points:
                try:
                    fits.append(cavi_at_point(p, data, hyper, tol, max_iter, mode))
                except Exception as exc:
                    raise RuntimeError(f"grid point tau={p[0]}, sigma={p[1]} failed: {exc}") from exc
    else:
        with ProcessPoolExecutor(max_workers=n_workers, initializer=_worker_init,
                                 initargs=(data, hyper, tol, max_iter, mode)) as ex:
            fits = list(ex.map(_worker_run, points))
    return combine(fits), fits


def sample_posterior(post: CombinedPosterior, fits, data: Dataset, n_draws: int, rng):
    """Draw ``(psi, r)`` pairs from the combined variational posterior.

    A grid point is drawn by weight; then ``gamma``, ``beta_i``, ``phi`` and
    ``r`` are drawn from that point's factors, so ``psi`` keeps the spatial
    correlation of ``q(phi)``.
    """
    gen = as_generator(rng)
    idx = gen.choice(len(fits), size=n_draws, p=post.grid_weights)
    psi = np.empty((n_draws, data.N))
    r = np.empty(n_draws)
    for g in np.unique(idx):
        f = fits[g]
        rows = np.flatnonzero(idx == g)
        S = matrix_exponential(f.tau, data.W, method="taylor").S
        P = S.T @ S / f.sigma2
        P[np.diag_indices_from(P)] += f.omega_phi
        Lp = np.linalg.cholesky(P)
        Lg = np.linalg.cholesky(f.Lambda_gamma)
        Lb = np.linalg.cholesky(f.Lambda_beta)
        for t in rows:
            phi = f.lambda_phi + scipy.linalg.solve_triangular(Lp.T, gen.standard_normal(data.N), lower=False)
            gam = f.lambda_gamma + Lg @ gen.standard_normal(data.Q)
            beta = f.lambda_beta + np.einsum("ikl,il->ik", Lb, gen.standard_normal((data.N, data.K)))
            psi[t] = data.M @ gam + np.einsum("ik,ik->i", data.X, beta) + phi
            r[t] = gen.standard_gamma(f.b_r) / f.c_r
    return psi, r


def write_grid_diagnostics(path, fits) -> None:
    """One row per grid point and iteration: ``tau, sigma, iter, elbo``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "sigma", "iter", "elbo"])
        for f in fits:
            for i, e in enumerate(f.elbo_trace, start=1):
                w.writerow([repr(float(f.tau)), repr(float(f.sigma)), i, repr(float(e))])
