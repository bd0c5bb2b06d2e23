"""Data, hyperparameter and state containers plus likelihood evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numba
import numpy as np
from scipy.special import expit, gammaln

from .spatial import SpatialWeights, read_weights, write_weights

__all__ = [
    "Dataset",
    "Hyperparams",
    "McmcState",
    "LinkState",
    "CrtTable",
    "log_likelihood",
    "pointwise_log_likelihood",
    "augmented_gaussian_loglik",
    "initial_state",
    "read_dataset",
    "write_dataset",
]


@dataclass(frozen=True)
class Dataset:
    """Counts ``y``, fixed design ``M`` (N x Q), random design ``X`` (N x K), weights ``W``."""

    y: np.ndarray
    M: np.ndarray
    X: np.ndarray
    W: SpatialWeights

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 1:
            raise ValueError("y must be a vector")
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("y must hold nonnegative integers")
        y = y.astype(np.int64)
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        n = y.size
        if M.shape[0] != n or X.shape[0] != n:
            raise ValueError("M and X must have one row per observation")
        if self.W.n != n:
            raise ValueError("W dimension does not match the number of observations")
        for name, arr in (("M", M), ("X", X)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "X", X)

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def Q(self) -> int:
        return self.M.shape[1]

    @property
    def K(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class Hyperparams:
    """Prior constants.

    ``gamma ~ N(zeta_gamma, Delta_gamma)``, ``mu ~ N(zeta_mu, Delta_mu)``,
    ``tau ~ N(zeta_tau, sigma2_tau)``, ``sigma^-2 ~ Gamma(b_sigma2, c_sigma2)``,
    ``r ~ Gamma(r0, h)``, ``h ~ Gamma(b0, c0)`` and the half-t covariance
    prior ``Sigma | a ~ IW(nu + K - 1, 2 nu diag(a))``,
    ``a_k ~ Gamma(1/2, A_k^-2)``. All Gamma laws use the rate convention.
    """

    zeta_mu: np.ndarray
    Delta_mu: np.ndarray
    zeta_gamma: np.ndarray
    Delta_gamma: np.ndarray
    zeta_tau: float = 0.0
    sigma2_tau: float = 1.0
    b_sigma2: float = 0.01
    c_sigma2: float = 0.01
    r0: float = 0.01
    b0: float = 0.01
    c0: float = 0.01
    nu: float = 2.0
    A: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("zeta_mu", "zeta_gamma"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("Delta_mu", "Delta_gamma"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        K, Q = self.zeta_mu.size, self.zeta_gamma.size
        A = np.full(K, 5.0) if self.A is None else np.atleast_1d(np.asarray(self.A, dtype=float))
        if A.size == 1 and K > 1:
            A = np.full(K, A.item())
        object.__setattr__(self, "A", A)
        if self.Delta_mu.shape != (K, K) or self.Delta_gamma.shape != (Q, Q) or A.size != K:
            raise ValueError("hyperparameter dimensions are inconsistent")
        for name in ("Delta_mu", "Delta_gamma"):
            D = getattr(self, name)
            if not np.allclose(D, D.T) or np.any(np.linalg.eigvalsh(D) <= 0):
                raise ValueError(f"{name} must be symmetric positive definite")
        for name in ("sigma2_tau", "b_sigma2", "c_sigma2", "r0", "b0", "c0", "nu"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if np.any(A <= 0):
            raise ValueError("A must be positive")

    @classmethod
    def default(cls, Q: int, K: int, **overrides) -> "Hyperparams":
        base = dict(
            zeta_mu=np.zeros(K),
            Delta_mu=10.0 * np.eye(K),
            zeta_gamma=np.zeros(Q),
            Delta_gamma=10.0 * np.eye(Q),
            A=np.full(K, 5.0),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def K(self) -> int:
        return self.zeta_mu.size

    @property
    def Q(self) -> int:
        return self.zeta_gamma.size

    @property
    def rho(self) -> float:
        """Degrees of freedom of the IW prior on Sigma."""
        return self.nu + self.K - 1

    @property
    def eta(self) -> np.ndarray:
        return self.A**-2.0

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else float(v)
        return out

    @classmethod
    def from_dict(cls, d: dict, Q: int | None = None, K: int | None = None) -> "Hyperparams":
        """Build from a flat mapping; missing entries take the defaults for (Q, K)."""
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        if K is None:
            K = len(d["zeta_mu"]) if "zeta_mu" in d else len(d["A"])
        if Q is None:
            Q = len(d["zeta_gamma"])
        return cls.default(Q, K, **d)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path, Q: int | None = None, K: int | None = None) -> "Hyperparams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")), Q, K)


@dataclass
class McmcState:
    """One draw of every latent quantity."""

    phi: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    a: np.ndarray
    Sigma: np.ndarray
    sigma2: float
    omega: np.ndarray
    r: float
    h: float
    tau: float
    L: np.ndarray

    def copy(self) -> "McmcState":
        return replace(self, **{f.name: np.copy(getattr(self, f.name))
                                for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)})

    def psi(self, data: Dataset) -> np.ndarray:
        return data.M @ self.gamma + np.einsum("ik,ik->i", data.X, self.beta) + self.phi


def initial_state(data: Dataset) -> McmcState:
    """Neutral starting point shared by the sampler and the variational fits."""
    from .distributions import pg_mean

    N, Q, K = data.N, data.Q, data.K
    return McmcState(
        phi=np.zeros(N),
        gamma=np.zeros(Q),
        beta=np.zeros((N, K)),
        mu=np.zeros(K),
        a=np.ones(K),
        Sigma=np.eye(K),
        sigma2=0.1,
        omega=pg_mean(data.y + 1.0, 0.0),
        r=1.0,
        h=1.0,
        tau=0.0,
        L=np.minimum(data.y, 1),
    )


@dataclass(frozen=True)
class LinkState:
    """Linear predictor ``psi`` and success probability ``p = logistic(psi)``."""

    psi: np.ndarray
    p: np.ndarray

    @classmethod
    def from_psi(cls, psi) -> "LinkState":
        psi = np.asarray(psi, dtype=float)
        return cls(psi, expit(psi))


def pointwise_log_likelihood(y, psi, r):
    """Negative binomial log pmf of each count under the logit link."""
    y = np.asarray(y, dtype=float)
    psi = np.asarray(psi, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(~(r > 0)):
        raise ValueError("r must be positive")
    if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(r))):
        raise ValueError("psi and r must be finite")
    return (gammaln(y + r) - gammaln(r) - gammaln(y + 1.0)
            + y * psi - (y + r) * np.logaddexp(0.0, psi))


def log_likelihood(data, psi, r) -> float:
    """Total NB log-likelihood; ``data`` is a Dataset or a count vector."""
    y = data.y if isinstance(data, Dataset) else data
    return float(np.sum(pointwise_log_likelihood(y, psi, r)))


def augmented_gaussian_loglik(Z, psi, omega) -> float:
    """``-1/2 sum omega_i (psi_i - Z_i)^2``; constants dropped."""
    omega = np.asarray(omega, dtype=float)
    if np.any(~(omega > 0)):
        raise ValueError("omega must be positive")
    d = np.asarray(psi, dtype=float) - np.asarray(Z, dtype=float)
    return float(-0.5 * np.sum(omega * d * d))


# ---------------------------------------------------------------------------
# Chinese-restaurant-table counts


@numba.njit(cache=True)
def _build_log_f(y_max, wanted, offsets, out):
    # row m holds log F(m, j), j = 0..m, with
    # F(m, j) = (m-1)/m F(m-1, j) + F(m-1, j-1)/m and F(0, 0) = 1
    prev = np.full(y_max + 1, -np.inf)
    cur = np.full(y_max + 1, -np.inf)
    prev[0] = 0.0
    if wanted[0]:
        out[offsets[0]] = 0.0
    for m in range(1, y_max + 1):
        lm = math.log(m)
        la = math.log((m - 1) / m) if m > 1 else -np.inf
        cur[0] = -np.inf
        for j in range(1, m + 1):
            x = prev[j] + la if j < m else -np.inf
            z = prev[j - 1] - lm
            if x == -np.inf:
                cur[j] = z
            elif z == -np.inf:
                cur[j] = x
            elif x > z:
                cur[j] = x + math.log1p(math.exp(z - x))
            else:
                cur[j] = z + math.log1p(math.exp(x - z))
        if wanted[m]:
            for j in range(m + 1):
                out[offsets[m] + j] = cur[j]
        prev, cur = cur, prev


@numba.njit(cache=True)
def _crt_sample(y, offsets, log_f, log_r, u):
    out = np.zeros(y.size, dtype=np.int64)
    for i in range(y.size):
        yi = y[i]
        if yi <= 1:
            out[i] = yi
            continue
        base = offsets[yi]
        mx = -np.inf
        for j in range(1, yi + 1):
            v = log_f[base + j] + j * log_r
            if v > mx:
                mx = v
        total = 0.0
        for j in range(1, yi + 1):
            total += math.exp(log_f[base + j] + j * log_r - mx)
        target = u[i] * total
        acc = 0.0
        pick = yi
        for j in range(1, yi + 1):
            acc += math.exp(log_f[base + j] + j * log_r - mx)
            if acc >= target:
                pick = j
                break
        out[i] = pick
    return out


@numba.njit(cache=True)
def _crt_moments(y, offsets, log_f, log_r):
    # E[L], E[log F(y, L)] and the entropy of R(y, .) for each unit
    n = y.size
    e_l = np.zeros(n)
    e_lf = np.zeros(n)
    ent = np.zeros(n)
    for i in range(n):
        yi = y[i]
        if yi == 0:
            continue
        base = offsets[yi]
        mx = -np.inf
        for j in range(1, yi + 1):
            v = log_f[base + j] + j * log_r
            if v > mx:
                mx = v
        total = 0.0
        for j in range(1, yi + 1):
            total += math.exp(log_f[base + j] + j * log_r - mx)
        log_z = mx + math.log(total)
        for j in range(1, yi + 1):
            lp = log_f[base + j] + j * log_r - log_z
            p = math.exp(lp)
            e_l[i] += p * j
            e_lf[i] += p * log_f[base + j]
            if p > 0:
                ent[i] -= p * lp
    return e_l, e_lf, ent


class CrtTable:
    """Log ``F(m, j)`` rows for the distinct counts of a dataset.

    ``F(m, j) = |s(m, j)| / m!`` with ``s`` the Stirling numbers of the
    first kind. The table does not depend on ``r``, so it is built once and
    reused by every ``L`` update. ``R_r(y, j) ∝ F(y, j) r^j`` is the
    conditional law of the table count ``L`` given ``y`` and ``r``.
    """

    def __init__(self, y):
        y = np.asarray(y, dtype=np.int64)
        if y.size and y.min() < 0:
            raise ValueError("counts must be nonnegative")
        self.y = y
        y_max = int(y.max()) if y.size else 0
        wanted = np.zeros(y_max + 1, dtype=np.bool_)
        wanted[np.unique(y)] = True
        sizes = np.where(wanted, np.arange(y_max + 1) + 1, 0)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.log_f = np.full(int(sizes.sum()), -np.inf)
        _build_log_f(y_max, wanted, self.offsets, self.log_f)

    def row(self, m: int) -> np.ndarray:
        """``log F(m, 0..m)``; ``m`` must be one of the stored counts."""
        return self.log_f[self.offsets[m]: self.offsets[m] + m + 1]

    def pmf(self, m: int, r: float) -> np.ndarray:
        """``R_r(m, j)`` for ``j = 0..m``."""
        lp = self.row(m) + np.arange(m + 1) * math.log(r)
        lp -= np.max(lp)
        p = np.exp(lp)
        return p / p.sum()

    def sample(self, r: float, rng) -> np.ndarray:
        """Draw every ``L_i ~ R_r(y_i, .)``."""
        from .distributions import as_generator

        if not r > 0:
            raise ValueError("r must be positive")
        u = as_generator(rng).random(self.y.size)
        return _crt_sample(self.y, self.offsets, self.log_f, math.log(r), u)

    def moments(self, log_r: float):
        """``(E[L], E[log F(y, L)], entropy)`` per unit under ``R_{exp(log_r)}``."""
        return _crt_moments(self.y, self.offsets, self.log_f, float(log_r))


# ---------------------------------------------------------------------------
# Dataset files


def write_dataset(csv_path, weights_path, data: Dataset) -> None:
    """Write counts and designs as CSV (``y, M1.., X1..``) plus the weight file."""
    header = ["y"] + [f"M{q + 1}" for q in range(data.Q)] + [f"X{k + 1}" for k in range(data.K)]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.N):
            w.writerow([str(int(data.y[i]))] + [repr(float(v)) for v in data.M[i]]
                       + [repr(float(v)) for v in data.X[i]])
    write_weights(weights_path, data.W)


def read_dataset(csv_path, weights_path) -> Dataset:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "y":
        raise ValueError("dataset CSV must start with a 'y' column")
    m_cols = [i for i, h in enumerate(header) if h.startswith("M")]
    x_cols = [i for i, h in enumerate(header) if h.startswith("X")]
    arr = np.array(body, dtype=float).reshape(len(body), len(header))
    return Dataset(arr[:, 0], arr[:, m_cols], arr[:, x_cols], read_weights(weights_path))
