"""Synthetic spatial negative binomial data."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .distributions import make_rng
from .model import Dataset, write_dataset
from .spatial import knn_weight_matrix, mess_apply

__all__ = ["Scenario", "TrueParams", "generate", "scenario_grid", "write_truth", "read_truth", "save_resample"]

_CORR = np.array([[1.0, 0.2, 0.0], [0.2, 1.0, 0.2], [0.0, 0.2, 1.0]])


def _default_sigma():
    sd = np.full(3, 0.141)
    return sd[:, None] * _CORR * sd[None, :]


@dataclass(frozen=True)
class Scenario:
    N: int = 1000
    tau: float = -0.7
    sigma: float = 0.2
    mu: np.ndarray = field(default_factory=lambda: np.array([0.2, -0.2, 0.2]))
    Sigma: np.ndarray = field(default_factory=_default_sigma)
    gamma: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.3, -0.3, 0.3]))
    r: float = 1.5
    k_nn: int = 8
    n_resamples: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("mu", "Sigma", "gamma"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        K = self.mu.size
        if self.Sigma.shape != (K, K) or np.any(np.linalg.eigvalsh(self.Sigma) <= 0):
            raise ValueError("Sigma must be a K x K positive definite matrix")
        if self.N < self.k_nn + 1:
            raise ValueError("N must exceed k_nn")
        if not (self.sigma >= 0 and self.r > 0):
            raise ValueError("sigma must be nonnegative and r positive")

    @property
    def name(self) -> str:
        return f"N{self.N}_tau{self.tau:+.1f}_sigma{self.sigma:.1f}"

    def to_dict(self) -> dict:
        return {
            "N": self.N, "tau": self.tau, "sigma": self.sigma, "mu": self.mu.tolist(),
            "Sigma": self.Sigma.tolist(), "gamma": self.gamma.tolist(), "r": self.r,
            "k_nn": self.k_nn, "n_resamples": self.n_resamples, "seed": self.seed,
        }


@dataclass(frozen=True)
class TrueParams:
    gamma: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    sigma: float
    tau: float
    r: float
    beta: np.ndarray
    phi: np.ndarray
    psi: np.ndarray

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma.tolist(),
            "mu": self.mu.tolist(),
            "Sigma": self.Sigma.tolist(),
            "sd_beta": np.sqrt(np.diag(self.Sigma)).tolist(),
            "sigma": self.sigma,
            "tau": self.tau,
            "r": self.r,
        }


def generate(scenario: Scenario, resample_index: int = 0):
    """Draw one dataset; deterministic in ``(scenario.seed, resample_index)``."""
    rng = make_rng(scenario.seed, resample_index)
    N, K, Q = scenario.N, scenario.mu.size, scenario.gamma.size
    points = rng.random((N, 2))
    W = knn_weight_matrix(points, scenario.k_nn)
    beta = rng.multivariate_normal(scenario.mu, scenario.Sigma, size=N, method="cholesky")
    eps = scenario.sigma * rng.standard_normal(N)
    phi = mess_apply(-scenario.tau, W, eps)
    M = np.column_stack([np.ones(N), rng.standard_normal((N, Q - 1))])
    X = rng.standard_normal((N, K))
    psi = M @ scenario.gamma + np.einsum("ik,ik->i", X, beta) + phi
    # Gamma(r, rate (1-p)/p) mixing gives NB(r, p); scale p/(1-p) = exp(psi)
    lam = rng.gamma(scenario.r, np.exp(psi))
    y = rng.poisson(lam)
    data = Dataset(y, M, X, W)
    truth = TrueParams(scenario.gamma, scenario.mu, scenario.Sigma, scenario.sigma,
                       scenario.tau, scenario.r, beta, phi, psi)
    return data, truth


def scenario_grid(seed: int = 0, n_resamples: int = 10, Ns=(1000, 1500), taus=(-0.7, 0.7),
                  sigmas=(0.2, 0.4)) -> list[Scenario]:
    """The eight-scenario design; scenario ``j`` draws from seed stream ``seed + j``."""
    out = []
    for j, (N, tau, sigma) in enumerate(itertools.product(Ns, taus, sigmas)):
        out.append(Scenario(N=N, tau=tau, sigma=sigma, n_resamples=n_resamples, seed=seed + j))
    return out


def write_truth(path, truth: TrueParams) -> None:
    Path(path).write_text(json.dumps(truth.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_truth(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_resample(out_dir, data: Dataset, truth: TrueParams) -> dict:
    """Write ``data.csv``, ``weights.txt`` and ``truth.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"data": out_dir / "data.csv", "weights": out_dir / "weights.txt", "truth": out_dir / "truth.json"}
    write_dataset(paths["data"], paths["weights"], data)
    write_truth(paths["truth"], truth)
    return paths
