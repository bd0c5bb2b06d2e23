"""Spatial weights, the MESS matrix exponential and spatial precision algebra."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp

__all__ = [
    "SpatialWeights",
    "MessOperator",
    "knn_weight_matrix",
    "matrix_exponential",
    "mess_apply",
    "MessGram",
    "spatial_precision",
    "read_weights",
    "write_weights",
]

# Truncation target for Taylor-based exponentials; below double epsilon of
# any entry of magnitude <= 1.
_TAYLOR_TOL = 1e-17


@dataclass(frozen=True)
class SpatialWeights:
    """Row-normalised sparse spatial weight matrix.

    Parameters
    ----------
    matrix : scipy.sparse.csr_matrix
        ``n x n`` nonnegative weights with zero diagonal; rows sum to one.
    k : int
        Neighbour count used to build the matrix (informational for
        matrices read from disk).
    """

    matrix: sp.csr_matrix
    k: int
    _transpose: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=float)
        m.sort_indices()
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "_transpose", sp.csr_matrix(m.T))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def T(self) -> sp.csr_matrix:
        return self._transpose

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def check(self, atol: float = 1e-12) -> None:
        """Raise ``ValueError`` unless the matrix is a valid row-normalised W."""
        m = self.matrix
        if m.shape[0] != m.shape[1]:
            raise ValueError("weight matrix must be square")
        if m.nnz and m.data.min() < 0:
            raise ValueError("weights must be nonnegative")
        if np.any(m.diagonal() != 0):
            raise ValueError("weight matrix must have zero diagonal")
        if np.max(np.abs(self.row_sums() - 1.0)) > atol:
            raise ValueError("weight matrix rows must sum to one")


@dataclass(frozen=True)
class MessOperator:
    """Dense ``S = exp(tau W)``."""

    tau: float
    S: np.ndarray

    @property
    def n(self) -> int:
        return self.S.shape[0]


def knn_weight_matrix(points, k: int) -> SpatialWeights:
    """Row-normalised k-nearest-neighbour weights.

    Row ``i`` puts weight ``1/k`` on the ``k`` closest other points by
    Euclidean distance. Equal distances are resolved in favour of the lower
    point index, so duplicated coordinates give a deterministic matrix.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array of coordinates")
    k = int(k)
    if k < 1:
        raise ValueError("k must be a positive integer")
    n = pts.shape[0]
    n_distinct = np.unique(pts, axis=0).shape[0]
    if n_distinct < k + 1:
        raise ValueError(f"need at least k+1={k + 1} distinct points, got {n_distinct}")

    cols = np.empty((n, k), dtype=np.int64)
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        block = pts[start:stop]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        # stable sort keeps the lower column index first among equal distances
        cols[start:stop] = np.argsort(d2, axis=1, kind="stable")[:, :k]

    indptr = np.arange(0, n * k + 1, k)
    data = np.full(n * k, 1.0 / k)
    W = sp.csr_matrix((data, cols.ravel(), indptr), shape=(n, n))
    return SpatialWeights(W, k)


def _taylor_terms(scale: float) -> int:
    """Smallest m with scale**(m+1)/(m+1)! * exp(scale) below tolerance."""
    m = 0
    term = 1.0
    while True:
        m += 1
        term *= scale / m
        if term * scale / (m + 1) * math.exp(scale) < _TAYLOR_TOL:
            return m


def matrix_exponential(tau: float, W: SpatialWeights, method: str = "pade") -> MessOperator:
    """Dense ``exp(tau W)``.

    ``method="pade"`` uses scaling and squaring with a degree-13 Padé
    approximant. ``method="taylor"`` sums the power series with sparse
    products, truncated by the infinity-norm bound ``|tau|^m/m!`` (valid
    because ``||W||_inf = 1``); it is cheaper for sparse W.
    """
    tau = float(tau)
    if not math.isfinite(tau):
        raise ValueError("tau must be finite")
    n = W.n
    if tau == 0.0:
        return MessOperator(tau, np.eye(n))
    if method == "pade":
        S = scipy.linalg.expm(tau * W.toarray())
    elif method == "taylor":
        # S^T = sum (tau W^T)^j / j!; build rows of S as columns of S^T so
        # each step is a sparse-times-dense product.
        m = _taylor_terms(abs(tau) * _inf_norm(W.matrix))
        term = np.eye(n)
        acc = np.eye(n)
        for j in range(1, m + 1):
            term = (W.matrix @ term) * (tau / j)
            acc += term
        S = acc
    else:
        raise ValueError(f"unknown method {method!r}")
    return MessOperator(tau, S)


def _inf_norm(A: sp.csr_matrix) -> float:
    return float(np.max(np.abs(A).sum(axis=1))) if A.nnz else 0.0


def mess_apply(tau: float, W: SpatialWeights, v, transpose: bool = False) -> np.ndarray:
    """Action ``exp(tau W) v`` (or ``exp(tau W)^T v``) without forming S.

    ``v`` may be a vector or an ``(n, m)`` block of vectors.
    """
    tau = float(tau)
    if not math.isfinite(tau):
        raise ValueError("tau must be finite")
    v = np.asarray(v, dtype=float)
    if tau == 0.0:
        return v.copy()
    A = W.T if transpose else W.matrix
    m = _taylor_terms(abs(tau) * _inf_norm(A))
    term = v.copy()
    acc = v.copy()
    for j in range(1, m + 1):
        term = (A @ term) * (tau / j)
        acc += term
    return acc


def spatial_precision(S: MessOperator, sigma2: float) -> np.ndarray:
    """``S^T S / sigma2``, the precision of the MESS random effect."""
    sigma2 = float(sigma2)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    P = S.S.T @ S.S / sigma2
    return 0.5 * (P + P.T)


class MessGram:
    """``S(tau)^T S(tau)`` for many values of tau from one expansion.

    Differentiating ``G(tau) = exp(tau W^T) exp(tau W)`` gives
    ``G' = W^T G + G W``, so ``G(tau) = sum_n tau^n T_n`` with ``T_0 = I`` and
    ``T_n = (W^T T_{n-1} + T_{n-1} W) / n``. The ``T_n`` do not depend on tau
    and are built lazily; evaluating G is then a short weighted sum of cached
    symmetric matrices instead of a fresh exponential and a Gram product.
    """

    def __init__(self, W: SpatialWeights, max_terms: int = 200):
        self.W = W
        self.max_terms = max_terms
        self._terms = [np.eye(W.n)]
        self._norms = [1.0]

    def _extend(self):
        if len(self._terms) >= self.max_terms:
            raise RuntimeError("Gram series did not converge; |tau| too large")
        n = len(self._terms)
        P = self.W.T @ self._terms[-1]
        Tn = (P + P.T) / n
        self._terms.append(Tn)
        self._norms.append(float(np.max(np.abs(Tn))))

    def __call__(self, tau: float) -> np.ndarray:
        tau = float(tau)
        if not math.isfinite(tau):
            raise ValueError("tau must be finite")
        out = self._terms[0].copy()
        coef = 1.0
        n = 0
        while True:
            n += 1
            if n >= len(self._terms):
                self._extend()
            coef *= tau
            if abs(coef) * self._norms[n] < _TAYLOR_TOL and n > 2.0 * abs(tau) * 2.0:
                return out
            out += coef * self._terms[n]


def write_weights(path, W: SpatialWeights) -> None:
    """Write W as ``n k`` header followed by ``i j w`` triplets (0-based)."""
    coo = W.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{W.n} {W.k}\n")
        for i, j, w in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{i} {j} {float(w)!r}\n")


def read_weights(path) -> SpatialWeights:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    n, k = (int(x) for x in lines[0].split())
    rows, cols, vals = [], [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        i, j, w = line.split()
        rows.append(int(i))
        cols.append(int(j))
        vals.append(float(w))
    W = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return SpatialWeights(W, k)
