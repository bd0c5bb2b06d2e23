"""Proper scoring rules for negative binomial predictive distributions.

``p`` is the success probability of the logit link, so the predictive mean
is ``r p / (1 - p) = r e^psi``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc, expit, hyp2f1

from .model import pointwise_log_likelihood

__all__ = [
    "ScoreReport",
    "log_score",
    "dss",
    "rps",
    "rps_closed_form",
    "nb_cdf",
    "score_posterior",
    "write_score_report",
]

RPS_TOL = 1e-12
RPS_MAX_T = 1_000_000


def log_score(y, psi, r):
    """Negative log pmf."""
    return -pointwise_log_likelihood(y, psi, r)


def dss(y, psi, r):
    """Dawid-Sebastiani score ``(y - m)^2 / v + ln v``."""
    y = np.asarray(y, dtype=float)
    psi = np.asarray(psi, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(~(r > 0)):
        raise ValueError("r must be positive")
    e = np.exp(psi)
    m = e * r
    v = (e + e * e) * r
    return (y - m) ** 2 / v + np.log(v)


def nb_cdf(t, r, p):
    """``P(Y <= t) = 1 - I_p(t + 1, r)``, zero for ``t < 0``."""
    t = np.asarray(t, dtype=float)
    safe = np.maximum(t, 0.0)
    return np.where(t >= 0, 1.0 - betainc(safe + 1.0, r, p), 0.0)


def rps(y, r, p):
    """Ranked probability score by adaptive truncation of its defining sum.

    Terms are added in blocks until, past ``y``, both the remaining tail
    mass ``1 - F(t)`` and the latest term fall below ``1e-12``. Inputs
    broadcast; each element stops independently.
    """
    y, r, p = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(r, dtype=float),
                                  np.asarray(p, dtype=float))
    if np.any(~(r > 0)):
        raise ValueError("r must be positive")
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError("p must lie in (0, 1)")
    shape = y.shape
    y, r, p = y.ravel(), r.ravel(), p.ravel()
    total = np.zeros(y.size)
    active = np.arange(y.size)
    start = 0
    block = 64
    while active.size:
        if start > RPS_MAX_T:
            raise RuntimeError("RPS truncation exceeded 1e6 terms")
        t = np.arange(start, start + block, dtype=float)
        ya, ra, pa = y[active, None], r[active, None], p[active, None]
        Ft = 1.0 - betainc(t[None, :] + 1.0, ra, pa)
        terms = (Ft - (ya <= t[None, :])) ** 2
        total[active] += terms.sum(axis=1)
        last_t = t[-1]
        done = (y[active] <= last_t) & (1.0 - Ft[:, -1] < RPS_TOL) & (terms[:, -1] < RPS_TOL)
        active = active[~done]
        start += block
        block = min(block * 2, 4096)
    out = total.reshape(shape)
    return out[()] if out.ndim == 0 else out


def rps_closed_form(y, r, p):
    """Closed-form RPS through the Gauss hypergeometric function (verification path)."""
    y = np.asarray(y, dtype=float)
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    q = 1.0 - p
    F_y = nb_cdf(y, r, p)
    F_r1 = nb_cdf(y - 1.0, r + 1.0, p)
    hyp = hyp2f1(r + 1.0, 0.5, 2.0, -4.0 * p / q**2)
    return y * (2.0 * F_y - 1.0) - r * p / q**2 * (q * (2.0 * F_r1 - 1.0) + hyp)


@dataclass
class ScoreReport:
    """Pointwise scores at the posterior mean plus the posterior of each aggregate."""

    pointwise: dict
    draws: dict
    n_draws: int

    def summary(self) -> dict:
        out = {}
        for k, v in self.draws.items():
            out[k] = {
                "mean": float(np.mean(v)),
                "q025": float(np.quantile(v, 0.025)),
                "q975": float(np.quantile(v, 0.975)),
                "at_posterior_mean": float(np.sum(self.pointwise[k])),
            }
        out["n_draws"] = self.n_draws
        return out


def _scores(y, psi, r):
    return {
        "LS": log_score(y, psi, r),
        "DSS": dss(y, psi, r),
        "RPS": rps(y, r, expit(psi)),
    }


def score_posterior(psi_draws, r_draws, y, max_draws: int | None = 500) -> ScoreReport:
    """Score every draw (evenly thinned to at most ``max_draws``).

    ``psi_draws`` is ``(D, N)``; ``r_draws`` has length ``D``.
    """
    psi_draws = np.atleast_2d(np.asarray(psi_draws, dtype=float))
    r_draws = np.atleast_1d(np.asarray(r_draws, dtype=float))
    if psi_draws.shape[0] < 1 or psi_draws.shape[0] != r_draws.size:
        raise ValueError("need at least one draw, with one r per psi draw")
    D = psi_draws.shape[0]
    if max_draws is not None and D > max_draws:
        keep = np.linspace(0, D - 1, max_draws).round().astype(int)
        psi_draws, r_draws = psi_draws[keep], r_draws[keep]
    y = np.asarray(y, dtype=float)
    agg = {"LS": [], "DSS": [], "RPS": []}
    for psi, r in zip(psi_draws, r_draws):
        s = _scores(y, psi, r)
        for k in agg:
            agg[k].append(float(np.sum(s[k])))
    point = _scores(y, psi_draws.mean(axis=0), float(r_draws.mean()))
    return ScoreReport(point, {k: np.array(v) for k, v in agg.items()}, psi_draws.shape[0])


def write_score_report(report: ScoreReport, out_dir, prefix: str = "scores") -> dict:
    """Write ``<prefix>.json`` (aggregates) and ``<prefix>_pointwise.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath = out_dir / f"{prefix}.json"
    cpath = out_dir / f"{prefix}_pointwise.csv"
    jpath.write_text(json.dumps(report.summary(), indent=2) + "\n", encoding="utf-8")
    keys = list(report.pointwise)
    with open(cpath, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unit"] + keys)
        for i in range(len(report.pointwise[keys[0]])):
            w.writerow([i] + [repr(float(report.pointwise[k][i])) for k in keys])
    return {"json": jpath, "csv": cpath}
