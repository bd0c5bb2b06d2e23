"""Command-line interface: ``spatialnb simulate | fit | score | compare``."""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .distributions import make_rng
from .infvb import make_grid, run_infvb, sample_posterior, write_grid_diagnostics
from .mcmc import McmcConfig, mcse, run_mcmc, write_draws
from .model import Hyperparams, read_dataset
from .scoring import score_posterior, write_score_report
from .simulate import generate, save_resample, scenario_grid

DEFAULTS = {
    "simulate": {
        "seed": 20201015,
        "out": "sim",
        "n_scenarios": None,
        "n_resamples": 10,
        "Ns": [1000, 1500],
        "taus": [-0.7, 0.7],
        "sigmas": [0.2, 0.4],
        "k_nn": 8,
    },
    "fit": {
        "data": None,
        "out": "fit",
        "estimator": "infvb",
        "seed": 20201015,
        "workers": 1,
        "hyperparams": {},
        "mcmc": {"n_chains": 2, "n_iter": 40000, "burn_in": 20000, "thin": 5, "target_accept": 0.44,
                 "adapt_window": 50, "initial_step": 1.0},
        "infvb": {"tau_lo": None, "tau_hi": None, "n_tau": 15, "sigma_lo": 0.05, "sigma_hi": 0.8,
                  "n_sigma": 10, "tol": 1e-6, "max_iter": 500, "mode": "tangent"},
        "score_draws": 500,
    },
    "score": {"fit": None, "out": None, "max_draws": 500},
    "compare": {"mcmc": None, "infvb": None, "out": "compare"},
}


class CliError(Exception):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _workers(flag):
    if flag is not None:
        return int(flag)
    env = os.environ.get("SPATIALNB_WORKERS")
    return int(env) if env else None


def resolve_config(command: str, args) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        loaded.pop("command", None)
        loaded.pop("version", None)
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise CliError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg = _merge(cfg, loaded)
    for key in ("seed", "out", "estimator", "data", "fit", "mcmc_dir", "infvb_dir"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[{"mcmc_dir": "mcmc", "infvb_dir": "infvb"}.get(key, key)] = val
    if command == "simulate":
        if args.scenarios is not None:
            cfg["n_scenarios"] = args.scenarios
        if args.resamples is not None:
            cfg["n_resamples"] = args.resamples
    if command == "fit":
        w = _workers(args.workers)
        if w is not None:
            cfg["workers"] = w
        if args.chains is not None:
            cfg["mcmc"]["n_chains"] = args.chains
        if cfg["data"] is None:
            raise CliError("fit needs --data DIR")
        if cfg["estimator"] not in ("mcmc", "infvb"):
            raise CliError("estimator must be 'mcmc' or 'infvb'")
        if cfg["workers"] < 1:
            raise CliError("workers must be at least 1")
    if command == "score" and cfg["fit"] is None:
        raise CliError("score needs --fit DIR")
    if command == "compare" and (cfg["mcmc"] is None or cfg["infvb"] is None):
        raise CliError("compare needs --mcmc DIR and --infvb DIR")
    cfg["command"] = command
    cfg["version"] = __version__
    return cfg


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: dict) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg)
    scenarios = scenario_grid(cfg["seed"], cfg["n_resamples"], cfg["Ns"], cfg["taus"], cfg["sigmas"])
    if cfg["n_scenarios"] is not None:
        scenarios = scenarios[: int(cfg["n_scenarios"])]
    manifest = []
    for sc in scenarios:
        sc = type(sc)(**{**sc.to_dict(), "k_nn": cfg["k_nn"]})
        for i in range(sc.n_resamples):
            data, truth = generate(sc, i)
            d = out / sc.name / f"resample_{i:02d}"
            save_resample(d, data, truth)
            manifest.append({"scenario": sc.name, "resample": i, "dir": str(d.relative_to(out)),
                             "N": sc.N, "tau": sc.tau, "sigma": sc.sigma})
    _write_json(out / "manifest.json", manifest)
    return {"datasets": len(manifest), "out": str(out)}


# ---------------------------------------------------------------------------
# fit


def _dataset_dirs(root: Path) -> list[Path]:
    if (root / "data.csv").exists():
        return [root]
    dirs = sorted(p.parent for p in root.rglob("data.csv"))
    if not dirs:
        raise CliError(f"no data.csv found under {root}")
    return dirs


def _param_names(Q, K):
    return ([f"gamma_{q + 1}" for q in range(Q)] + [f"mu_{k + 1}" for k in range(K)]
            + [f"sd_beta_{k + 1}" for k in range(K)] + ["sigma", "tau", "r"])


def _flatten_truth(truth: dict, Q, K) -> dict:
    vals = list(truth["gamma"]) + list(truth["mu"]) + list(truth["sd_beta"]) + [truth["sigma"], truth["tau"], truth["r"]]
    return dict(zip(_param_names(Q, K), vals))


def _summaries_mcmc(post, Q, K):
    rows = {}
    for block in ("gamma", "mu", "sd_beta", "sigma", "tau", "r"):
        m = np.atleast_1d(post.mean(block))
        s = np.atleast_1d(post.sd(block))
        se = np.atleast_1d(mcse(post[block]))
        rh = np.atleast_1d(post.psrf.get(block, np.full(m.shape, np.nan)))
        names = [block] if block in ("sigma", "tau", "r") else [f"{block}_{i + 1}" for i in range(m.size)]
        for n, a, b, c, d in zip(names, m, s, se, rh):
            rows[n] = {"mean": float(a), "sd": float(b), "mcse": float(c), "psrf": float(d)}
    return rows


def _summaries_infvb(comb):
    rows = {}
    for block in ("gamma", "mu", "sd_beta", "sigma", "tau", "r"):
        m = np.atleast_1d(comb.mean(block))
        s = np.atleast_1d(comb.sd(block))
        names = [block] if block in ("sigma", "tau", "r") else [f"{block}_{i + 1}" for i in range(m.size)]
        for n, a, b in zip(names, m, s):
            rows[n] = {"mean": float(a), "sd": float(b)}
    return rows


def _fit_one(cfg, ddir: Path, out: Path, stream: int) -> dict:
    data = read_dataset(ddir / "data.csv", ddir / "weights.txt")
    hyper = Hyperparams.from_dict(cfg["hyperparams"], data.Q, data.K) if cfg["hyperparams"] \
        else Hyperparams.default(data.Q, data.K)
    out.mkdir(parents=True, exist_ok=True)
    truth = None
    if (ddir / "truth.json").exists():
        truth = _flatten_truth(json.loads((ddir / "truth.json").read_text(encoding="utf-8")), data.Q, data.K)
    t0 = time.perf_counter()
    info = {"dataset": str(ddir), "estimator": cfg["estimator"], "N": data.N}
    if cfg["estimator"] == "mcmc":
        mc = cfg["mcmc"]
        mcfg = McmcConfig(seed=int(cfg["seed"]) + stream, n_workers=cfg["workers"], **mc)
        try:
            post = run_mcmc(data, hyper, mcfg)
        except Exception as exc:
            raise RuntimeError(f"MCMC failed on {ddir}: {exc}") from exc
        rows = _summaries_mcmc(post, data.Q, data.K)
        write_draws(post, out)
        np.savez_compressed(out / "score_draws.npz", psi=post.pooled("psi"), r=post.pooled("r"))
        info["acceptance_rate_tau"] = post.acceptance_rate_tau
        info["step_scale"] = post.step_scale.tolist()
    else:
        iv = cfg["infvb"]
        lo, hi = iv["tau_lo"], iv["tau_hi"]
        if lo is None or hi is None:
            # simulation design: the tau half-interval follows the sign of the true tau;
            # without a truth file the full symmetric interval is used
            sign = np.sign(truth["tau"]) if truth else 0
            lo, hi = {1: (0.0, 1.4), -1: (-1.4, 0.0)}.get(int(sign), (-1.4, 1.4))
        grid = make_grid(lo, hi, iv["n_tau"], iv["sigma_lo"], iv["sigma_hi"], iv["n_sigma"])
        comb, fits = run_infvb(data, hyper, grid, iv["tol"], iv["max_iter"], cfg["workers"], iv["mode"])
        rows = _summaries_infvb(comb)
        write_grid_diagnostics(out / "grid_diagnostics.csv", fits)
        _write_rows(out / "grid_fits.csv", ["tau", "sigma", "log_weight", "weight", "n_iter", "converged"],
                    [(f.tau, f.sigma, f.log_weight, float(w), f.n_iter, int(f.converged))
                     for f, w in zip(fits, comb.grid_weights)])
        psi, r = sample_posterior(comb, fits, data, int(cfg["score_draws"]), make_rng(int(cfg["seed"]) + stream, 999))
        np.savez_compressed(out / "score_draws.npz", psi=psi, r=r)
        info["tau_grid"] = [lo, hi]
    info["seconds"] = time.perf_counter() - t0
    header = ["parameter", "mean", "sd"] + (["mcse", "psrf"] if cfg["estimator"] == "mcmc" else [])
    if truth:
        header += ["true", "apb"]
    table = []
    for name, row in rows.items():
        line = [name, row["mean"], row["sd"]]
        if cfg["estimator"] == "mcmc":
            line += [row["mcse"], row["psrf"]]
        if truth:
            tv = truth[name]
            line += [float(tv), abs((row["mean"] - tv) / tv) * 100 if tv != 0 else float("nan")]
        table.append(line)
    _write_rows(out / "summary.csv", header, table)
    _write_json(out / "timing.json", info)
    (out / "dataset.txt").write_text(str(ddir.resolve()) + "\n", encoding="utf-8")
    return {"rows": rows, "truth": truth, "info": info}


def _table2(results) -> list:
    """MPM, SDPM, APB and MPSD across resamples, one row per parameter."""
    names = list(results[0]["rows"])
    out = []
    for n in names:
        means = np.array([r["rows"][n]["mean"] for r in results])
        sds = np.array([r["rows"][n]["sd"] for r in results])
        mpm = float(means.mean())
        row = {"parameter": n, "MPM": mpm, "SDPM": float(means.std(ddof=1)) if means.size > 1 else 0.0,
               "MPSD": float(sds.mean())}
        if results[0]["truth"]:
            tv = results[0]["truth"][n]
            row["true"] = float(tv)
            row["APB"] = abs((mpm - tv) / tv) * 100 if tv != 0 else float("nan")
        out.append(row)
    return out


def cmd_fit(cfg: dict) -> dict:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg)
    root = Path(cfg["data"])
    dirs = _dataset_dirs(root)
    results = []
    for j, d in enumerate(dirs):
        sub = out if len(dirs) == 1 else out / d.relative_to(root)
        results.append(_fit_one(cfg, d, sub, j))
    groups = {}
    for d, r in zip(dirs, results):
        groups.setdefault(str(d.parent.relative_to(root)) if len(dirs) > 1 else ".", []).append(r)
    table_rows = []
    for g, rs in groups.items():
        for row in _table2(rs):
            table_rows.append({"group": g, "n_resamples": len(rs), **row})
    keys = ["group", "n_resamples", "parameter", "true", "MPM", "SDPM", "APB", "MPSD"]
    if not any("true" in r for r in table_rows):
        keys = [k for k in keys if k not in ("true", "APB")]
    _write_rows(out / "table2.csv", keys, [[r.get(k, "") for k in keys] for r in table_rows])
    total = sum(r["info"]["seconds"] for r in results)
    _write_json(out / "run.json", {"datasets": len(dirs), "seconds": total, "estimator": cfg["estimator"]})
    return {"datasets": len(dirs), "seconds": total, "out": str(out)}


# ---------------------------------------------------------------------------
# score and compare


def cmd_score(cfg: dict) -> dict:
    fit_dir = Path(cfg["fit"])
    out = Path(cfg["out"]) if cfg["out"] else fit_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg)
    fits = sorted(p.parent for p in fit_dir.rglob("score_draws.npz"))
    if not fits:
        raise CliError(f"no score_draws.npz under {fit_dir}")
    done = []
    for f in fits:
        ddir = Path((f / "dataset.txt").read_text(encoding="utf-8").strip())
        data = read_dataset(ddir / "data.csv", ddir / "weights.txt")
        z = np.load(f / "score_draws.npz")
        rep = score_posterior(z["psi"], z["r"], data.y, cfg["max_draws"])
        target = out if len(fits) == 1 else out / f.relative_to(fit_dir)
        write_score_report(rep, target)
        done.append(str(target))
    return {"scored": len(done)}


def _read_summary(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["parameter"]: r for r in csv.DictReader(fh)}


def cmd_compare(cfg: dict) -> dict:
    a, b = Path(cfg["mcmc"]), Path(cfg["infvb"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg)
    sa, sb = _read_summary(a / "summary.csv"), _read_summary(b / "summary.csv")
    rows = []
    for name in sa:
        if name not in sb:
            continue
        ma, mb = float(sa[name]["mean"]), float(sb[name]["mean"])
        rows.append([name, ma, mb, mb - ma, float(sa[name]["sd"]), float(sb[name]["sd"])])
    _write_rows(out / "comparison.csv", ["parameter", "mcmc_mean", "infvb_mean", "delta", "mcmc_sd", "infvb_sd"], rows)
    ta = json.loads((a / "timing.json").read_text(encoding="utf-8"))
    tb = json.loads((b / "timing.json").read_text(encoding="utf-8"))
    result = {"mcmc_seconds": ta["seconds"], "infvb_seconds": tb["seconds"],
              "timing_ratio": ta["seconds"] / tb["seconds"] if tb["seconds"] > 0 else None}
    for tag, d in (("mcmc", a), ("infvb", b)):
        if (d / "scores.json").exists():
            result[f"{tag}_scores"] = json.loads((d / "scores.json").read_text(encoding="utf-8"))
    if (b / "grid_diagnostics.csv").exists():
        (out / "elbo_traces.csv").write_text((b / "grid_diagnostics.csv").read_text(encoding="utf-8"), encoding="utf-8")
    _write_json(out / "comparison.json", result)
    return result


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatialnb", description="Spatial negative binomial estimation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config (same layout as resolved_config.json)")
        sp.add_argument("--out", help="output directory")

    s = sub.add_parser("simulate", help="generate synthetic datasets")
    common(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--scenarios", type=int, help="use only the first N scenarios")
    s.add_argument("--resamples", type=int, help="resamples per scenario")

    f = sub.add_parser("fit", help="fit a dataset (or a tree of datasets)")
    common(f)
    f.add_argument("--data", help="directory with data.csv and weights.txt, or a tree of them")
    f.add_argument("--estimator", choices=["mcmc", "infvb"])
    f.add_argument("--workers", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--chains", type=int)

    sc = sub.add_parser("score", help="score the posterior draws of a fit")
    common(sc)
    sc.add_argument("--fit", help="fit output directory")

    c = sub.add_parser("compare", help="compare an MCMC and an INFVB fit")
    common(c)
    c.add_argument("--mcmc", dest="mcmc_dir")
    c.add_argument("--infvb", dest="infvb_dir")
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "score": cmd_score, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        result = COMMANDS[args.command](cfg)
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if os.environ.get("SPATIALNB_DEBUG"):
            err["traceback"] = traceback.format_exc()
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps(result, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
