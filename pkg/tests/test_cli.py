import csv
import json

import pytest

from spatialnb.cli import main

TINY_SIM = {"Ns": [60], "taus": [-0.7], "sigmas": [0.3], "k_nn": 5}
TINY_FIT = {
    "mcmc": {"n_chains": 2, "n_iter": 300, "burn_in": 100, "thin": 2},
    "infvb": {"n_tau": 3, "n_sigma": 3, "max_iter": 200},
    "score_draws": 100,
}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_config(path, cfg):
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    cfg = write_config(root / "sim.json", TINY_SIM)
    assert main(["simulate", "--config", str(cfg), "--out", str(root / "out"), "--resamples", "1"]) == 0
    return root / "out"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_one_dataset(tmp_path, capsys):
    code, out, _ = run(["simulate", "--scenarios", "1", "--resamples", "1", "--out", tmp_path / "s"], capsys)
    assert code == 0
    files = sorted((tmp_path / "s").rglob("data.csv"))
    assert len(files) == 1
    d = files[0].parent
    assert (d / "weights.txt").exists() and (d / "truth.json").exists()
    assert (tmp_path / "s" / "resolved_config.json").exists()


def test_simulate_rerun_byte_identical(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", TINY_SIM)
    for name in ("a", "b"):
        assert run(["simulate", "--config", cfg, "--resamples", "2", "--out", tmp_path / name], capsys)[0] == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 3
    for f in files:
        if f.name == "resolved_config.json":
            continue
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_resolved_config_replays(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", TINY_SIM)
    run(["simulate", "--config", cfg, "--resamples", "1", "--seed", "7", "--out", tmp_path / "a"], capsys)
    resolved = tmp_path / "a" / "resolved_config.json"
    assert json.loads(resolved.read_text())["seed"] == 7
    run(["simulate", "--config", resolved, "--out", tmp_path / "b"], capsys)
    a = sorted((tmp_path / "a").rglob("data.csv"))
    b = sorted((tmp_path / "b").rglob("data.csv"))
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_fit_mcmc_then_score(sim_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "f.json", {**TINY_FIT, "estimator": "mcmc"})
    code, out, _ = run(["fit", "--config", cfg, "--data", sim_dir, "--out", tmp_path / "m"], capsys)
    assert code == 0 and json.loads(out)["datasets"] == 1
    rows = read_csv(tmp_path / "m" / "summary.csv")
    assert set(rows[0]) == {"parameter", "mean", "sd", "mcse", "psrf", "true", "apb"}
    assert {"gamma_1", "mu_1", "r", "tau", "sigma"} <= {r["parameter"] for r in rows}
    assert (tmp_path / "m" / "draws_tau.csv").exists()
    assert read_csv(tmp_path / "m" / "table2.csv")[0]["MPSD"]
    code, _, _ = run(["score", "--fit", tmp_path / "m"], capsys)
    assert code == 0
    scores = json.loads((tmp_path / "m" / "scores.json").read_text())
    assert {"LS", "DSS", "RPS"} <= set(scores)


def test_fit_infvb_and_compare(sim_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "f.json", TINY_FIT)
    code, _, _ = run(["fit", "--config", cfg, "--data", sim_dir, "--out", tmp_path / "v"], capsys)
    assert code == 0
    assert (tmp_path / "v" / "grid_diagnostics.csv").exists()
    fits = read_csv(tmp_path / "v" / "grid_fits.csv")
    assert len(fits) == 9
    assert abs(sum(float(r["weight"]) for r in fits) - 1) < 1e-9
    # the true tau is negative, so the grid covers the negative half-interval
    assert max(float(r["tau"]) for r in fits) == 0.0
    code, out, _ = run(["compare", "--mcmc", tmp_path / "v", "--infvb", tmp_path / "v", "--out", tmp_path / "c"], capsys)
    assert code == 0
    rows = read_csv(tmp_path / "c" / "comparison.csv")
    assert rows and all(float(r["delta"]) == 0.0 for r in rows)
    assert json.loads(out)["timing_ratio"] == pytest.approx(1.0)
    assert (tmp_path / "c" / "elbo_traces.csv").exists()


def test_fit_without_truth_has_no_bias_columns(sim_dir, tmp_path, capsys):
    src = next(sim_dir.rglob("data.csv")).parent
    d = tmp_path / "d"
    d.mkdir()
    for name in ("data.csv", "weights.txt"):
        (d / name).write_bytes((src / name).read_bytes())
    cfg = write_config(tmp_path / "f.json", TINY_FIT)
    assert run(["fit", "--config", cfg, "--data", d, "--out", tmp_path / "v"], capsys)[0] == 0
    rows = read_csv(tmp_path / "v" / "summary.csv")
    assert set(rows[0]) == {"parameter", "mean", "sd"}
    assert "APB" not in read_csv(tmp_path / "v" / "table2.csv")[0]
    fits = read_csv(tmp_path / "v" / "grid_fits.csv")
    assert min(float(r["tau"]) for r in fits) == -1.4 and max(float(r["tau"]) for r in fits) == 1.4


@pytest.mark.parametrize("argv", [
    ["fit", "--out", "x"],
    ["fit", "--data", "/nonexistent/path"],
    ["score", "--fit", "/nonexistent/path"],
    ["compare", "--mcmc", "a"],
])
def test_errors_exit_one_with_json(argv, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, out, err = run(argv, capsys)
    assert code == 1 and out == ""
    payload = json.loads(err)
    assert payload["command"] == argv[0] and payload["message"]


def test_unknown_config_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"bogus": 1})
    code, _, err = run(["simulate", "--config", cfg, "--out", tmp_path / "s"], capsys)
    assert code == 1 and "bogus" in json.loads(err)["message"]
