import csv
import json

import numpy as np
import pytest
import yaml

from nrmpp.cli import DEFAULTS, load_config, load_dataset, main, make_synthetic, prior_analysis_rows


def _write(path, text):
    path.write_text(text)
    return path


def test_load_dataset_examples(tmp_path):
    assert load_dataset(_write(tmp_path / "a.csv", "1.0\n2.0\n")).shape == (2, 1)
    b = load_dataset(_write(tmp_path / "b.csv", "1,2\n3,4\n"))
    assert b.shape == (2, 2) and b[1, 0] == 3.0
    with pytest.raises(ValueError, match="row 1"):
        load_dataset(_write(tmp_path / "c.csv", "a,b"))
    with pytest.raises(ValueError, match="empty"):
        load_dataset(_write(tmp_path / "d.csv", ""))
    with pytest.raises(ValueError, match="row 2"):
        load_dataset(_write(tmp_path / "e.csv", "1,2\n3\n"))


def test_make_synthetic_default_dataset():
    spec = DEFAULTS["data"]["synthetic"]
    z = make_synthetic(spec)
    assert z.shape == (200, 1)
    assert np.array_equal(z, make_synthetic(spec))
    se = np.sqrt(3.0) / np.sqrt(100)
    assert abs(z[:100].mean() + 5) < 3 * se and abs(z[100:].mean() - 5) < 3 * se
    with pytest.raises(ValueError):
        make_synthetic({"generator": "uniform"})


def _small_config(tmp_path, **chain):
    cfg = {
        "process": {"family": "sncp", "region": {"lower": [-15.0], "upper": [15.0]}},
        "chain": {"n_iter": 40, "burn_in": 10, **chain},
        "data": {"synthetic": {"n": 40}},
        "output": {"grid": {"npoints": 31}},
    }
    return _write(tmp_path / "cfg.yaml", yaml.safe_dump(cfg))


def test_fit_writes_summary_files(tmp_path):
    out = tmp_path / "fit"
    assert main(["fit", "--config", str(_small_config(tmp_path)), "--out", str(out), "--chains", "2"]) == 0
    for name in ("coclustering.csv", "kn_posterior.csv", "partition.csv", "density.csv",
                 "coclustering_group.csv", "trace.ndjson", "summary.csv", "manifest.json"):
        assert (out / name).exists(), name
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 0 and len(man["chain_seeds"]) == 2 and man["version"]
    assert len((out / "trace.ndjson").read_text().splitlines()) == 60
    summ = tmp_path / "summ"
    assert main(["summarize", "--trace", str(out / "trace.ndjson"), "--out", str(summ)]) == 0
    assert (summ / "kn_posterior.csv").read_text() == (out / "kn_posterior.csv").read_text()


def test_prior_analysis_output(tmp_path):
    out = tmp_path / "pa"
    assert main(["prior-analysis", "--out", str(out)]) == 0
    with open(out / "prior_analysis.csv") as fh:
        rows = list(csv.DictReader(fh))
    settings = {r["setting"] for r in rows}
    assert {"dpp:I", "dpp:II", "dpp:III"} <= settings
    for s in ("dpp:I", "dpp:II", "dpp:III"):
        assert sum(r["setting"] == s for r in rows) == 7
    assert len(rows) == len(prior_analysis_rows(load_config(environ={})))


def test_invalid_configuration_fails_cleanly(tmp_path, capsys):
    bad = _write(tmp_path / "bad.yaml", "process:\n  family: hawkes\n")
    out = tmp_path / "o1"
    assert main(["fit", "--config", str(bad), "--out", str(out)]) == 1
    assert not out.exists()
    assert "error" in capsys.readouterr().err
    unknown = _write(tmp_path / "unknown.yaml", "chain:\n  n_iterations: 5\n")
    assert main(["fit", "--config", str(unknown), "--out", str(out)]) == 1
    data = _write(tmp_path / "bad.csv", "1.0\nx\n")
    assert main(["fit", "--data", str(data), "--out", str(out)]) == 1
    assert not out.exists()


def test_environment_overrides():
    cfg = load_config(environ={"NRMPP_CHAIN__N_ITER": "77", "NRMPP_PROCESS__FAMILY": "poisson",
                               "UNRELATED": "1"})
    assert cfg["chain"]["n_iter"] == 77 and cfg["process"]["family"] == "poisson"
    with pytest.raises(ValueError):
        load_config(environ={"NRMPP_CHAIN__NOPE": "1"})


def test_print_config_lists_defaults(capsys):
    assert main(["--print-config"]) == 0
    printed = yaml.safe_load(capsys.readouterr().out)
    assert printed == load_config(environ={})


def test_simulate_writes_dataset(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--out", str(out), "--seed", "3"]) == 0
    z = load_dataset(out / "data.csv")
    assert z.shape == (100, 1)
    man = json.loads((out / "manifest.json").read_text())
    assert man["K_n"] >= 1 and man["n_atoms"] >= man["K_n"]


def test_round_trip_recovers_two_clusters(tmp_path):
    base = {
        "process": {"family": "poisson", "region": {"lower": [-10.0], "upper": [10.0]}, "rate": 0.1},
        "jumps": {"shape": 1.0, "rate": 1.0},
        "chain": {"n_iter": 800, "burn_in": 300},
        "output": {"write_trace": False, "grid": {"npoints": 11}},
    }
    hits = 0
    for rep in range(20):
        sim = {"generator": "gaussian_mixture", "n": 60, "centers": [-4.0, 4.0], "sd": 1.0, "seed": rep}
        np.savetxt(tmp_path / f"d{rep}.csv", make_synthetic(sim), delimiter=",")
        cfg = _write(tmp_path / f"c{rep}.yaml", yaml.safe_dump(base))
        out = tmp_path / f"r{rep}"
        assert main(["fit", "--config", str(cfg), "--data", str(tmp_path / f"d{rep}.csv"),
                     "--out", str(out), "--seed", str(rep)]) == 0
        with open(out / "kn_posterior.csv") as fh:
            pmf = {int(r["k"]): float(r["probability"]) for r in csv.DictReader(fh)}
        hits += max(pmf, key=pmf.get) == 2
    assert hits >= 16
