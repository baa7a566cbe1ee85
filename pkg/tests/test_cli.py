"""End-to-end smoke runs of the command line on a tiny scenario."""
import json

import numpy as np
import pytest

from valuestitch import align_train, cli, experiments, harness as h

TINY = {"name": "gaussian-1d", "fm_steps": 50, "reward_steps": 50, "stitch_steps": 20, "probe_size": 40,
        "n_steps": 10, "gen_hidden": [16, 16, 16]}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "sc.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg), "--seed", "3"]
    assert cli.main(["train-flow", *base, "--out", str(d / "gen.ckpt")]) == 0
    assert cli.main(["train-reward", *base, "--out", str(d / "rew.ckpt")]) == 0
    return d, base


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_sample_and_trajectory(work):
    d, base = work
    assert run("sample", *base, "--gen", d / "gen.ckpt", "--n", 20, "--steps", 5, "--mode", "ode",
               "--out", d / "s.csv") == 0
    assert run("sample", *base, "--gen", d / "gen.ckpt", "--n", 3, "--steps", 5, "--trajectory",
               "--out", d / "tr.csv") == 0
    assert h.read_header(d / "tr.csv") == ("chain_id", "step", "t", "z_0")
    rows = np.loadtxt(d / "tr.csv", delimiter=",", skiprows=1)
    assert rows.shape == (3 * 6, 4)


def test_search_train_eval(work):
    d, base = work
    assert run("stitch-search", *base, "--gen", d / "gen.ckpt", "--rew", d / "rew.ckpt", "--probe", 40,
               "--out", d / "table.csv") == 0
    assert h.read_header(d / "table.csv") == h.INTERFACE_HEADER
    assert len(np.loadtxt(d / "table.csv", delimiter=",", skiprows=1)) == 12
    assert run("stitch-train", *base, "--gen", d / "gen.ckpt", "--rew", d / "rew.ckpt", "--interface", "2,3",
               "--epochs", 20, "--probe", 40, "--out", d / "svm.ckpt") == 0
    assert run("eval-value", *base, "--gen", d / "gen.ckpt", "--svm", d / "svm.ckpt", "--n", 10,
               "--out", d / "ev.csv") == 0
    assert h.read_header(d / "ev.csv") == experiments.BIAS_CURVE_HEADER
    assert run("fk-steer", *base, "--gen", d / "gen.ckpt", "--svm", d / "svm.ckpt", "--n", 4, "--m", 2,
               "--out", d / "fk.csv") == 0
    assert (d / "fk.cost.csv").exists()


def test_dps_draft_nft(work):
    d, base = work
    assert run("dps", *base, "--gen", d / "gen.ckpt", "--estimator", "analytic", "--n", 20,
               "--out", d / "dps.csv") == 0
    assert run("draft", *base, "--gen", d / "gen.ckpt", "--mode", "value", "--iters", 3, "--eval-every", 1,
               "--out", d / "d.ckpt", "--log", d / "d.csv") == 0
    assert h.read_header(d / "d.csv") == align_train.TrainLog.HEADER
    assert run("nft", *base, "--gen", d / "gen.ckpt", "--iters", 3, "--eval-every", 1,
               "--out", d / "n.ckpt", "--log", d / "n.csv") == 0
    assert (d / "n.ckpt").exists()


def test_errors_exit_2(work, capsys):
    d, base = work
    assert run("sample", *base, "--gen", d / "missing.ckpt", "--out", d / "x.csv") == 2
    assert run("run-experiment", "nope", "--out", d / "x") == 2
    assert "error" in capsys.readouterr().err


def test_run_experiment_exit_code(work):
    d, _ = work
    assert run("run-experiment", "jensen-taylor", "--out", d / "jt") == 0
    assert h.read_header(d / "jt" / "metrics.csv") == h.METRICS_HEADER


def test_acceptance_exit_codes(monkeypatch, work):
    d, _ = work

    def failing(sc, seed, rep):
        rep.check("forced failure", False)

    monkeypatch.setattr(experiments, "ACCEPTANCE", {"jensen-taylor": experiments.exp_jensen_taylor})
    assert run("acceptance-all", "--out", d / "ok") == 0
    monkeypatch.setitem(experiments.EXPERIMENTS, "jensen-taylor", failing)
    assert run("acceptance-all", "--out", d / "bad") == 1
