import json
import subprocess
import sys

import pytest

from hibid.cli import main

CONFIG = {
    "sim": {"n_advertisers": 15, "n_channels": 2, "days": 3, "channel_volumes": [400, 250], "retrieval_size": 4,
            "seed": 4},
    "train": {"high_iters": 20, "low_iters": 20, "hidden": [8, 8], "high_batch_size": 32, "low_batch_size": 32,
              "n_repeat": 2, "high_lr": 1e-3, "low_lr": 1e-3},
    "train_days": [0, 1], "eval_days": [2],
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(CONFIG))
    cfg = d / "cfg.json"
    assert run("gen-data", "--config", cfg, "--out", d / "logs") == 0
    assert run("train-high", "--config", cfg, "--logs", d / "logs", "--out", d / "ckpt") == 0
    assert run("train-low", "--config", cfg, "--logs", d / "logs", "--out", d / "ckpt") == 0
    return d


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_nonzero(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"sim": {"nope": 1}}))
    assert run("gen-data", "--config", tmp_path / "bad.json", "--out", tmp_path / "o") == 1
    assert run("gen-data", "--set", "sim.n_channels=1", "--out", tmp_path / "o") == 1


def test_missing_inputs_nonzero(tmp_path):
    assert run("train-high", "--logs", tmp_path / "none", "--out", tmp_path / "c") == 1
    assert run("replay", "--logs", tmp_path, "--ckpt", tmp_path / "none", "--out", tmp_path / "r") == 1


def test_checkpoint_layout(workdir):
    for sub in ("high", "low", "eval_c", "eval_u", "cvae_h", "cvae_l"):
        assert (workdir / "ckpt" / sub).is_dir()


def test_replay_evaluate_and_trace(workdir, capsys):
    d = workdir
    cfg = d / "cfg.json"
    assert run("replay", "--config", cfg, "--logs", d / "logs", "--ckpt", d / "ckpt", "--out", d / "run",
               "--trace") == 0
    assert (d / "run_trace.csv").read_text().startswith("day,request_id,advertiser_id,bid_ratio,lambda,cpc_pred")
    capsys.readouterr()
    assert run("evaluate", "--logs", d / "run", "--reference", d / "logs", "--allocations",
               d / "run_allocations.json") == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0.0 <= rep["report"]["budget_satisfactory_ratio"] <= 1.0


def test_evaluate_identical_logs_zero(workdir, capsys):
    assert run("evaluate", "--logs", workdir / "logs", "--reference", workdir / "logs") == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep["normalized"].values()) == {0.0}


def test_baseline_replays(workdir):
    d = workdir
    for pol in ("base", "pid", "flat"):
        assert run("replay", "--config", d / "cfg.json", "--logs", d / "logs", "--policy", pol,
                   "--out", d / f"run_{pol}") == 0


def test_mape_sweep_output(workdir, capsys):
    assert run("mape-sweep", "--logs", workdir / "logs", "--gammas", "0.5,1.0") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "gamma,mape,n_used,n_excluded"
    assert lines[2].split(",")[1] == "0.0"


def test_oracle_compare_small(tmp_path, capsys):
    assert run("oracle-compare", "--instances", 1, "--days", 20, "--set", "train.high_iters=10",
               "--set", "train.hidden=[8]", "--out", tmp_path / "o.csv") == 0
    assert (tmp_path / "o.csv").read_text().startswith("instance,")


def test_serve_protocol(workdir):
    d = workdir
    reqs = [{"advertiser_id": 1, "channel_id": 0, "timestamp": 3600.0, "features": [1.0, 0.3, 0.3, 0.3]},
            {"advertiser_id": 1, "channel_id": 0, "charged": 0.8, "outcome": True},
            {"advertiser_id": 2, "channel_id": 1, "timestamp": 7200.0, "features": [0.3, 1.0, 0.3, 0.3]}]
    text = "\n".join(json.dumps(r) for r in reqs) + "\n"
    cmd = [sys.executable, "-m", "hibid.cli", "serve", "--config", str(d / "cfg.json"), "--ckpt", str(d / "ckpt"),
           "--advertisers", str(d / "logs" / "advertisers.json")]
    out = subprocess.run(cmd, input=text, capture_output=True, text=True, check=True).stdout.splitlines()
    assert len(out) == 2
    for line in out:
        resp = json.loads(line)
        assert set(resp) == {"advertiser_id", "bid_price", "lambda", "cpc_pred"}
        assert resp["bid_price"] > 0
    bad = subprocess.run(cmd, input='{"advertiser_id": 1}\nnot json\n', capture_output=True, text=True)
    assert bad.returncode == 1
    assert all("error" in json.loads(l) for l in bad.stdout.splitlines())


def test_set_override_changes_config(tmp_path):
    from hibid.cli import load_config
    cfg = load_config(None, ["sim.n_advertisers=7", "high_iters=3", "train.hidden=[4,4]"])
    assert cfg.sim.n_advertisers == 7 and cfg.train.high_iters == 3 and cfg.train.hidden == (4, 4)
