import csv
import json
import subprocess
import sys

import pytest

from glamor.cli import main
from glamor.config import ConfigError, load_config
from glamor.seqmodel.checkpoint import read_archive


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--env", "grid7", "--steps", "1500", "--seed", "1", "--out", str(out),
                 "--eval-goals", "4", "--eval-trials", "1", "--log-interval", "500",
                 "--checkpoint-interval", "1000"])
    assert code == 0
    return out


def test_train_artifacts(trained):
    echo = json.loads((trained / "config.json").read_text())
    assert echo["command"] == "train" and echo["seeds"] == [1] and echo["steps"] == 1500
    rows = _rows(trained / "seed_1" / "metrics.csv")
    assert list(rows[0]) == ["format_version", "step", "eps", "id_loss", "prior_loss",
                             "eval_achievement_rate", "eval_optimal_rate"]
    assert rows[-1]["eval_achievement_rate"] != ""
    assert (trained / "seed_1" / "model.npz").is_file()
    assert list((trained / "seed_1").glob("checkpoint_step*.npz"))


def test_train_is_byte_reproducible(trained, tmp_path):
    code = main(["train", "--env", "grid7", "--steps", "1500", "--seed", "1", "--out", str(tmp_path),
                 "--eval-goals", "4", "--eval-trials", "1", "--log-interval", "500",
                 "--checkpoint-interval", "1000"])
    assert code == 0
    for name in ("metrics.csv", "model.npz"):
        assert (tmp_path / "seed_1" / name).read_bytes() == (trained / "seed_1" / name).read_bytes()


def test_compute_sweep_heatmaps(trained, tmp_path):
    ckpt = trained / "seed_{seed}" / "model.npz"
    args = ["compute-sweep", "--env", "grid7", "--seed", "1", "--checkpoint", str(ckpt),
            "--budgets", "1,8", "--eval-trials", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--include-start"]) == 0
    rows = _rows(tmp_path / "a" / "compute_sweep.csv")
    assert [r["budget"] for r in rows] == ["1", "8"]
    assert len({r["model_checksum"] for r in rows}) == 1
    heat = _rows(tmp_path / "a" / "heatmaps" / "seed1_N8_achievement.csv")
    assert len(heat) == 49
    center = [r for r in heat if (r["x"], r["y"]) == ("3", "3")][0]
    assert center["rate"] == ""
    heat_b = _rows(tmp_path / "b" / "heatmaps" / "seed1_N8_achievement.csv")
    assert [r for r in heat_b if (r["x"], r["y"]) == ("3", "3")][0]["rate"] == "1.0"
    pgm = (tmp_path / "a" / "heatmaps" / "seed1_N8_optimal.pgm").read_text().split("\n")
    assert pgm[:3] == ["P2", "7 7", "255"]
    assert (tmp_path / "a" / "compute_sweep.csv").read_bytes() == \
        (tmp_path / "b" / "compute_sweep.csv").read_bytes()


def test_termination_and_sparse(trained, tmp_path):
    ckpt = str(trained / "seed_1" / "model.npz")
    base = ["--env", "grid7", "--seed", "1", "--checkpoint", ckpt, "--eval-goals", "3",
            "--eval-trials", "1", "--eval-budget", "8"]
    assert main(["termination", *base, "--out", str(tmp_path / "t")]) == 0
    rows = _rows(tmp_path / "t" / "termination.csv")
    assert [r["termination"] for r in rows] == ["shortest", "plan_end", "naive_end"]
    assert len({r["model_checksum"] for r in rows}) == 1
    assert main(["sparse", *base, "--out", str(tmp_path / "s")]) == 0
    assert [r["mode"] for r in _rows(tmp_path / "s" / "sparse.csv")] == ["guided", "sparse"]


def test_eval_with_trace(trained, tmp_path):
    ckpt = str(trained / "seed_1" / "model.npz")
    assert main(["eval", "--env", "grid7", "--seed", "1", "--checkpoint", ckpt, "--out", str(tmp_path),
                 "--eval-goals", "2", "--eval-trials", "1", "--eval-budget", "4", "--trace"]) == 0
    rec = json.loads((tmp_path / "trace_seed1.jsonl").read_text().splitlines()[0])
    assert {"state", "goal", "t", "candidate", "tokens", "z", "score", "pruned"} <= set(rec)
    assert len(_rows(tmp_path / "episodes_seed1.csv")) == 2


def test_gcsl_train_and_eval(tmp_path):
    assert main(["train", "--env", "die", "--algo", "gcsl", "--steps", "600", "--out",
                 str(tmp_path / "g"), "--eval-trials", "5"]) == 0
    ckpt = tmp_path / "g" / "seed_0" / "model.npz"
    assert read_archive(ckpt)[0]["format"] == "glamor-gcsl"
    assert main(["eval", "--env", "die", "--checkpoint", str(ckpt), "--out", str(tmp_path / "e"),
                 "--eval-trials", "2"]) == 0
    assert _rows(tmp_path / "e" / "eval.csv")[0]["algo"] == "gcsl"


def test_self_contained_experiments(tmp_path):
    assert main(["causal", "--episodes", "300", "--out", str(tmp_path / "c")]) == 0
    rows = _rows(tmp_path / "c" / "causal.csv")
    assert {r["regime"] for r in rows} == {"reactive_expert", "open_loop"}
    assert all({"predicted_win", "empirical_do_win"} <= set(r) for r in rows)
    assert main(["die", "--iterations", "5", "--steps", "300", "--out", str(tmp_path / "d")]) == 0
    trace = _rows(tmp_path / "d" / "die_exact_map.csv")
    assert len(trace) == 6 and "pi_loaded_g1" in trace[0]
    assert len(_rows(tmp_path / "d" / "die_planner.csv")) == 6
    assert main(["offpolicy", "--steps", "800", "--eval-goals", "3", "--eval-trials", "1",
                 "--eval-budget", "8", "--out", str(tmp_path / "o")]) == 0
    assert [r["algo"] for r in _rows(tmp_path / "o" / "offpolicy.csv")] == ["glamor", "gcsl"]


def test_config_errors_leave_no_directory(tmp_path, capsys):
    out = tmp_path / "never"
    assert main(["train", "--env", "mars", "--out", str(out)]) == 2
    assert main(["train", "--steps", "0", "--out", str(out)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"env": "grid7", "learning_rate": 3}))
    assert main(["train", "--config", str(bad), "--out", str(out)]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert not out.exists()


def test_missing_checkpoint_exit_code(tmp_path):
    out = tmp_path / "o"
    assert main(["compute-sweep", "--checkpoint", str(tmp_path / "none.npz"), "--out", str(out)]) == 3
    assert not out.exists()
    junk = tmp_path / "junk.npz"
    junk.write_text("not an archive")
    assert main(["eval", "--checkpoint", str(junk), "--out", str(out)]) == 3


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--out", "x"])
    assert exc.value.code == 2
    assert main(["train"]) == 2


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"env": "die", "seeds": [3, 4], "planner": {"budget": 7},
                                "out": "from-file"}))
    cfg = load_config(path, {"seeds": [9], "planner.budget": 11})
    assert cfg.env == "die" and cfg.seeds == [9] and cfg.planner.budget == 11
    assert cfg.out == "from-file"
    with pytest.raises(ConfigError):
        load_config(path, {"planner.gamma": 0.0})
    with pytest.raises(ConfigError):
        load_config(path, {"planner.nope": 1})


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "glamor", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "eval", "compute-sweep", "termination", "sparse", "offpolicy", "causal", "die"):
        assert cmd in res.stdout
