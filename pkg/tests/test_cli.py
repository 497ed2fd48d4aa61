import csv
import hashlib
import json

import numpy as np
import pytest

from eemax import chanmodel as cm
from eemax import cli, trainer


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "train.bin"
    assert run("gen-data", "--users", 3, "--samples", 16, "--seed", 1, "--pmax-dbm", 30, "--out", path) == 0
    return path


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_gen_data_writes_dataset_and_manifest(data):
    ds = cm.load_dataset(data)
    assert len(ds) == 16 and ds.config.num_users == 3
    assert ds.config.p_max == pytest.approx(1.0)
    m = cli.RunManifest.read(cli.manifest_path(data))
    assert m.subcommand == "gen-data" and m.seed == 1 and m.config["p_max_watts"] == pytest.approx(1.0)


def test_gen_data_same_seed_same_hash(tmp_path):
    for name in ("a.bin", "b.bin"):
        assert run("gen-data", "--users", 2, "--samples", 5, "--seed", 3, "--out", tmp_path / name) == 0
    assert sha(tmp_path / "a.bin") == sha(tmp_path / "b.bin")


def test_gen_data_full_sample_count(tmp_path):
    out = tmp_path / "big.bin"
    assert run("gen-data", "--users", 7, "--samples", 6000, "--out", out) == 0
    assert len(cm.load_dataset(out)) == 6000


@pytest.mark.parametrize("argv", [
    ["gen-data", "--users", "0", "--out", "x.bin"],
    ["gen-data", "--samples", "-1", "--out", "x.bin"],
    ["gen-data", "--pmax-dbm", "0", "--pmax-dbw", "-30", "--out", "x.bin"],
    ["train", "--data", "missing.bin", "--out-dir", "o"],
    ["nonsense"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2


def test_dbm_dbw_equivalence(tmp_path):
    run("gen-data", "--users", 2, "--samples", 2, "--pmax-dbm", 0, "--out", tmp_path / "a.bin")
    run("gen-data", "--users", 2, "--samples", 2, "--pmax-dbw", -30, "--out", tmp_path / "b.bin")
    pa = cm.load_dataset(tmp_path / "a.bin").config.p_max
    pb = cm.load_dataset(tmp_path / "b.bin").config.p_max
    assert pa == pytest.approx(1e-3) and pb == pytest.approx(1e-3)


def test_config_file(tmp_path):
    conf = tmp_path / "g.conf"
    conf.write_text("# comment\nusers = 2\nsamples = 4\n")
    out = tmp_path / "c.bin"
    assert run("gen-data", "--config", conf, "--samples", 3, "--out", out) == 0
    ds = cm.load_dataset(out)
    assert ds.config.num_users == 2 and len(ds) == 3  # explicit flag wins
    conf.write_text("colour = blue\n")
    assert run("gen-data", "--config", conf, "--out", out) == 2


def test_train_epochs_zero_initial_row_only(data, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--data", data, "--epochs", 0, "--out-dir", out) == 0
    rows = trainer.read_metrics_csv(out / "metrics.csv")
    assert [m.epoch for m in rows] == [0]
    assert header(out / "metrics.csv") == list(trainer.METRICS_HEADER)


def test_train_accepts_tiny_learning_rate(data, tmp_path):
    assert run("train", "--data", data, "--epochs", 1, "--lr", "2e-7", "--batch", 8, "--out-dir", tmp_path / "r") == 0


def test_train_resume_continues_numbering(data, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--data", data, "--epochs", 2, "--batch", 8, "--smc", 2, "--out-dir", out) == 0
    assert run("train", "--data", data, "--epochs", 2, "--batch", 8, "--smc", 2, "--out-dir", out, "--resume") == 0
    rows = trainer.read_metrics_csv(out / "metrics.csv")
    assert [m.epoch for m in rows] == [0, 1, 2, 3, 4]
    assert json.loads((out / "state.json").read_text())["epoch"] == 4


def test_resume_without_state_is_usage_error(data, tmp_path):
    assert run("train", "--data", data, "--out-dir", tmp_path / "empty", "--resume") == 2


def test_numerical_abort_exit_code(data, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise trainer.NumericalAbort("non-finite loss", 3)

    monkeypatch.setattr(trainer, "train", boom)
    assert run("train", "--data", data, "--epochs", 1, "--out-dir", tmp_path / "r") == 3


def test_eval_with_and_without_oracle(data, tmp_path):
    out = tmp_path / "run"
    run("train", "--data", data, "--epochs", 1, "--batch", 8, "--out-dir", out)
    assert run("eval", "--checkpoint", out, "--data", data, "--out", tmp_path / "e.csv") == 0
    h = header(tmp_path / "e.csv")
    assert "ratio" not in h and h[:2] == ["sample_index", "ee_net"]

    assert run("oracle", "--data", data, "--mode", "grid", "--grid-points", 5, "--out", tmp_path / "o.csv") == 0
    assert run("eval", "--checkpoint", out, "--data", data, "--oracle", tmp_path / "o.csv",
               "--out", tmp_path / "e2.csv") == 0
    h = header(tmp_path / "e2.csv")
    assert h[:4] == ["sample_index", "ee_oracle", "ee_net", "ratio"]
    with open(tmp_path / "e2.csv", newline="") as fh:
        ratios = [float(r["ratio"]) for r in csv.DictReader(fh)]
    assert len(ratios) == 16 and all(np.isfinite(ratios))


def test_eval_dimension_mismatch(data, tmp_path):
    out = tmp_path / "run"
    run("train", "--data", data, "--epochs", 0, "--out-dir", out)
    other = tmp_path / "two.bin"
    run("gen-data", "--users", 2, "--samples", 4, "--out", other)
    run("oracle", "--data", other, "--out", tmp_path / "o.csv")
    assert run("eval", "--checkpoint", out, "--data", data, "--oracle", tmp_path / "o.csv",
               "--out", tmp_path / "e.csv") == 2


def test_oracle_grid_refused_for_seven_users(tmp_path, capsys):
    d = tmp_path / "seven.bin"
    run("gen-data", "--users", 7, "--samples", 2, "--out", d)
    assert run("oracle", "--data", d, "--mode", "grid", "--out", tmp_path / "o.csv") == 2
    assert "multistart" in capsys.readouterr().err


def test_rastrigin_two_column_trace(tmp_path):
    out = tmp_path / "r.csv"
    assert run("rastrigin", "--n", 10, "--method", "both", "--iterations", 5, "--out", out) == 0
    assert header(out) == ["iteration", "f_box", "f_gd"]
    assert len(out.read_text().splitlines()) == 7


def test_replay_reproduces_outputs(tmp_path):
    out = tmp_path / "r.csv"
    run("rastrigin", "--n", 3, "--method", "box", "--iterations", 5, "--seed", 4, "--out", out)
    first = sha(out)
    out.unlink()
    assert run("replay", cli.manifest_path(out)) == 0
    assert sha(out) == first

    d = tmp_path / "d.bin"
    run("gen-data", "--users", 2, "--samples", 3, "--seed", 8, "--out", d)
    first = sha(d)
    d.unlink()
    assert run("replay", cli.manifest_path(d)) == 0
    assert sha(d) == first


def test_train_replay_reproduces_metrics(data, tmp_path):
    out = tmp_path / "run"
    run("train", "--data", data, "--epochs", 2, "--batch", 8, "--smc", 2, "--out-dir", out)
    first = sha(out / "metrics.csv")
    (out / "metrics.csv").unlink()
    (out / "state.json").unlink()
    assert run("replay", out / "manifest.json") == 0
    assert sha(out / "metrics.csv") == first


def test_manifest_written_before_work(tmp_path, monkeypatch):
    seen = {}

    def fake_generate(*a, **k):
        seen["manifest"] = cli.manifest_path(tmp_path / "x.bin").exists()
        raise OSError("disk full")

    monkeypatch.setattr(cm, "generate_dataset", fake_generate)
    assert run("gen-data", "--users", 2, "--samples", 2, "--out", tmp_path / "x.bin") == 2
    assert seen["manifest"]
