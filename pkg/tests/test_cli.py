import numpy as np
import pytest

from fedunlearn.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from fedunlearn.datagen import read_dataset
from fedunlearn.experiment import read_metrics

SMALL = ["--set", "samples_per_client=60", "--set", "test_samples=100", "--set", "mia_nonmembers=100",
         "--set", "hidden=8", "--set", "d_k=4", "--set", "d_v=3", "--set", "decoder_hidden=8",
         "--set", "r_learn=2", "--set", "r_unlearn=2", "--set", "i_l2u=1", "--set", "i_mid=1",
         "--set", "unlearn_epochs=1"]


def test_run_writes_log(tmp_path):
    out = tmp_path / "m.csv"
    assert main(["run", *SMALL, "--out", str(out)]) == EXIT_OK
    recs = read_metrics(out)
    assert [r.stage for r in recs] == ["learn", "learn", "unlearn", "unlearn"]


def test_run_jsonl_to_stdout(capsys):
    assert main(["run", *SMALL, "--format", "jsonl", "--scenario", "retrain_reset"]) == EXIT_OK
    assert len(capsys.readouterr().out.splitlines()) == 4


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("r_learn=5\nseed=3\n")
    out = tmp_path / "m.csv"
    assert main(["run", "--config", str(cfg), *SMALL, "--seed", "4", "--out", str(out)]) == EXIT_OK
    assert len(read_metrics(out)) == 4  # --set r_learn=2 overrides the file


@pytest.mark.parametrize("argv", [["--set", "kapa=1"], ["--set", "kappa=x"], ["--config", "/nonexistent.cfg"],
                                  ["--set", "rhos=0.9"]])
def test_config_errors_exit_2(argv, capsys):
    assert main(["run", *SMALL, *argv]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_numeric_failure_exits_3(monkeypatch):
    import fedunlearn.cli as cli

    def boom(cfg):
        raise FloatingPointError("overflow")

    monkeypatch.setattr(cli, "simulate", boom)
    assert main(["run", *SMALL]) == EXIT_NUMERIC


def test_unwritable_output_exits_4(tmp_path):
    assert main(["run", *SMALL, "--out", str(tmp_path / "missing" / "m.csv")]) == EXIT_IO
    assert main(["compare", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == EXIT_IO


def test_gen_data(tmp_path):
    assert main(["gen-data", *SMALL, "--out-dir", str(tmp_path)]) == EXIT_OK
    files = sorted(tmp_path.glob("domain*.txt"))
    assert len(files) == 4
    ds, classes = read_dataset(files[0])
    assert classes == 4
    assert len(ds) == 120 and set(np.unique(ds.labels)) <= {0, 1, 2, 3}


def test_compare(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.jsonl"
    main(["run", *SMALL, "--out", str(a)])
    main(["run", *SMALL, "--scenario", "retrain_noreset", "--format", "jsonl", "--out", str(b)])
    capsys.readouterr()
    assert main(["compare", str(a), str(b)]) == EXIT_OK
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["metric", "a.csv", "b.jsonl", "delta"]
    assert any(line.startswith("final_fa") for line in table)
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,log\n1,2,3\n")
    assert main(["compare", str(a), str(bad)]) == EXIT_IO
