import csv
import json

import pytest

from dctadamw.cli import OUTPUT_ENV, main, parse_config


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        "# smoke run\n"
        "d_in = 16\nd_h = 16\nd_out = 16\nteacher_rank = 2\nn_samples = 128\n"
        "rank = 4\nlr = 0.01\nsteps = 100\nbatch_size = 16\n"
        'projector = "dct"   # inline comment\n'
        f'output_dir = "{tmp_path / "out"}"\n'
    )
    return path


def test_dct_check_ok(capsys):
    assert main(["dct", "check", "64", "1"]) == 0
    out = capsys.readouterr().out
    assert "n=64" in out and "ok" in out


def test_dct_check_zero_is_usage_error():
    assert main(["dct", "check", "0"]) == 2


def test_memory_table(capsys):
    assert main(["memory", "--L", "224", "--n", "4096", "--r", "32,256,512", "--dtype", "bf16"]) == 0
    out = capsys.readouterr().out
    for cell in ("56.00 MiB", "448.00 MiB", "896.00 MiB", "32.03 MiB", "32.22 MiB", "32.44 MiB"):
        assert cell in out


def test_memory_json_and_warning(capsys):
    assert main(["memory", "--n", "16", "--r", "32", "--dtype", "fp32", "--json"]) == 0
    captured = capsys.readouterr()
    assert "warning" in captured.err
    data = json.loads(captured.out)
    assert {d["method"] for d in data} == {"svd", "dct"}


def test_bench_projection_rows(tmp_path):
    out = tmp_path / "b"
    assert main(["bench", "projection", "--dims", "8,16", "--ranks", "1,0.5", "--trials", "3",
                 "--out", str(out)]) == 0
    with open(out / "projection_sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    # 2 dims x 2 ranks x 3 trials x 5 projector rows
    assert len(rows) == 2 * 2 * 3 * 5
    assert json.loads((out / "projection_summary.json").read_text())["l2_bound_violations"] == 0


def test_bench_timing_small(tmp_path):
    assert main(["bench", "timing", "--sizes", "128", "--trials", "5", "--out", str(tmp_path)]) in (0, 1)
    rep = json.loads((tmp_path / "timing.json").read_text())
    assert rep[0]["n"] == 128 and rep[0]["ratio"] > 0


def test_bench_unknown_kind():
    assert main(["bench", "nonsense"]) == 2


def test_train_missing_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.toml")]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["train"]) == 2


def test_train_smoke(small_config, tmp_path, capsys):
    assert main(["train", "--config", str(small_config)]) == 0
    out = tmp_path / "out"
    summary = json.loads((out / "run_seed0.json").read_text())
    assert summary["steps"] == 100 and summary["final_loss"] < 1e6
    assert "final_loss" in capsys.readouterr().out


def test_train_multiple_seeds_and_override(small_config, tmp_path):
    assert main(["train", "--config", str(small_config), "--seeds", "1,2,3", "--steps", "10",
                 "--ef-mode", "quant8"]) == 0
    out = tmp_path / "out"
    for s in (1, 2, 3):
        summary = json.loads((out / f"run_seed{s}.json").read_text())
        assert summary["steps"] == 10 and summary["hyper"]["ef_mode"] == "quant8"
        assert (out / f"run_seed{s}.csv").is_file()


def test_train_output_env_override(small_config, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["train", "--config", str(small_config), "--steps", "5"]) == 0
    assert (tmp_path / "env" / "run_seed0.csv").is_file()


def test_train_idempotent(small_config, tmp_path):
    main(["train", "--config", str(small_config), "--steps", "20"])
    first = (tmp_path / "out" / "run_seed0.csv").read_text()
    main(["train", "--config", str(small_config), "--steps", "20"])
    second = (tmp_path / "out" / "run_seed0.csv").read_text()
    strip = lambda text: [line.rsplit(",", 1)[0] for line in text.splitlines()]  # drop timing column
    assert strip(first) == strip(second)


@pytest.mark.parametrize("override", [["--rank", "0"], ["--rank", "99"], ["--beta1", "1.5"],
                                      ["--bogus", "1"], ["--steps"]])
def test_train_rejects_bad_config(small_config, override):
    assert main(["train", "--config", str(small_config), *override]) == 2


def test_parse_config_values():
    cfg = parse_config('a = 1\nb = 0.5\nc = "x"\nd = true\n# skip\ne = l2\n')
    assert cfg == {"a": 1, "b": 0.5, "c": "x", "d": True, "e": "l2"}
