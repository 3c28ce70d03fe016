import json
import subprocess
import sys

import pytest

from med.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

from conftest import synthetic_image, write_folder


@pytest.fixture
def data(tmp_path):
    return write_folder(tmp_path / "data", [synthetic_image(32, s) for s in range(3)])


@pytest.fixture
def config(tmp_path, data):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"data.root = {data}\npatch = 16\nbatch = 2\niters = 3\nlr = 1e-3\nckpt_every = 2\n"
        "backbone.kind = conv_small\nbackbone.depth = 1\nbackbone.channels = 4\n"
        "pool = gaussian sigma=5:50 1\n"
    )
    return cfg


def test_no_command_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_bad_flag_exits_1():
    with pytest.raises(SystemExit) as e:
        main(["corrupt", "--bogus"])
    assert e.value.code == EXIT_USAGE


def test_bad_pool_is_usage_error(tmp_path, data):
    (tmp_path / "bad.pool").write_text("gaussian sigma=-1:3 1\n")
    assert main(["corrupt", "--in", str(data), "--out", str(tmp_path / "o"), "--pool", str(tmp_path / "bad.pool")]) == EXIT_USAGE


def test_missing_input_is_data_error(tmp_path):
    (tmp_path / "p.pool").write_text("gaussian sigma=25:25 1\n")
    assert main(["corrupt", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--pool", str(tmp_path / "p.pool")]) == EXIT_DATA
    assert main(["denoise", "--ckpt", str(tmp_path / "x.pt"), "--in", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_corrupt_byte_identical(tmp_path, data):
    pool = tmp_path / "p.pool"
    pool.write_text("gaussian sigma=5:50 1\ndrop_mask drop_ratio=0.2:0.6 1\n")
    for out in ("a", "b"):
        assert main(["corrupt", "--in", str(data), "--out", str(tmp_path / out), "--pool", str(pool), "--seed", "3", "--views", "2"]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.jsonl" in files and "replay.json" in files
    for name in files:
        if name != "replay.json":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    recs = [json.loads(line) for line in (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()]
    assert len(recs) == 6 and all({"file", "family", "params", "seed"} <= set(r) for r in recs)


def test_train_denoise_eval_roundtrip(tmp_path, config, data):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(run), "--deterministic"]) == EXIT_OK
    for name in ("final.pt", "losses.csv", "losses.png", "config.resolved", "replay.json", "events.jsonl"):
        assert (run / name).exists(), name
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "run2"), "--deterministic"]) == EXIT_OK
    assert (run / "losses.csv").read_bytes() == (tmp_path / "run2" / "losses.csv").read_bytes()

    assert main(["train", "--resume", str(run / "final.pt"), "--set", "iters=5", "--out", str(run)]) == EXIT_OK
    assert len((run / "losses.csv").read_text().splitlines()) == 6

    assert main(["denoise", "--ckpt", str(run / "final.pt"), "--in", str(data), "--out", str(tmp_path / "den")]) == EXIT_OK
    assert len(list((tmp_path / "den").glob("img*.png"))) == 3

    grid = tmp_path / "g.grid"
    grid.write_text(f"dataset = {data}\ncheckpoints = identity, run/final.pt\nlevel.s25 = gaussian sigma=25\nseed = 1\n")
    for out in ("e1", "e2"):
        assert main(["eval", "--grid", str(grid), "--out", str(tmp_path / out)]) == EXIT_OK
    for name in ("benchmark.csv", "grid_gaussian.png"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()


def test_train_needs_data(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("patch = 16\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_USAGE


def test_train_unknown_key(tmp_path, config):
    assert main(["train", "--config", str(config), "--set", "wat=1", "--out", str(tmp_path / "r")]) == EXIT_USAGE


def test_eval_missing_checkpoint(tmp_path, data):
    grid = tmp_path / "g.grid"
    grid.write_text(f"dataset = {data}\ncheckpoints = gone.pt\nlevel.a = gaussian sigma=25\n")
    assert main(["eval", "--grid", str(grid), "--out", str(tmp_path / "e")]) == EXIT_DATA


def test_sr_and_inpaint(tmp_path, data, capsys):
    assert main(["sr-eval", "--ckpt", "identity", "--data", str(data), "--scales", "2,4", "--out", str(tmp_path / "sr")]) == EXIT_OK
    assert main(["inpaint-eval", "--ckpt", "identity", "--data", str(data), "--ratios", "0.5", "--out", str(tmp_path / "ip")]) == EXIT_OK
    assert "drop0.5" in capsys.readouterr().out


def test_verify_lemma1(capsys):
    assert main(["verify", "--lemma1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS p=") == 20 and "verify: PASS" in out


def test_verify_noise(capsys):
    assert main(["verify", "--noise", "--pixels", "1000000"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out


def test_verify_failure_exit_code():
    # a tolerance far below the Monte Carlo error must make the suite fail
    assert main(["verify", "--lemma1", "--tolerance-scale", "1e-6"]) == EXIT_NUMERIC


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "med", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
