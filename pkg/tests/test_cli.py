import json

import numpy as np
import pytest

from das_forge import cli, fileio


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def raw_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("raw")
    assert cli.run(["simulate", "--preset", "tiny", "--out", str(out), "--seed", "2"]) == 0
    return out


def test_help_exits_zero(capsys):
    assert cli.run(["--help"]) == 0
    assert "simulate" in capsys.readouterr().out


def test_unknown_flag_is_usage_error(capsys):
    assert cli.run(["simulate", "--out", "x", "--bogus"]) == 2
    assert last_error(capsys)["exit_code"] == 2


def test_missing_input_file(tmp_path, capsys):
    missing = tmp_path / "nope.tsm"
    code = cli.run(["render", "--in", str(missing), "--out", str(tmp_path / "o.png")])
    assert code == 3
    err = last_error(capsys)
    assert err["exit_code"] == 3 and "nope.tsm" in err["message"] + err.get("path", "")


def test_invalid_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"n_traces": -5}))
    assert cli.run(["simulate", "--preset", "tiny", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 4
    assert last_error(capsys)["exit_code"] == 4


def test_malformed_tsm(tmp_path, capsys):
    (tmp_path / "bad.tsm").write_bytes(b"TSM1" + b"\0" * 5)
    assert cli.run(["render", "--in", str(tmp_path / "bad.tsm"), "--out", str(tmp_path / "o.png")]) == 4


def test_simulate_writes_one_file_per_class(raw_dir):
    index = json.loads((raw_dir / "index.json").read_text())
    assert len(index["recordings"]) == 15
    assert len(list(raw_dir.glob("*.tsm"))) == 15
    first = fileio.load_tsm(raw_dir / index["recordings"][0]["raw"])
    assert first.shape == (64, 4700)


def test_demod_single_file(raw_dir, tmp_path):
    src = sorted(raw_dir.glob("*.tsm"))[0]
    before = src.read_bytes()
    code = cli.run(["demod", "--in", str(src), "--out-amp", str(tmp_path / "a.tsm"),
                    "--out-phase", str(tmp_path / "p.tsm"), "--band-center", "160e6",
                    "--band-width", "20e6", "--fast-rate", "1e9"])
    assert code == 0
    amp, phase = fileio.load_tsm(tmp_path / "a.tsm"), fileio.load_tsm(tmp_path / "p.tsm")
    assert amp.shape == phase.shape == (64, 4700)
    assert np.all(amp[0] == 0)
    assert phase.min() >= 0 and phase.max() < 2 * np.pi
    assert src.read_bytes() == before  # inputs untouched


def test_render(tmp_path):
    fileio.save_tsm(tmp_path / "m.tsm", np.arange(200.0).reshape(10, 20))
    assert cli.run(["render", "--in", str(tmp_path / "m.tsm"), "--out", str(tmp_path / "m.png"),
                    "--img-size", "8"]) == 0
    assert fileio.load_png(tmp_path / "m.png").shape == (8, 8, 3)


def test_threads_env_fallback(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    fileio.save_tsm(tmp_path / "m.tsm", np.ones((4, 4)))
    assert cli.run(["render", "--in", str(tmp_path / "m.tsm"), "--out", str(tmp_path / "m.png")]) == 2
    assert cli.THREADS_ENV in last_error(capsys)["message"]
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert cli.run(["render", "--in", str(tmp_path / "m.tsm"), "--out", str(tmp_path / "m.png")]) == 0
