import hashlib
import subprocess
import sys

import pytest

from fibertrap.cli import SUBCOMMANDS, build_parser, cli_main
from fibertrap.manifest import read_manifest

SHORT = "[scan]\nduration = 40.0\n"


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def short_cfg(tmp_path):
    p = tmp_path / "short.toml"
    p.write_text(SHORT)
    return p


def test_parser_knows_all_commands():
    p = build_parser()
    for c in SUBCOMMANDS:
        assert p.parse_args([c]).command == c


def test_network_success(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli_main(["network", "--out", str(out)]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("network: delta 0.523810") and "\n" not in line
    assert {p.name for p in out.iterdir()} == {"network_sweep.csv", "network_sensitivity.txt", "network_manifest.txt"}


def test_spectrum_summary(tmp_path, capsys):
    assert cli_main(["spectrum", "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out
    assert "node height 603." in line and "kHz" in line
    d = read_manifest(tmp_path / "spectrum.txt")
    assert d["f_zp_hz"] > d["f_x_hz"] > d["f_yp_hz"]


def test_missing_config_writes_nothing(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli_main(["spectrum", "--config", str(tmp_path / "missing.toml"), "--out", str(out)]) == 1
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_invalid_config_exit_1(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[drive]\nvolts = 1\n")
    out = tmp_path / "o"
    assert cli_main(["spectrum", "--config", str(p), "--out", str(out)]) == 1
    assert not out.exists()


def test_unknown_command_exit_1(capsys):
    assert cli_main(["bogus"]) == 1
    assert cli_main(["spectrum", "--seed", "x"]) == 1


def test_numerical_failure_exit_2(tmp_path, capsys):
    p = tmp_path / "dead.toml"
    p.write_text("[drive]\nv1 = 0.0\n")
    out = tmp_path / "o"
    assert cli_main(["spectrum", "--config", str(p), "--out", str(out)]) == 2
    assert not out.exists()
    assert "numerical failure" in capsys.readouterr().err


@pytest.mark.parametrize("command,files", [
    ("telegraph", ["telegraph.csv"]),
    ("charging", ["charging.csv"]),
])
def test_same_seed_identical_csv(tmp_path, short_cfg, command, files):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out, seed in ((a, "5"), (b, "5"), (c, "6")):
        assert cli_main([command, "--config", str(short_cfg), "--out", str(out), "--seed", seed]) == 0
    for f in files:
        assert digest(a / f) == digest(b / f)
        assert digest(a / f) != digest(c / f)


def test_manifest_reproduces_run(tmp_path, short_cfg):
    assert cli_main(["telegraph", "--config", str(short_cfg), "--out", str(tmp_path), "--seed", "9"]) == 0
    m = read_manifest(tmp_path / "telegraph_manifest.txt")
    assert m["seed"] == 9 and m["config.scan.duration"] == 40.0 and "config_hash" in m
    assert "versions.kernel" in m


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "fibertrap.cli", "network", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("network:")
