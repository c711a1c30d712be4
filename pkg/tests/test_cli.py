import os
import subprocess
import sys

import pytest

from chmhd.cli import UsageError, build_parser, main, parse_dt_rule, parse_levels

SPINODAL = """
[scenario]
scenario = spinodal
n = 6
dt = 1/100
T = 3/100
seed = 42

[output]
directory = {out}
every = 1
"""


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "chmhd"], capture_output=True, text=True)
    assert res.returncode == 2 and "usage" in res.stderr


@pytest.mark.parametrize("command, flags", [
    ("simulate", ["--config", "--scenario-preset", "--out", "--seed", "--solver", "--threads"]),
    ("convergence", ["--levels", "--dt-rule", "--out", "--solver", "--threads"]),
    ("project", ["--levels", "--out"]),
])
def test_help_documents_flags(command, flags):
    text = build_parser()._subparsers._group_actions[0].choices[command].format_help()
    for f in flags:
        assert f in text


def test_parse_levels():
    assert parse_levels("8,16,32") == [8, 16, 32]
    for bad in ("8,12", "", "a,b", "1,2", "16,8"):
        with pytest.raises(UsageError):
            parse_levels(bad)


def test_parse_dt_rule():
    assert parse_dt_rule("h2:0.5") == 0.5
    for bad in ("h:1", "h2:", "h2:x", "h2:-1"):
        with pytest.raises(UsageError):
            parse_dt_rule(bad)


def test_bad_levels_exit_code(capsys):
    assert main(["convergence", "--levels", "4,12"]) == 2
    assert "double" in capsys.readouterr().err


def test_unknown_flag_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["convergence", "--bogus"])
    assert info.value.code == 2


def test_project_writes_table(tmp_path, capsys):
    out = tmp_path / "proj.csv"
    assert main(["project", "B0", "--levels", "4,8", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "h,B0_L2,B0_L2_rate,B0_Hcurl,B0_Hcurl_rate"
    assert len(lines) == 3
    rate = float(lines[2].split(",")[4])
    assert 0.8 < rate < 1.2
    assert capsys.readouterr().out == out.read_text()


def test_convergence_single_level(tmp_path):
    out = tmp_path / "rates.csv"
    assert main(["convergence", "--levels", "4", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 2
    cells = lines[1].split(",")
    assert len(cells) == 15
    assert all(cells[i] for i in range(1, 15, 2)) and not any(cells[i] for i in range(2, 15, 2))


def test_simulate_from_config(tmp_path, capsys):
    out = tmp_path / "run"
    cfg = tmp_path / "spinodal.ini"
    cfg.write_text(SPINODAL.format(out=out))
    assert main(["simulate", "--config", str(cfg)]) == 0
    files = sorted(os.listdir(out))
    assert files == [f"state_{k:06d}.vtk" for k in range(4)] + ["timeseries.csv"]
    assert "spinodal" in capsys.readouterr().out


def test_identical_commands_identical_files(tmp_path):
    cfg = tmp_path / "spinodal.ini"
    outputs = []
    for tag in ("a", "b"):
        cfg.write_text(SPINODAL.format(out=tmp_path / tag))
        assert main(["simulate", "--config", str(cfg), "--seed", "9"]) == 0
        outputs.append({f: (tmp_path / tag / f).read_bytes() for f in sorted(os.listdir(tmp_path / tag))})
    assert outputs[0] == outputs[1]


def test_out_flag_overrides_directory(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SPINODAL.format(out=tmp_path / "ignored"))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "used")]) == 0
    assert os.path.isdir(tmp_path / "used") and not os.path.exists(tmp_path / "ignored")


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[scenario]\nscenario = spinodal\nn = 4\ndt = 0.3\nT = 1\n")
    assert main(["simulate", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "line" in err and err.count("\n") == 1
    assert main(["simulate", "--config", str(tmp_path / "missing.ini")]) == 1
