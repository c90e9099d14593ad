import subprocess
import sys

import pytest

from bilateral import encoding
from bilateral.cli import main
from bilateral.evidence import IntervalOutcome, parse_entry_line


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture
def run_a(tmp_path, scenario_path):
    out = tmp_path / "a"
    assert run_cli("run", scenario_path("a_misaligned.txt"), out) == 0
    return out


def test_run_all_agreed(run_a, capsys):
    assert "agreed_pct=100.0" in (run_a / "report.txt").read_text()
    assert run_cli("verify", run_a) == 0
    assert capsys.readouterr().out.startswith("OK 10 entries verified")


def test_run_with_escalation_exits_2(tmp_path, scenario_path, capsys):
    assert run_cli("run", scenario_path("c_jitter.txt"), tmp_path) == 2
    assert run_cli("verify", tmp_path) == 0


def test_run_bad_scenario_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("request_rate=poisson:1\n")
    assert run_cli("run", bad, tmp_path / "out") == 1
    assert "error:" in capsys.readouterr().err
    assert run_cli("run", tmp_path / "missing.txt", tmp_path / "out") == 1


def test_verify_names_corrupted_entry(run_a, capsys):
    path = run_a / "evidence.agreed"
    lines = path.read_text().splitlines(keepends=True)
    # line 5 of the file is the third entry (two header lines)
    ev = parse_entry_line(lines[4].rstrip("\n"), 5)
    outcome = IntervalOutcome.from_fields(encoding.decode(ev.entry))
    env = outcome.envelopes[0]
    p = bytearray(env.payload)
    p[10] ^= 0xFF
    outcome.envelopes = (env.with_payload(bytes(p)),) + outcome.envelopes[1:]
    cols = lines[4].rstrip("\n").split("\t")
    cols[-1] = encoding.encode(outcome.fields()).hex()
    lines[4] = "\t".join(cols) + "\n"
    path.write_text("".join(lines))
    capsys.readouterr()
    assert run_cli("verify", run_a) == 1
    out = capsys.readouterr().out
    assert f"FAIL evidence.agreed:5 (interval {ev.interval_index})" in out


def test_verify_missing_dir(tmp_path, capsys):
    assert run_cli("verify", tmp_path / "nope") == 1
    assert "cannot load run directory" in capsys.readouterr().out


def test_verify_detects_edited_meter_log(run_a, capsys):
    path = run_a / "meters.consumer"
    lines = path.read_text().splitlines()
    cols = lines[0].split("\t")
    cols[3] = str(int(cols[3]) + 100_000)
    lines[0] = "\t".join(cols)
    path.write_text("\n".join(lines) + "\n")
    assert run_cli("verify", run_a) == 1
    assert "consumer log gives" in capsys.readouterr().out


def test_replay_round_zero(tmp_path, scenario_path, capsys):
    run_cli("run", scenario_path("c_jitter.txt"), tmp_path)
    capsys.readouterr()
    assert run_cli("replay", tmp_path, 3) == 0
    out = capsys.readouterr().out
    assert "interval 3: agreed" in out
    assert "no negotiation took place (empty transcript)" in out


def test_replay_negotiation(tmp_path, scenario_path, capsys):
    run_cli("run", scenario_path("c_jitter.txt"), tmp_path)
    capsys.readouterr()
    assert run_cli("replay", tmp_path, 1) == 0
    out = capsys.readouterr().out
    assert "non_agreed (UnexplainedDivergence)" in out
    assert "round 3: request counter=2" in out
    assert "stop=True" in out
    assert run_cli("replay", tmp_path, 99) == 1


def test_report(run_a, capsys):
    table = (run_a / "report.txt").read_text()
    capsys.readouterr()
    assert run_cli("report", run_a) == 0
    assert capsys.readouterr().out == table


def test_overrides(tmp_path, scenario_path, capsys):
    # a huge tolerance settles the jittered interval without negotiating
    assert run_cli("run", scenario_path("c_jitter.txt"), tmp_path, "--tolerance", 1 << 20, "--seed", 5) == 0
    assert "tolerance=1048576" in (tmp_path / "scenario.txt").read_text()
    assert "seed=5" in (tmp_path / "scenario.txt").read_text()
    assert run_cli("run", scenario_path("c_jitter.txt"), tmp_path, "--max-rounds", 1) == 2
    assert "max_rounds=1" in (tmp_path / "scenario.txt").read_text()


def test_console_entry_point(tmp_path, scenario_path):
    proc = subprocess.run(
        [sys.executable, "-m", "bilateral.cli", "run", str(scenario_path("c_jitter.txt")), str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert "UnexplainedDivergence" in proc.stdout
