import subprocess
import sys

import pytest

from crf_lab.cli import main


def write(tmp_path, text, name="c.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["flow", "--config", write(tmp_path, "bogus = 1\n")]) == 2
    assert main(["flow", "--config", write(tmp_path, "dt = 0.01\n")]) == 2
    assert main(["flow", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_thread_cap_is_config_error(tmp_path, monkeypatch):
    monkeypatch.setenv("CRF_LAB_THREADS", "zero")
    assert main(["flow", "--config", write(tmp_path, "final_time = 0\n")]) == 2


def test_stub_flow_is_flat_and_deterministic(tmp_path, monkeypatch):
    monkeypatch.setenv("CRF_LAB_THREADS", "1")
    cfg = write(tmp_path, "curvature_model = einstein-stub\nfinal_time = 0.004\noutput_every = 2\n")
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["flow", "--config", cfg, "--output-dir", str(out)]) == 0
        outputs.append((out / "flow.csv").read_bytes() + (out / "flow_summary.json").read_bytes())
    assert outputs[0] == outputs[1]
    lines = outputs[0].decode().splitlines()
    assert lines[0] == "t,vol,drift_sup,p_l2,steps_accepted"
    assert len({line.split(",")[1] for line in lines[1:4]}) == 1


def test_verify_self_test_fails(tmp_path):
    cfg = write(tmp_path, "resolutions = 8 16\nself_test = true\n")
    assert main(["verify", "--config", cfg, "--output-dir", str(tmp_path / "v")]) == 4
    assert (tmp_path / "v" / "verify_summary.json").exists()


def test_identical_twin_at_floor(tmp_path):
    cfg = write(tmp_path, "final_time = 0.002\noutput_every = 1\nmonitor_every = 1\n")
    assert main(["twin", "--config", cfg, "--output-dir", str(tmp_path / "t"), "--seed", "2"]) == 0
    energies = (tmp_path / "t" / "twin_energies.csv").read_text().splitlines()
    assert energies[0] == "t,H,A,S,D,E"
    assert all(float(row.split(",")[-1]) == 0.0 for row in energies[1:])


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "crf_lab.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "verify" in out.stdout


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["dance", "--config", "x"])
    assert info.value.code == 2
