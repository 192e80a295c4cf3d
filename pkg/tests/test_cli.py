import json
import subprocess
import sys

import pytest

from ptqflow.cli import main


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["fixtures", "--out", str(out / "fx"), "--dataset-size", "120", "--blocks", "1"]) == 0
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_calibrate_quantize_eval(fx, capsys):
    m, d = fx / "fx/model.json", fx / "fx/dataset.bin"
    code, out, _ = run(capsys, "calibrate", "--model", m, "--dataset", d, "--calib-samples", 100,
                       "--wl-w", 6, "--wl-a", 6, "--out", fx / "p.json")
    assert code == 0 and "profile" in out
    code, _, _ = run(capsys, "quantize", "--model", m, "--profile", fx / "p.json", "--wl-w", 6, "--wl-a", 6,
                     "--out", fx / "q/model.json")
    assert code == 0
    code, out, _ = run(capsys, "eval", "--model", fx / "q/model.json", "--dataset", d, "--out", fx / "ev.json")
    assert code == 0 and out.startswith("6/6 AbsP/AbsP channel fpres")
    rec = json.loads((fx / "ev.json").read_text())
    assert rec["plan"]["wl_w"] == 6 and rec["error"] is None


def test_quantize_twice_fails(fx, capsys):
    m, d = fx / "fx/model.json", fx / "fx/dataset.bin"
    run(capsys, "calibrate", "--model", m, "--dataset", d, "--calib-samples", 50, "--out", fx / "p8.json")
    assert run(capsys, "quantize", "--model", m, "--profile", fx / "p8.json", "--out", fx / "q8/model.json")[0] == 0
    code, _, err = run(capsys, "quantize", "--model", fx / "q8/model.json", "--profile", fx / "p8.json",
                       "--out", fx / "q9/model.json")
    assert code == 1
    assert "already quantized" in json.loads(err)["errors"][0]


def test_missing_options_are_reported(capsys):
    code, _, err = run(capsys, "eval")
    assert code == 1
    assert "--model" in json.loads(err)["errors"][0]


def test_missing_file_is_reported(fx, capsys):
    code, _, err = run(capsys, "eval", "--model", fx / "nope.json", "--dataset", fx / "fx/dataset.bin")
    assert code == 1 and json.loads(err)["command"] == "eval"


def test_config_file_and_flag_precedence(fx, capsys):
    cfg = fx / "run.cfg"
    cfg.write_text("# comment\nwl-w = 5\nwl_a = 5\nasm = absmax\ncalib-samples = 30\n")
    m, d = fx / "fx/model.json", fx / "fx/dataset.bin"
    code, _, _ = run(capsys, "calibrate", "--config", cfg, "--wl-a", 7, "--model", m, "--dataset", d,
                     "--out", fx / "pc.json")
    assert code == 0
    prof = json.loads((fx / "pc.json").read_text())
    assert (prof["plan"]["wl_w"], prof["plan"]["wl_a"], prof["plan"]["asm"]) == (5, 7, "absmax")
    assert prof["calibration"]["samples"] == 30


def test_sweep_and_report(fx, capsys):
    m, d = fx / "fx/model.json", fx / "fx/dataset.bin"
    code, out, _ = run(capsys, "sweep", "--model", m, "--dataset", d, "--study", "equal", "--calib-samples", 60,
                       "--out", fx / "sw")
    assert code == 0 and "48 rows" in out
    code, out, _ = run(capsys, "report", "--sweep", fx / "sw/sweep.csv", "--out", fx / "rep")
    assert code == 0
    rep = json.loads((fx / "rep/report.json").read_text())
    assert rep["rows"] == 48


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ptqflow", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("fixtures", "calibrate", "quantize", "eval", "sweep", "report"):
        assert cmd in proc.stdout
