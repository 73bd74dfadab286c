import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from bytesleuth.cli import EXIT_BUDGET, EXIT_EXHAUSTED, EXIT_FAILED, EXIT_OK, EXIT_REMOTE, EXIT_USAGE, main
from bytesleuth.detector import NgramModel, PlantedSignatureDetector
from bytesleuth.pe import make_minimal_pe
from bytesleuth.synthetic import make_case


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("BYTESLEUTH_CACHE", raising=False)
    case = make_case(0)
    (tmp_path / "sample.bin").write_bytes(case.data)
    (tmp_path / "planted.json").write_text(json.dumps(case.detector.to_dict()))
    return tmp_path, case


def _run(*argv):
    return main([str(a) for a in argv])


def _read_json(path):
    return json.loads(path.read_text())


def test_detect_zero_model(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "f.bin").write_bytes(make_minimal_pe(0))
    NgramModel(2, {}, 0.0).save(tmp_path / "zero.json")
    assert _run("detect", "f.bin", "--detector", "builtin:ngram:zero.json", "--out", "o") == EXIT_OK
    rec = _read_json(tmp_path / "o" / "detect.json")
    assert rec["score"] == 0.5 and rec["verdict"] == "malware" and rec["queries"] == 1
    _run("detect", "f.bin", "--detector", "builtin:ngram:zero.json@0.6", "--out", "o")
    assert _read_json(tmp_path / "o" / "detect.json")["verdict"] == "benign"


def test_missing_file_is_usage_error(work):
    assert _run("detect", "nope.bin", "--detector", "builtin:planted:planted.json") == EXIT_USAGE
    assert _run("detect", "sample.bin", "--detector", "mystery:x") == EXIT_USAGE


def test_bad_flag_is_usage_error(work):
    with pytest.raises(SystemExit) as exc:
        _run("detect", "--bogus")
    assert exc.value.code == EXIT_USAGE


def test_remote_down(work):
    assert _run("detect", "sample.bin", "--detector", "http://127.0.0.1:9") == EXIT_REMOTE


def test_explain_reports(work):
    tmp, case = work
    assert _run("explain", "sample.bin", "--detector", "builtin:planted:planted.json", "--out", "e") == EXIT_OK
    rows = list(csv.DictReader(open(tmp / "e" / "weights.csv")))
    weights = np.array([float(r["weight"]) for r in rows])
    top = rows[int(np.argmax(weights))]
    s, e = case.signature_range
    assert int(top["start"]) <= s and e <= int(top["end"])
    hist = list(csv.reader(open(tmp / "e" / "histogram.csv")))[1:]
    assert sum(float(r[-1]) for r in hist) == pytest.approx(1.0)
    labels = {r[0] for r in list(csv.reader(open(tmp / "e" / "cdf.csv")))[1:]}
    assert labels >= {".data", ".rsrc"}


def test_explain_ignoring_detector(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "f.bin").write_bytes(make_minimal_pe(0))
    (tmp_path / "flat.json").write_text(json.dumps(PlantedSignatureDetector((), 0.7).to_dict()))
    assert _run("explain", "f.bin", "--detector", "builtin:planted:flat.json", "--segmentation", "offset",
                "--chunk", "256", "--out", "e") == EXIT_OK
    weights = [float(r["weight"]) for r in csv.DictReader(open(tmp_path / "e" / "weights.csv"))]
    assert max(abs(w) for w in weights) < 1e-6


def test_fastlsm_whole_file(work, capsys):
    tmp, case = work
    assert _run("fastlsm", "sample.bin", "--detector", "builtin:planted:planted.json",
                "--beta", str(len(case.data)), "--out", "h") == EXIT_OK
    rec = _read_json(tmp / "h" / "hot_region.json")
    assert (rec["start"], rec["end"]) == (0, len(case.data))
    assert rec["queries"] == 2


def test_attack_verify_and_outputs(work):
    tmp, case = work
    assert _run("attack", "sample.bin", "--detector", "builtin:planted:planted.json", "--out", "a") == EXIT_OK
    out = tmp / "a"
    summary = _read_json(out / "summary.json")
    assert summary["outcome"] == "Evaded" and summary["verified"] is True
    assert case.detector((out / "transformed.bin").read_bytes()) < 0.5
    assert _read_json(out / "manifest.json")["exit_code"] == EXIT_OK

    assert _run("verify", "sample.bin", out / "transformed.bin", out / "plans.jsonl", "--out", "v") == EXIT_OK
    assert _read_json(tmp / "v" / "verify.json")["ok"]

    bad = bytearray((out / "transformed.bin").read_bytes())
    bad[-0x200] ^= 0xFF  # first byte of the stub section
    (tmp / "bad.bin").write_bytes(bytes(bad))
    assert _run("verify", "sample.bin", "bad.bin", out / "plans.jsonl", "--out", "v") == EXIT_FAILED


def test_attack_benign_input(work):
    tmp, _ = work
    (tmp / "low.json").write_text(json.dumps(PlantedSignatureDetector((), 0.1).to_dict()))
    assert _run("attack", "sample.bin", "--detector", "builtin:planted:low.json", "--out", "a") == EXIT_OK
    assert _read_json(tmp / "a" / "summary.json")["outcome"] == "AlreadyBenign"
    assert not (tmp / "a" / "transformed.bin").exists()


def test_attack_exit_codes(work):
    tmp, _ = work
    args = ["attack", "sample.bin", "--detector", "builtin:planted:planted.json"]
    assert _run(*args, "--budget", "0", "--out", "b") == EXIT_BUDGET
    (tmp / "stuck.json").write_text(json.dumps(PlantedSignatureDetector((), 0.9).to_dict()))
    assert _run("attack", "sample.bin", "--detector", "builtin:planted:stuck.json", "--actions", "DataDisp",
                "--max-iter", "2", "--out", "s") == EXIT_EXHAUSTED
    assert not (tmp / "s" / "transformed.bin").exists()
    (tmp / "raw.bin").write_bytes(b"plain bytes " * 40)
    assert _run("attack", "raw.bin", "--detector", "builtin:planted:stuck.json", "--actions", "DataDisp",
                "--out", "u") == 4


def test_append_only_verify(work):
    tmp, _ = work
    (tmp / "raw.bin").write_bytes(bytes(4000))
    # the detector rewards a pattern that only an appended payload can supply
    (tmp / "pat.bin").write_bytes(b"OK")
    (tmp / "pat.json").write_text(json.dumps(PlantedSignatureDetector(((b"OKOKOKOK", -0.5),), 0.9).to_dict()))
    assert _run("attack", "raw.bin", "--detector", "builtin:planted:pat.json", "--actions", "Append",
                "--pattern", "pat.bin", "--out", "p") == EXIT_OK
    assert _run("verify", "raw.bin", tmp / "p" / "transformed.bin", tmp / "p" / "plans.jsonl", "--out", "v") == EXIT_OK
    assert _read_json(tmp / "v" / "verify.json")["kind"] == "Append"


def test_compare_rows(work):
    tmp, _ = work
    assert _run("compare", "sample.bin", "--detector", "builtin:planted:planted.json", "--max-iter", "3",
                "--out", "c") == EXIT_OK
    rows = list(csv.reader(open(tmp / "c" / "comparison.csv")))
    assert [r[0] for r in rows[1:]] == ["guided", "random", "append-only"]


def test_compare_query_budget_monotone(work):
    tmp, _ = work
    queries = []
    for cap in (60, 600):
        _run("compare", "sample.bin", "--detector", "builtin:planted:planted.json", "--max-queries", str(cap),
             "--out", f"c{cap}")
        rows = list(csv.DictReader(open(tmp / f"c{cap}" / "comparison.csv")))
        queries.append({r["strategy"]: int(r["queries"]) for r in rows})
        assert all(q <= cap + 1 for q in queries[-1].values())
    assert all(queries[0][k] <= queries[1][k] for k in queries[0])


def test_baseline_zero_variants(work):
    tmp, _ = work
    code = _run("baseline", "sample.bin", "--detector", "builtin:planted:planted.json", "--variants", "0", "--out", "r")
    assert code == EXIT_EXHAUSTED
    assert _read_json(tmp / "r" / "baseline.json")["queries"] == 1


def _write_corpora(root):
    rng = np.random.default_rng(0)
    for sub in ("mal", "ben"):
        (root / sub).mkdir()
    for i in range(20):
        (root / "ben" / f"{i}.bin").write_bytes(rng.integers(0, 128, size=300, dtype=np.uint8).tobytes())
        body = bytearray(rng.integers(0, 128, size=300, dtype=np.uint8).tobytes())
        body[100:102] = b"\xde\xad"
        (root / "mal" / f"{i}.bin").write_bytes(bytes(body))


def test_train_detector(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    _write_corpora(tmp_path)
    assert _run("train-detector", "--malware", "mal", "--benign", "ben", "--seed", "3", "--out", "m1") == EXIT_OK
    line = capsys.readouterr().out
    acc = float(line.split("accuracy=")[1].split()[0])
    assert acc >= 0.99
    _run("train-detector", "--malware", "mal", "--benign", "ben", "--seed", "3", "--out", "m2")
    assert (tmp_path / "m1" / "model.json").read_bytes() == (tmp_path / "m2" / "model.json").read_bytes()
    (tmp_path / "empty").mkdir()
    assert _run("train-detector", "--malware", "empty", "--benign", "ben", "--out", "m3") == EXIT_FAILED


@pytest.mark.parametrize("argv", [
    ["explain", "sample.bin", "--detector", "builtin:planted:planted.json", "--filler", "random", "--seed", "5"],
    ["attack", "sample.bin", "--detector", "builtin:planted:planted.json", "--seed", "2"],
    ["baseline", "sample.bin", "--detector", "builtin:planted:planted.json", "--variants", "20"],
])
def test_replay_identical(work, argv, capsys):
    tmp, _ = work
    _run(*argv, "--out", "first")
    manifest = _read_json(tmp / "first" / "manifest.json")
    assert manifest["argv"] == argv and "sample.bin" in manifest["inputs"]
    assert _run("replay", tmp / "first" / "manifest.json", "--out", tmp / "second") == EXIT_OK
    assert "replay identical" in capsys.readouterr().out
    for name in manifest["outputs"]:
        assert (tmp / "first" / name).read_bytes() == (tmp / "second" / name).read_bytes()


def test_replay_detects_changed_input(work):
    tmp, _ = work
    _run("detect", "sample.bin", "--detector", "builtin:planted:planted.json", "--out", "first")
    (tmp / "sample.bin").write_bytes(b"changed")
    assert _run("replay", tmp / "first" / "manifest.json", "--out", tmp / "second") == EXIT_FAILED


def test_score_cache(work, monkeypatch):
    tmp, _ = work
    monkeypatch.setenv("BYTESLEUTH_CACHE", str(tmp / "cache"))
    _run("detect", "sample.bin", "--detector", "builtin:planted:planted.json", "--out", "d1")
    assert len(list((tmp / "cache").iterdir())) == 1
    _run("detect", "sample.bin", "--detector", "builtin:planted:planted.json", "--out", "d2")
    assert (tmp / "d1" / "detect.json").read_bytes() == (tmp / "d2" / "detect.json").read_bytes()


def test_console_entry_point(work):
    tmp, _ = work
    proc = subprocess.run([sys.executable, "-m", "bytesleuth.cli", "detect", "sample.bin",
                           "--detector", "builtin:planted:planted.json", "--out", "s"],
                          capture_output=True, text=True, cwd=tmp)
    assert proc.returncode == 0
    assert "verdict=malware" in proc.stdout
