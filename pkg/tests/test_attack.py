import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from bytesleuth.attack import (
    AttackConfig,
    NoPositiveWeights,
    UnsupportedBinary,
    compare_strategies,
    run_attack,
    run_random_baseline,
    select_perturbation,
    write_comparison,
)
from bytesleuth.detector import DetectorHandle, PlantedSignatureDetector
from bytesleuth.explain import LinearExplanation
from bytesleuth.pe import parse_pe, serialize
from bytesleuth.segmentation import segment_by_offset
from bytesleuth.synthetic import make_case
from bytesleuth.verifier import verify_chain


def _expl(weights, intercept=0.0):
    return LinearExplanation(np.asarray(weights, dtype=float), intercept, 0.0, 0.0, 0)


def _ones(n):
    return np.ones(n, dtype=np.uint8)


def test_select_examples():
    smap = segment_by_offset(3, 1)
    assert select_perturbation(_expl([0.4, 0.3, -0.1]), smap, _ones(3), 0.5) == {0}
    with pytest.raises(NoPositiveWeights):
        select_perturbation(_expl([-0.4, -0.3, -0.1]), smap, _ones(3), 0.5)


def test_select_equal_weights():
    # 0.6 - 0.2 = 0.4 < 0.5 after one removal
    smap = segment_by_offset(3, 1)
    assert select_perturbation(_expl([0.2, 0.2, 0.2]), smap, _ones(3), 0.5) == {0}
    assert select_perturbation(_expl([0.2, 0.2, 0.2]), smap, _ones(3), 0.15) == {0, 1, 2}


def test_select_respects_vector_and_eligibility():
    smap = segment_by_offset(4, 1)
    v = np.array([0, 1, 1, 1], dtype=np.uint8)
    e = _expl([0.9, 0.3, 0.2, 0.1])
    assert select_perturbation(e, smap, v, 0.35) == {1}
    assert select_perturbation(e, smap, v, 0.35, eligible=[True, False, True, True]) == {2, 3}


@given(st.integers(1, 30), st.floats(0.01, 0.2), st.floats(0.0, 0.4), st.floats(0.05, 0.9))
def test_select_uniform_ceil(l, w, c, thr):
    g = c + l * w
    ratio = (g - thr) / w
    assume(ratio > 0 and abs(ratio - round(ratio)) > 1e-6)
    k = select_perturbation(_expl([w] * l, c), segment_by_offset(l, 1), _ones(l), thr)
    assert len(k) == min(l, math.ceil(ratio))
    assert k == set(range(len(k)))


@pytest.fixture(scope="module")
def case():
    return make_case(0)


def test_single_signature_evades(case):
    h = DetectorHandle(case.detector)
    t = run_attack(case.data, h, AttackConfig(seed=1))
    assert t.outcome == "Evaded"
    assert len(t.rounds) == 1
    s, e = case.signature_range
    action = t.rounds[0].action
    assert action.kind == "DataDisp"
    assert any(a <= s and e <= b for a, b in action.targets)
    assert h.score(t.final_bytes) < 0.5
    assert t.total_queries == h.query_counter - 1
    assert verify_chain(parse_pe(case.data), t.plans).reconstructed_ok


def test_already_benign(case):
    h = DetectorHandle(lambda b: 0.1)
    t = run_attack(case.data, h)
    assert (t.outcome, t.total_queries, len(t.rounds)) == ("AlreadyBenign", 1, 0)


def test_zero_budget(case):
    t = run_attack(case.data, DetectorHandle(case.detector), AttackConfig(size_budget_fraction=0.0))
    assert t.outcome == "BudgetExceeded"
    assert t.plans == [] and t.final_bytes == case.data


def test_unsupported_without_append():
    with pytest.raises(UnsupportedBinary):
        run_attack(b"not a pe at all", DetectorHandle(lambda b: 0.9), AttackConfig(allowed_actions={"DataDisp"}))


def test_append_only_on_raw_bytes():
    blob = bytes(2000)
    det = DetectorHandle(lambda b: 0.9 if len(b) < 2050 else 0.1)
    t = run_attack(blob, det, AttackConfig(allowed_actions={"Append"}))
    assert t.outcome == "Evaded"
    assert len(t.final_bytes) <= 2100


def test_determinism(case):
    a = run_attack(case.data, DetectorHandle(case.detector), AttackConfig(seed=3))
    b = run_attack(case.data, DetectorHandle(case.detector), AttackConfig(seed=3))
    assert a.to_jsonl() == b.to_jsonl()
    assert a.final_bytes == b.final_bytes


@settings(max_examples=8)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.001, 0.01, 0.05]), st.booleans())
def test_budget_and_semantic_safety(seed, budget, signature_only):
    c = make_case(seed, section_units=(4, 24, 8))
    det = c.detector if not signature_only else PlantedSignatureDetector(((c.signature, 0.4),), 0.3)
    h = DetectorHandle(det)
    q0 = h.query_counter
    t = run_attack(c.data, h, AttackConfig(seed=seed, size_budget_fraction=budget, max_iterations=6))
    assert len(t.final_bytes) <= len(c.data) + int(budget * len(c.data))
    assert t.total_queries == h.query_counter - q0
    assert verify_chain(parse_pe(c.data), t.plans).reconstructed_ok
    idx = [r.index for r in t.rounds]
    assert idx == sorted(set(idx))
    if t.outcome == "Evaded":
        assert h.score(t.final_bytes) < h.threshold


def test_trace_jsonl(case, tmp_path):
    t = run_attack(case.data, DetectorHandle(case.detector))
    t.write(tmp_path / "trace.jsonl")
    import json
    recs = [json.loads(l) for l in open(tmp_path / "trace.jsonl")]
    assert set(recs[0]) >= {"index", "explanation_summary", "chosen_region", "action", "score_before",
                            "score_after", "size_so_far", "queries_so_far"}


def test_random_zero_variants(case):
    r = run_random_baseline(case.data, DetectorHandle(case.detector), variants=0)
    assert not r.success and r.total_queries == 1


def test_random_planted_fifty_seeds():
    wins = 0
    for seed in range(50):
        c = make_case(seed)
        det = PlantedSignatureDetector(((c.signature, 0.6),), 0.2)
        wins += run_random_baseline(c.data, DetectorHandle(det), AttackConfig(seed=seed)).success
    assert wins == 50


def _header_detector(original: bytes):
    head = original[:0x40]
    return lambda b: 0.9 if b[:0x40] == head else 0.1


def test_random_header_detector_never_evades(case):
    r = run_random_baseline(case.data, DetectorHandle(_header_detector(case.data)), AttackConfig(seed=2), variants=40)
    assert not r.success and r.variants_tried == 40


def _overlay_detector(b: bytes) -> float:
    try:
        img = parse_pe(b)
    except Exception:
        return 0.9
    end = max(s.raw_offset + s.raw_size for s in img.sections)
    return 0.1 if len(b) > end else 0.9


def test_compare_overlay_detector(case):
    d = DetectorHandle(_overlay_detector)
    rows = compare_strategies(case.data, d, AttackConfig(max_iterations=5, seed=1))
    by = {r["strategy"]: r for r in rows}
    assert len(rows) == 3
    assert by["append-only"]["success"]
    no_append = AttackConfig(max_iterations=5, allowed_actions={"DataDisp", "Disp"}, seed=1)
    rows = compare_strategies(case.data, DetectorHandle(_overlay_detector), no_append, ("guided", "random"))
    assert not any(r["success"] for r in rows)


def test_compare_rows_and_csv(case, tmp_path):
    d = DetectorHandle(case.detector)
    q0 = d.query_counter
    rows = compare_strategies(case.data, d, AttackConfig(max_iterations=3), ("guided", "random"))
    assert [r["strategy"] for r in rows] == ["guided", "random"]
    assert sum(r["queries"] for r in rows) == d.query_counter - q0
    write_comparison(tmp_path / "c.csv", rows)
    table = list(csv.reader(open(tmp_path / "c.csv")))
    assert table[0] == ["strategy", "success", "rounds", "queries", "size_growth"]
    assert len(table) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(max_iterations=0)
    with pytest.raises(ValueError):
        AttackConfig(size_budget_fraction=1.5)
    with pytest.raises(ValueError):
        AttackConfig(allowed_actions={"Teleport"})
