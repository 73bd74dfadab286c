"""Guided attack against random transformations on a small synthetic corpus.

Each binary needs its signature pixel displaced without also displacing a
benign pattern. Random choices displace about half of all pixels and so
usually hide a benign pattern too; the surrogate tells the guided attack
which single pixel to move.
"""
from bytesleuth.attack import AttackConfig, run_attack, run_random_baseline
from bytesleuth.detector import DetectorHandle
from bytesleuth.synthetic import make_corpus

corpus = make_corpus(10, seed=5)
guided = random = 0
for k, case in enumerate(corpus):
    cfg = AttackConfig(seed=k)
    trace = run_attack(case.data, DetectorHandle(case.detector), cfg)
    base = run_random_baseline(case.data, DetectorHandle(case.detector), cfg)
    guided += trace.outcome == "Evaded"
    random += base.success
    print(f"case {k}: guided {trace.outcome} in {len(trace.rounds)} round(s), {trace.total_queries} queries, "
          f"+{trace.size_growth:.2%}; random {'hit' if base.success else 'miss'} after {base.variants_tried} variants")
print(f"guided {guided}/{len(corpus)}, random {random}/{len(corpus)}")
