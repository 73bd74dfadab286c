"""Command-line entry point.

Every command writes its reports and a ``manifest.json`` into ``--out``;
``bytesleuth replay <manifest>`` re-runs the recorded command and compares
output digests.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .attack import AttackConfig, UnsupportedBinary, compare_strategies, run_attack, run_random_baseline, write_comparison
from .detector import (
    DEFAULT_THRESHOLD,
    DetectorHandle,
    EmptyCorpus,
    RemoteUnavailable,
    accuracy,
    load_builtin,
    remote_detector,
    train_ngram,
)
from .errors import BytesleuthError
from .explain import (
    WEIGHT_BUCKETS,
    KernelConfig,
    empirical_cdf,
    explain_instance,
    weight_histogram,
    write_histogram,
    write_weight_report,
)
from .fastlsm import FastLsmConfig, fast_lsm
from .pe import PeError, parse_pe, serialize
from .segmentation import (
    Adversarial,
    Random,
    SuperpixelMap,
    Zero,
    load_listing,
    segment_by_offset,
    segment_by_sections,
    segment_from_listing,
)
from .transform import action_from_record, action_record, apply_plans
from .verifier import VerificationReport, verify_chain

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_EXHAUSTED = 2
EXIT_BUDGET = 3
EXIT_UNSUPPORTED = 4
EXIT_REMOTE = 5
EXIT_USAGE = 64

OUTCOME_EXIT = {"Evaded": EXIT_OK, "AlreadyBenign": EXIT_OK, "IterationsExhausted": EXIT_EXHAUSTED,
                "BudgetExceeded": EXIT_BUDGET}


class UsageError(BytesleuthError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _sub_seed(root: int, tag: str) -> int:
    key = int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([root, key]).generate_state(1)[0])


def _read_input(path: str) -> bytes:
    if not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")
    return Path(path).read_bytes()


# Detectors -----------------------------------------------------------------

class CachedScorer:
    """Memoize scores on disk, keyed by detector identity and input digest."""

    def __init__(self, scorer: Callable[[bytes], float], directory: str, namespace: str):
        self.scorer = scorer
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.namespace = namespace

    def __call__(self, data: bytes) -> float:
        key = hashlib.sha256(self.namespace.encode() + b"\0" + data).hexdigest()
        path = self.directory / f"{key}.score"
        if path.exists():
            return float(path.read_text())
        value = float(self.scorer(data))
        tmp = path.with_suffix(f".{os.getpid()}.tmp")
        tmp.write_text(repr(value))
        os.replace(tmp, path)
        return value


def split_threshold(spec: str) -> tuple[str, float | None]:
    head, sep, tail = spec.rpartition("@")
    if sep:
        try:
            return head, float(tail)
        except ValueError:
            pass
    return spec, None


def load_detector(spec: str, threshold: float | None = None) -> DetectorHandle:
    """Resolve ``builtin:ngram:<file>``, ``builtin:planted:<file>``, ``proc:<cmd>`` or ``http:<url>``."""
    body, inline = split_threshold(spec)
    thr = threshold if threshold is not None else (inline if inline is not None else DEFAULT_THRESHOLD)
    if body.startswith("builtin:"):
        kind, _, path = body[len("builtin:"):].partition(":")
        if kind not in ("ngram", "planted") or not path:
            raise UsageError(f"bad builtin detector spec {spec!r}")
        doc = json.loads(_read_input(path))
        doc.setdefault("kind", kind)
        scorer = load_builtin(doc)
        namespace = kind + ":" + hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
        concurrent = True
    elif body.startswith(("proc:", "http:", "https:")):
        handle = remote_detector(body, thr)
        scorer, namespace, concurrent = handle.scorer, body, False
    else:
        raise UsageError(f"unknown detector spec {spec!r}")
    cache = os.environ.get("BYTESLEUTH_CACHE")
    if cache:
        scorer = CachedScorer(scorer, cache, namespace)
    return DetectorHandle(scorer, thr, concurrent_safe=concurrent, name=body)


def parse_filler(text: str, seed: int):
    if text == "zero":
        return Zero()
    if text == "random":
        return Random(_sub_seed(seed, "filler"))
    if text.startswith("random:"):
        return Random(int(text[7:]))
    if text.startswith("adversarial:"):
        return Adversarial(_read_input(text[len("adversarial:"):]))
    raise UsageError(f"unknown filler {text!r}; expected zero, random or adversarial:<file>")


# Argument groups -----------------------------------------------------------

def _add_common(p, detector=True):
    if detector:
        p.add_argument("--detector", required=True, help="builtin:ngram:<f> | builtin:planted:<f> | proc:<cmd> | http:<url>, optional @threshold")
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")


def _add_sampling(p):
    p.add_argument("--chunk", type=int, default=1024)
    p.add_argument("--listing", default=None, help="JSON basic-block listing (file offsets)")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--keep-prob", type=float, default=0.5)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--metric", choices=("l2", "hamming"), default="l2")
    p.add_argument("--filler", default="zero")


def _add_attack(p):
    p.add_argument("--budget", type=float, default=0.05)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--max-queries", type=int, default=None)
    p.add_argument("--branch", type=int, default=None, help="FastLSM branching factor; enables FastLSM rounds")
    p.add_argument("--beta", type=int, default=None, help="FastLSM stopping size; enables FastLSM rounds")
    p.add_argument("--actions", default="Append,Disp,DataDisp")
    p.add_argument("--pattern", default=None, help="file with bytes for Append payloads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bytesleuth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bytesleuth {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", help="score one file")
    p.add_argument("file")
    _add_common(p)

    p = sub.add_parser("explain", help="fit a local surrogate and write weight reports")
    p.add_argument("file")
    p.add_argument("--segmentation", choices=("auto", "sections", "offset"), default="auto")
    _add_common(p)
    _add_sampling(p)

    p = sub.add_parser("fastlsm", help="hierarchical search for the most influential region")
    p.add_argument("file")
    p.add_argument("--branch", type=int, default=2)
    p.add_argument("--beta", type=int, default=1024)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.add_argument("--filler", default="zero")
    _add_common(p)

    for name, text in (("attack", "explanation-guided evasion"), ("baseline", "random-transformation baseline"),
                       ("compare", "guided vs random vs append-only")):
        p = sub.add_parser(name, help=text)
        p.add_argument("file")
        _add_common(p)
        _add_sampling(p)
        _add_attack(p)
        if name == "baseline":
            p.add_argument("--variants", type=int, default=None)

    p = sub.add_parser("verify", help="re-check a transformed file against its plan log")
    p.add_argument("original")
    p.add_argument("transformed")
    p.add_argument("plan_log")
    _add_common(p, detector=False)

    p = sub.add_parser("train-detector", help="train the built-in byte n-gram model")
    p.add_argument("--malware", required=True)
    p.add_argument("--benign", required=True)
    p.add_argument("--ngram", type=int, default=2)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--l2", type=float, default=0.0)
    _add_common(p, detector=False)

    p = sub.add_parser("replay", help="re-run a manifest and compare outputs")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


# Helpers ---------------------------------------------------------------------

def _kernel(args) -> KernelConfig:
    return KernelConfig(metric=args.metric, sigma=args.sigma)


def _listing(args):
    if not args.listing:
        return None
    blocks = load_listing(args.listing)
    return tuple((int(b["start"]), int(b["length"])) if isinstance(b, dict) else tuple(b) for b in blocks)


def _attack_config(args) -> AttackConfig:
    fl = None
    if args.branch is not None or args.beta is not None:
        fl = FastLsmConfig(n=args.branch or 2, beta=args.beta or 1024, policy=parse_filler(args.filler, args.seed),
                           seed=args.seed, ridge=args.ridge)
    return AttackConfig(
        max_iterations=args.max_iter,
        size_budget_fraction=args.budget,
        chunk=args.chunk,
        fastlsm=fl,
        filler=parse_filler(args.filler, args.seed),
        allowed_actions=frozenset(a.strip() for a in args.actions.split(",") if a.strip()),
        seed=args.seed,
        ridge=args.ridge,
        kernel=_kernel(args),
        samples=args.samples,
        keep_prob=args.keep_prob,
        listing=_listing(args),
        adversarial_pattern=_read_input(args.pattern) if args.pattern else None,
        max_queries=args.max_queries,
        jobs=args.jobs,
    )


def _explain_map(data: bytes, args) -> SuperpixelMap:
    image = None
    if args.segmentation in ("auto", "sections"):
        try:
            image = parse_pe(data)
        except PeError:
            if args.segmentation == "sections":
                raise
    if image is None:
        return segment_by_offset(len(data), args.chunk)
    listing = _listing(args)
    if not listing:
        return segment_by_sections(image, args.chunk, file_length=len(data))
    code = [i for i, s in enumerate(image.sections) if s.is_executable]
    other = [i for i in range(len(image.sections)) if i not in code]
    blocks = segment_from_listing(listing, len(data))
    labels = []
    for p in blocks:
        sec = image.section_at_offset(p.start)
        labels.append(type(p)(p.start, p.length, p.label or (sec.label if sec else None)))
    rest = segment_by_sections(image, args.chunk, file_length=len(data), sections=other)
    return SuperpixelMap(tuple(sorted([*labels, *rest.pixels], key=lambda p: p.start)), len(data))


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# Commands ----------------------------------------------------------------------

def cmd_detect(args, out: Path) -> tuple[int, list[str], list[Path]]:
    data = _read_input(args.file)
    det = load_detector(args.detector, args.threshold)
    score = det.score(data)
    verdict = "malware" if det.is_malware(score) else "benign"
    print(f"score={score:.6f} verdict={verdict} queries={det.query_counter}")
    path = out / "detect.json"
    _write_json(path, {"score": score, "verdict": verdict, "threshold": det.threshold, "queries": det.query_counter})
    return EXIT_OK, [args.file], [path]


def cmd_explain(args, out: Path):
    data = _read_input(args.file)
    det = load_detector(args.detector, args.threshold)
    smap = _explain_map(data, args)
    policy = parse_filler(args.filler, args.seed)
    expl = explain_instance(data, smap, det, policy, _kernel(args), args.samples, args.ridge, args.seed,
                            keep_prob=args.keep_prob, jobs=args.jobs)
    weights = out / "weights.csv"
    write_weight_report(weights, expl, smap)
    top = float(np.abs(expl.weights).max()) if len(smap) else 0.0
    buckets = WEIGHT_BUCKETS[:-1] + ((WEIGHT_BUCKETS[-1][0], max(1.0, top)),)
    hist = out / "histogram.csv"
    write_histogram(hist, weight_histogram(expl, buckets), buckets)
    cdf = out / "cdf.csv"
    by_label: dict[str, list[float]] = {}
    for p, w in zip(smap.pixels, expl.weights):
        by_label.setdefault(p.label or "<file>", []).append(float(w))
    with open(cdf, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "x", "value"])
        for label in sorted(by_label):
            for x, y in empirical_cdf(by_label[label]):
                writer.writerow([label, repr(x), repr(y)])
    print(f"pixels={len(smap)} samples={expl.sample_count} intercept={expl.intercept:.6f} queries={det.query_counter}")
    for i, w in expl.top(5):
        p = smap[i]
        print(f"  pixel {i} [{p.start:#x}, {p.end:#x}) {p.label or ''} weight={w:+.6f}")
    return EXIT_OK, [args.file], [weights, hist, cdf]


def cmd_fastlsm(args, out: Path):
    data = _read_input(args.file)
    det = load_detector(args.detector, args.threshold)
    cfg = FastLsmConfig(n=args.branch, beta=args.beta, policy=parse_filler(args.filler, args.seed),
                        seed=args.seed, ridge=args.ridge)
    region = fast_lsm(data, det, cfg, jobs=args.jobs)
    rec = region.to_record()
    print(json.dumps(rec, sort_keys=True))
    path = out / "hot_region.json"
    _write_json(path, rec)
    return EXIT_OK, [args.file], [path]


def _final_check(original: bytes, final: bytes, actions) -> VerificationReport:
    """Re-plan the logged actions from scratch and verify the chain."""
    try:
        image = parse_pe(original)
    except PeError:
        image = None
    if image is None:
        if any(a.kind != "Append" for a in actions):
            return VerificationReport(False, kind="Chain", error="non-Append action on a non-PE input")
        expected = original + b"".join(a.payload for a in actions)
        ok = expected == final
        return VerificationReport(ok, kind="Append", error=None if ok else "bytes differ from the replayed appends")
    plans = apply_plans(image, actions)
    rebuilt = serialize(plans[-1].new_image) if plans else original
    if rebuilt != final:
        return VerificationReport(False, kind="Chain", error="transformed file differs from the replayed plan log")
    return verify_chain(image, plans)


def cmd_attack(args, out: Path):
    data = _read_input(args.file)
    det = load_detector(args.detector, args.threshold)
    cfg = _attack_config(args)
    trace = run_attack(data, det, cfg)
    outputs = []
    trace_path = out / "trace.jsonl"
    trace.write(trace_path)
    actions = [r.action for r in trace.rounds if r.verified]
    plan_path = out / "plans.jsonl"
    plan_path.write_text("".join(json.dumps(action_record(a), sort_keys=True) + "\n" for a in actions), encoding="utf-8")
    outputs += [trace_path, plan_path]

    code = OUTCOME_EXIT[trace.outcome]
    verified = None
    if trace.outcome == "Evaded":
        report = _final_check(data, trace.final_bytes, actions)
        verified = report.reconstructed_ok
        if verified:
            binary = out / "transformed.bin"
            binary.write_bytes(trace.final_bytes)
            outputs.append(binary)
        else:
            print(f"refusing to write unverified output: {report.error}", file=sys.stderr)
            code = EXIT_FAILED
    summary = {
        "outcome": trace.outcome,
        "rounds": len(trace.rounds),
        "total_queries": trace.total_queries,
        "original_size": trace.original_size,
        "final_size": len(trace.final_bytes),
        "size_growth": trace.size_growth,
        "final_score": trace.rounds[-1].score_after if trace.rounds else None,
        "verified": verified,
    }
    summary_path = out / "summary.json"
    _write_json(summary_path, summary)
    outputs.append(summary_path)
    print(f"outcome={trace.outcome} rounds={len(trace.rounds)} queries={trace.total_queries} "
          f"size_growth={trace.size_growth:.4f}")
    return code, [args.file], outputs


def cmd_baseline(args, out: Path):
    data = _read_input(args.file)
    det = load_detector(args.detector, args.threshold)
    report = run_random_baseline(data, det, _attack_config(args), args.variants)
    path = out / "baseline.json"
    _write_json(path, report.to_record())
    print(" ".join(f"{k}={v}" for k, v in report.to_record().items()))
    return (EXIT_OK if report.success else EXIT_EXHAUSTED), [args.file], [path]


def cmd_compare(args, out: Path):
    data = _read_input(args.file)
    det = load_detector(args.detector, args.threshold)
    rows = compare_strategies(data, det, _attack_config(args))
    path = out / "comparison.csv"
    write_comparison(path, rows)
    for r in rows:
        print(f"{r['strategy']}: success={r['success']} rounds={r['rounds']} queries={r['queries']} "
              f"size_growth={r['size_growth']:.4f}")
    return EXIT_OK, [args.file], [path]


def cmd_verify(args, out: Path):
    original = _read_input(args.original)
    transformed = _read_input(args.transformed)
    text = _read_input(args.plan_log).decode("utf-8")
    actions = [action_from_record(json.loads(line)) for line in text.splitlines() if line.strip()]
    report = _final_check(original, transformed, actions)
    path = out / "verify.json"
    _write_json(path, report.to_record())
    print(f"ok={report.reconstructed_ok} kind={report.kind} mismatches={len(report.mismatches)} "
          f"steps={report.steps} error={report.error}")
    for va, want, got in report.mismatches[:16]:
        print(f"  {va:#010x}: expected {want:#04x} found {got:#04x}")
    return (EXIT_OK if report.reconstructed_ok else EXIT_FAILED), [args.original, args.transformed, args.plan_log], [path]


def _corpus(directory: str) -> list[bytes]:
    if not os.path.isdir(directory):
        raise UsageError(f"no such directory: {directory}")
    return [p.read_bytes() for p in sorted(Path(directory).iterdir()) if p.is_file()]


def cmd_train(args, out: Path):
    malware, benign = _corpus(args.malware), _corpus(args.benign)
    model = train_ngram(malware, benign, n=args.ngram, epochs=args.epochs, rate=args.rate, seed=args.seed, l2=args.l2)
    path = out / "model.json"
    model.save(path)
    acc = accuracy(model, malware, benign)
    print(f"accuracy={acc:.4f} malware={len(malware)} benign={len(benign)} features={len(model.weights)}")
    return EXIT_OK, [], [path]


COMMANDS = {
    "detect": cmd_detect,
    "explain": cmd_explain,
    "fastlsm": cmd_fastlsm,
    "attack": cmd_attack,
    "baseline": cmd_baseline,
    "compare": cmd_compare,
    "verify": cmd_verify,
    "train-detector": cmd_train,
}


def _config_snapshot(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "command")}


def _strip_out(argv: list[str]) -> list[str]:
    kept, skip = [], False
    for tok in argv:
        if skip:
            skip = False
        elif tok == "--out":
            skip = True
        elif not tok.startswith("--out="):
            kept.append(tok)
    return kept


def _run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        return _replay(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    code, inputs, outputs = COMMANDS[args.command](args, out)
    if args.command == "train-detector":
        inputs = [str(p) for d in (args.malware, args.benign) for p in sorted(Path(d).iterdir()) if p.is_file()]
    manifest = {
        "command": args.command,
        "argv": _strip_out(argv),
        "cwd": os.getcwd(),
        "config": _config_snapshot(args),
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {p.name: sha256_file(p) for p in outputs},
        "version": __version__,
        "exit_code": code,
    }
    _write_json(out / "manifest.json", manifest)
    return code


@contextlib.contextmanager
def _working_dir(path: str):
    prev = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(prev)


def _replay(args) -> int:
    manifest = json.loads(_read_input(args.manifest))
    out = Path(args.out)
    with _working_dir(manifest["cwd"]):
        for path, digest in manifest["inputs"].items():
            if sha256_file(path) != digest:
                print(f"input changed since the recorded run: {path}", file=sys.stderr)
                return EXIT_FAILED
        code = _run(manifest["argv"] + ["--out", str(out.resolve())])
    fresh = json.loads((out / "manifest.json").read_text())
    diffs = sorted(name for name in set(manifest["outputs"]) | set(fresh["outputs"])
                   if manifest["outputs"].get(name) != fresh["outputs"].get(name))
    if code != manifest["exit_code"]:
        diffs.append(f"<exit code {code} vs {manifest['exit_code']}>")
    if diffs:
        print("replay differs: " + ", ".join(diffs))
        return EXIT_FAILED
    print(f"replay identical: {len(fresh['outputs'])} outputs")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except UsageError as exc:
        print(f"bytesleuth: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RemoteUnavailable as exc:
        print(f"bytesleuth: detector unavailable: {exc}", file=sys.stderr)
        return EXIT_REMOTE
    except UnsupportedBinary as exc:
        print(f"bytesleuth: unsupported binary: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except (BytesleuthError, EmptyCorpus, ValueError) as exc:
        print(f"bytesleuth: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
