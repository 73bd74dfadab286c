"""Black-box detectors: bytes in, score in [0, 1] out.

Everything that queries a detector goes through :class:`DetectorHandle`,
which validates scores and counts queries. Built-in scorers are a byte
n-gram logistic model and a planted-signature detector with analytically
known behaviour; external detectors attach over a subprocess pipe or HTTP.
"""
from __future__ import annotations

import json
import math
import selectors
import shlex
import struct
import subprocess
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from os import PathLike
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BytesleuthError

DEFAULT_THRESHOLD = 0.5
DEFAULT_INPUT_CAP = 2 * 1024 * 1024


class DetectorError(BytesleuthError):
    pass


class RemoteUnavailable(DetectorError):
    pass


class MalformedReply(DetectorError):
    pass


class Timeout(RemoteUnavailable):
    pass


class EmptyCorpus(DetectorError, ValueError):
    pass


class DetectorHandle:
    """Wrap a scorer with a threshold and an exact query counter."""

    def __init__(
        self,
        scorer: Callable[[bytes], float],
        threshold: float = DEFAULT_THRESHOLD,
        *,
        concurrent_safe: bool = True,
        name: str = "detector",
    ):
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        self.scorer = scorer
        self.threshold = threshold
        self.concurrent_safe = concurrent_safe
        self.name = name
        self._count = 0
        self._lock = threading.Lock()

    @property
    def query_counter(self) -> int:
        return self._count

    def score(self, data: bytes) -> float:
        with self._lock:
            self._count += 1
        value = float(self.scorer(bytes(data)))
        if not (0.0 <= value <= 1.0):
            raise MalformedReply(f"{self.name} returned {value!r}, outside [0, 1]")
        return value

    def classify(self, data: bytes) -> bool:
        """True means malware."""
        return self.score(data) >= self.threshold

    def is_malware(self, score: float) -> bool:
        return score >= self.threshold

    def score_many(self, items: Sequence[bytes], jobs: int = 1) -> list[float]:
        """Score in input order; runs concurrently only for concurrent-safe scorers."""
        if jobs <= 1 or not self.concurrent_safe or len(items) < 2:
            return [self.score(b) for b in items]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(self.score, items))

    def __repr__(self) -> str:
        return f"DetectorHandle({self.name!r}, threshold={self.threshold}, queries={self._count})"


def logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


# Planted signatures -------------------------------------------------------

@dataclass(frozen=True)
class PlantedSignatureDetector:
    """score = clamp(base_score + sum of weights of patterns present, 0, 1).

    ``scope`` restricts matching to a ``(start, end)`` byte window.
    """

    signatures: tuple[tuple[bytes, float], ...]
    base_score: float = 0.0
    scope: tuple[int, int] | None = None
    input_cap: int = DEFAULT_INPUT_CAP

    def __call__(self, data: bytes) -> float:
        data = data[:self.input_cap]
        if self.scope is not None:
            data = data[self.scope[0]:self.scope[1]]
        total = self.base_score + sum(w for pat, w in self.signatures if pat in data)
        return min(1.0, max(0.0, total))

    def to_dict(self) -> dict:
        return {
            "kind": "planted",
            "base_score": self.base_score,
            "signatures": [{"pattern_hex": p.hex(), "weight": w} for p, w in self.signatures],
            "scope": list(self.scope) if self.scope else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PlantedSignatureDetector":
        sigs = []
        for entry in doc["signatures"]:
            pat = bytes.fromhex(entry["pattern_hex"]) if "pattern_hex" in entry else entry["pattern"].encode("latin-1")
            sigs.append((pat, float(entry["weight"])))
        scope = doc.get("scope")
        return cls(tuple(sigs), float(doc.get("base_score", 0.0)), tuple(scope) if scope else None)


# Byte n-gram logistic model ----------------------------------------------

def gram_ids(data: bytes, n: int) -> np.ndarray:
    """Sorted distinct n-gram ids (big-endian integer value of the gram)."""
    if n < 1 or n > 4:
        raise ValueError("gram order must be 1..4")
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.uint32)
    if arr.size < n:
        return np.empty(0, dtype=np.uint32)
    ids = np.zeros(arr.size - n + 1, dtype=np.uint32)
    for k in range(n):
        ids = (ids << np.uint32(8)) | arr[k:arr.size - n + 1 + k]
    return np.unique(ids)


@dataclass
class NgramModel:
    """Logistic model over n-gram presence bits."""

    n: int
    weights: dict[bytes, float] = field(default_factory=dict)
    bias: float = 0.0
    input_cap: int = DEFAULT_INPUT_CAP

    def __post_init__(self):
        self._table = {int.from_bytes(g, "big"): w for g, w in self.weights.items()}

    def logit(self, data: bytes) -> float:
        ids = gram_ids(data[:self.input_cap], self.n)
        table = self._table
        return self.bias + sum(table.get(int(i), 0.0) for i in ids) if table else self.bias

    def __call__(self, data: bytes) -> float:
        return logistic(self.logit(data))

    def to_dict(self) -> dict:
        return {
            "kind": "ngram",
            "n": self.n,
            "bias": self.bias,
            "weights": {g.hex(): w for g, w in sorted(self.weights.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NgramModel":
        return cls(
            n=int(doc["n"]),
            weights={bytes.fromhex(k): float(v) for k, v in doc["weights"].items()},
            bias=float(doc["bias"]),
        )

    def save(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | PathLike) -> "NgramModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def train_ngram(
    malware: Sequence[bytes],
    benign: Sequence[bytes],
    n: int = 2,
    epochs: int = 10,
    rate: float = 0.1,
    seed: int = 0,
    l2: float = 0.0,
) -> NgramModel:
    """Fit a presence-bit logistic model by plain SGD (one sample per step)."""
    if not malware or not benign:
        raise EmptyCorpus("both corpora must be nonempty")
    docs = [gram_ids(b[:DEFAULT_INPUT_CAP], n) for b in malware] + [gram_ids(b[:DEFAULT_INPUT_CAP], n) for b in benign]
    labels = np.array([1.0] * len(malware) + [0.0] * len(benign))
    vocab = np.unique(np.concatenate(docs)) if docs else np.empty(0, dtype=np.uint32)
    cols = [np.searchsorted(vocab, d) for d in docs]
    w = np.zeros(vocab.size)
    bias = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for j in rng.permutation(len(docs)):
            z = bias + w[cols[j]].sum()
            grad = logistic(z) - labels[j]
            if l2:
                w[cols[j]] *= 1.0 - rate * l2
            w[cols[j]] -= rate * grad
            bias -= rate * grad
    weights = {
        int(g).to_bytes(n, "big"): float(x) for g, x in zip(vocab, w) if x != 0.0
    }
    return NgramModel(n=n, weights=weights, bias=float(bias))


def accuracy(scorer: Callable[[bytes], float], malware: Iterable[bytes], benign: Iterable[bytes],
             threshold: float = DEFAULT_THRESHOLD) -> float:
    hits = [scorer(b) >= threshold for b in malware] + [scorer(b) < threshold for b in benign]
    return sum(hits) / len(hits)


# Remote detectors --------------------------------------------------------

def _parse_score(text: str) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise MalformedReply(f"reply {text!r} is not a number") from None
    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        raise MalformedReply(f"reply {value!r} outside [0, 1]")
    return value


class SubprocessScorer:
    """Talk to a long-lived child process.

    Per request: 8-byte little-endian length, then the payload, on the
    child's stdin; the child answers with one decimal score and a newline.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 30.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0,
                )
            except OSError as exc:
                raise RemoteUnavailable(f"cannot start {self.command!r}: {exc}") from exc
        return self._proc

    def __call__(self, data: bytes) -> float:
        with self._lock:
            proc = self._ensure()
            try:
                proc.stdin.write(struct.pack("<Q", len(data)) + data)
                proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise RemoteUnavailable(f"child exited: {exc}") from exc
            line = self._readline(proc)
        return _parse_score(line)

    def _readline(self, proc: subprocess.Popen) -> str:
        buf = bytearray()
        with selectors.DefaultSelector() as sel:
            sel.register(proc.stdout, selectors.EVENT_READ)
            while not buf.endswith(b"\n"):
                if not sel.select(self.timeout):
                    raise Timeout(f"no reply within {self.timeout}s")
                chunk = proc.stdout.read(1)
                if not chunk:
                    raise RemoteUnavailable("child closed its stdout")
                buf += chunk
        return buf.decode("ascii", errors="replace")

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=5)
            self._proc = None


class HttpScorer:
    """POST raw bytes to ``<url>/score``; expect ``{"score": <float>}``."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url.rstrip("/")
        if not self.url.endswith("/score"):
            self.url += "/score"
        self.timeout = timeout

    def __call__(self, data: bytes) -> float:
        req = urllib.request.Request(
            self.url, data=data, method="POST",
            headers={"Content-Type": "application/octet-stream"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except TimeoutError as exc:
            raise Timeout(str(exc)) from exc
        except (urllib.error.URLError, ConnectionError, OSError) as exc:
            if "timed out" in str(exc):
                raise Timeout(str(exc)) from exc
            raise RemoteUnavailable(f"{self.url}: {exc}") from exc
        try:
            doc = json.loads(body)
            value = doc["score"]
        except (ValueError, KeyError, TypeError):
            raise MalformedReply(f"unexpected body {body[:80]!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MalformedReply(f"score field is {value!r}")
        return _parse_score(repr(float(value)))


def remote_detector(
    endpoint: str,
    threshold: float = DEFAULT_THRESHOLD,
    *,
    timeout: float = 30.0,
    concurrent_safe: bool = False,
) -> DetectorHandle:
    """``proc:<command line>`` or ``http(s)://host[:port]``."""
    if endpoint.startswith("proc:"):
        scorer = SubprocessScorer(endpoint[5:], timeout=timeout)
    elif endpoint.startswith(("http://", "https://")):
        scorer = HttpScorer(endpoint, timeout=timeout)
    elif endpoint.startswith("http:"):
        scorer = HttpScorer(endpoint[5:], timeout=timeout)
    else:
        raise ValueError(f"unknown endpoint {endpoint!r}")
    return DetectorHandle(scorer, threshold, concurrent_safe=concurrent_safe, name=endpoint)


def serve_stdio(scorer: Callable[[bytes], float], stdin=None, stdout=None) -> None:
    """Child side of the subprocess protocol; returns on EOF."""
    import sys

    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    while True:
        head = stdin.read(8)
        if len(head) < 8:
            return
        (size,) = struct.unpack("<Q", head)
        payload = b""
        while len(payload) < size:
            chunk = stdin.read(size - len(payload))
            if not chunk:
                return
            payload += chunk
        stdout.write(f"{float(scorer(payload))!r}\n".encode("ascii"))
        stdout.flush()


def load_builtin(doc: dict) -> Callable[[bytes], float]:
    kind = doc.get("kind")
    if kind == "ngram":
        return NgramModel.from_dict(doc)
    if kind == "planted" or "signatures" in doc:
        return PlantedSignatureDetector.from_dict(doc)
    raise ValueError(f"unknown detector kind {kind!r}")
