"""Synthetic binaries with planted ground truth.

Each case is a fixture PE plus a :class:`PlantedSignatureDetector` whose
behaviour is known exactly: one malicious signature and several benign
patterns, each inside its own data or resource pixel. The detector is
additive, so the pixel holding the signature is the single removal that
flips the verdict, while removing a benign pattern pushes the other way.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import PlantedSignatureDetector
from .pe import parse_pe, replace_section, serialize, make_minimal_pe
from .segmentation import DEFAULT_CHUNK

CORPUS_UNITS = (16, 100, 28)


@dataclass(frozen=True)
class SyntheticCase:
    data: bytes
    detector: PlantedSignatureDetector
    signature: bytes
    signature_offset: int
    benign_offsets: tuple[int, ...]

    @property
    def signature_range(self) -> tuple[int, int]:
        return self.signature_offset, self.signature_offset + len(self.signature)


def _unique_pattern(rng: np.random.Generator, n: int, avoid: bytes) -> bytes:
    while True:
        pat = rng.integers(1, 256, size=n, dtype=np.uint8).tobytes()
        if pat not in avoid:
            return pat


def make_case(
    seed: int,
    *,
    n_benign: int = 10,
    signature_weight: float = 0.15,
    benign_weight: float = 0.035,
    base_score: float = 0.83,
    section_units: tuple[int, int, int] = CORPUS_UNITS,
    chunk: int = DEFAULT_CHUNK,
    signature_length: int = 16,
    benign_length: int = 12,
) -> SyntheticCase:
    """A fixture PE with a planted signature and ``n_benign`` benign patterns.

    With the defaults the clean score is 0.63, removing the signature gives
    0.48, and removing the signature together with any benign pattern gives
    0.515, which is still malware at threshold 0.5.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    image = parse_pe(make_minimal_pe(seed, section_units=section_units, data_stride=chunk))
    blob = serialize(image)

    slots = []
    for idx, s in enumerate(image.sections):
        if s.is_executable:
            continue
        for off in range(0, s.raw_size - chunk + 1, chunk):
            slots.append((idx, off))
    picks = rng.choice(len(slots), size=1 + n_benign, replace=False)

    signature = _unique_pattern(rng, signature_length, blob)
    benign = [_unique_pattern(rng, benign_length, blob + signature) for _ in range(n_benign)]
    offsets = []
    for k, pat in zip(picks, [signature, *benign]):
        idx, off = slots[int(k)]
        at = off + int(rng.integers(0, chunk - len(pat)))
        s = image.sections[idx]
        body = bytearray(s.body)
        body[at:at + len(pat)] = pat
        image = replace_section(image, idx, body=bytes(body))
        offsets.append(s.raw_offset + at)

    detector = PlantedSignatureDetector(
        ((signature, signature_weight), *((p, -benign_weight) for p in benign)), base_score,
    )
    return SyntheticCase(serialize(image), detector, signature, offsets[0], tuple(offsets[1:]))


def make_corpus(count: int, seed: int = 0, **kwargs) -> list[SyntheticCase]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [make_case(int(s), **kwargs) for s in seeds]


def planted_blob(length: int, signature: bytes, offset: int, seed: int = 0) -> bytes:
    """Random bytes of ``length`` with ``signature`` written at ``offset``."""
    rng = np.random.default_rng(seed)
    out = bytearray(rng.integers(0, 256, size=length, dtype=np.uint8).tobytes())
    out[offset:offset + len(signature)] = signature
    return bytes(out)
