"""Superpixels: contiguous byte ranges that act as interpretable features.

A :class:`SuperpixelMap` partitions (part of) a file; an interpretable
vector is a 0/1 numpy array with one entry per pixel, 1 meaning the
pixel's bytes are kept and 0 meaning they are occluded.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from os import PathLike
from typing import Iterable, Sequence

import numpy as np

from .errors import BytesleuthError, EmptyInput, LengthMismatch, OutOfBounds
from .pe import PeImage

DEFAULT_CHUNK = 1024


class OverlappingBlocks(BytesleuthError, ValueError):
    pass


@dataclass(frozen=True)
class Superpixel:
    start: int
    length: int
    label: str | None = None

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class SuperpixelMap:
    pixels: tuple[Superpixel, ...]
    file_length: int

    def __post_init__(self):
        prev_end = 0
        for p in self.pixels:
            if p.length < 1:
                raise ValueError(f"pixel at {p.start:#x} has length {p.length}")
            if p.start < prev_end:
                raise OverlappingBlocks(f"pixel at {p.start:#x} overlaps its predecessor")
            if p.end > self.file_length:
                raise OutOfBounds(f"pixel [{p.start:#x}, {p.end:#x}) exceeds file length")
            prev_end = p.end

    def __len__(self) -> int:
        return len(self.pixels)

    def __iter__(self):
        return iter(self.pixels)

    def __getitem__(self, i: int) -> Superpixel:
        return self.pixels[i]

    @property
    def labels(self) -> list[str | None]:
        return [p.label for p in self.pixels]

    def ranges(self) -> list[tuple[int, int]]:
        return [(p.start, p.end) for p in self.pixels]

    def containing(self, offset: int) -> int | None:
        """Index of the pixel covering ``offset``, if any."""
        starts = [p.start for p in self.pixels]
        i = int(np.searchsorted(starts, offset, side="right")) - 1
        if i >= 0 and self.pixels[i].start <= offset < self.pixels[i].end:
            return i
        return None


# Occlusion policies -------------------------------------------------------

@dataclass(frozen=True)
class Zero:
    """Fill with 0x00."""

    def fill(self, start: int, length: int) -> bytes:
        return bytes(length)

    def describe(self) -> str:
        return "zero"


@dataclass(frozen=True)
class Random:
    """Uniform random bytes, reproducible per (seed, start offset)."""

    seed: int = 0

    def fill(self, start: int, length: int) -> bytes:
        rng = np.random.default_rng([self.seed, start])
        return rng.integers(0, 256, size=length, dtype=np.uint8).tobytes()

    def describe(self) -> str:
        return f"random:{self.seed}"


@dataclass(frozen=True)
class Adversarial:
    """Repeat a caller-supplied byte pattern, phase-aligned to the range start."""

    pattern: bytes

    def __post_init__(self):
        if not self.pattern:
            raise ValueError("adversarial pattern must be nonempty")

    def fill(self, start: int, length: int) -> bytes:
        reps = -(-length // len(self.pattern))
        return (self.pattern * reps)[:length]

    def describe(self) -> str:
        digest = hashlib.sha256(self.pattern).hexdigest()[:12]
        return f"adversarial:{len(self.pattern)}:{digest}"


OcclusionPolicy = Zero | Random | Adversarial


def segment_by_offset(file_length: int, chunk: int = DEFAULT_CHUNK) -> SuperpixelMap:
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    if file_length <= 0:
        raise EmptyInput("cannot segment an empty file")
    pixels = tuple(
        Superpixel(start, min(chunk, file_length - start)) for start in range(0, file_length, chunk)
    )
    return SuperpixelMap(pixels, file_length)


def segment_by_sections(
    image: PeImage,
    chunk: int = DEFAULT_CHUNK,
    *,
    file_length: int | None = None,
    sections: Iterable[int] | None = None,
) -> SuperpixelMap:
    """Chunk each section body independently; headers and overlay are left out.

    ``sections`` restricts the map to the given section indices.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    if file_length is None:
        file_length = image.layout_end + len(image.trailing_data)
    chosen = range(len(image.sections)) if sections is None else sections
    pixels = []
    for i in chosen:
        s = image.sections[i]
        for off in range(0, s.raw_size, chunk):
            pixels.append(Superpixel(s.raw_offset + off, min(chunk, s.raw_size - off), s.label))
    pixels.sort(key=lambda p: p.start)
    return SuperpixelMap(tuple(pixels), file_length)


def segment_from_listing(listing: Sequence, file_length: int) -> SuperpixelMap:
    """One pixel per basic block from an external disassembly listing.

    Entries are mappings with ``start`` and ``length`` keys (or
    ``(start, length)`` pairs), given in file offsets.
    """
    blocks = []
    for entry in listing:
        if isinstance(entry, dict):
            start, length = int(entry["start"]), int(entry["length"])
        else:
            start, length = (int(v) for v in entry)
        label = entry.get("label") if isinstance(entry, dict) else None
        if start < 0 or length < 1 or start + length > file_length:
            raise OutOfBounds(f"block [{start:#x}, +{length:#x}) outside file of {file_length:#x} bytes")
        blocks.append(Superpixel(start, length, label))
    blocks.sort(key=lambda p: p.start)
    for a, b in zip(blocks, blocks[1:]):
        if b.start < a.end:
            raise OverlappingBlocks(f"blocks at {a.start:#x} and {b.start:#x} share bytes")
    return SuperpixelMap(tuple(blocks), file_length)


def load_listing(path: str | PathLike) -> list[dict]:
    """Read a JSON block listing: ``[{"start": int, "length": int}, ...]``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict):
        doc = doc["blocks"]
    return list(doc)


def merge_maps(*maps: SuperpixelMap) -> SuperpixelMap:
    """Union of disjoint maps over the same file."""
    lengths = {m.file_length for m in maps}
    if len(lengths) != 1:
        raise LengthMismatch("maps describe files of different lengths")
    pixels = sorted((p for m in maps for p in m.pixels), key=lambda p: p.start)
    return SuperpixelMap(tuple(pixels), lengths.pop())


def bits(text: str) -> np.ndarray:
    """``bits("01")`` -> array([0, 1], dtype=uint8)."""
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0")


def mask_to_bytes(original: bytes, smap: SuperpixelMap, v, policy: OcclusionPolicy = Zero()) -> bytes:
    """Occlude every pixel whose bit is 0; everything else is copied verbatim."""
    v = np.asarray(v)
    if v.shape != (len(smap),):
        raise LengthMismatch(f"vector of length {v.size} for a map of {len(smap)} pixels")
    if len(original) != smap.file_length:
        raise LengthMismatch(f"map built for {smap.file_length} bytes, got {len(original)}")
    out = bytearray(original)
    for i in np.flatnonzero(v == 0):
        p = smap.pixels[i]
        out[p.start:p.end] = policy.fill(p.start, p.length)
    return bytes(out)
