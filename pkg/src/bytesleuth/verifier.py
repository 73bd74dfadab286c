"""Static preservation oracle for transformed images.

A small interpreter executes restoration stubs over the virtual memory
layout of an image. It understands exactly three instruction forms
(``C6 05`` byte store, ``C7 05`` dword store, ``E9`` near jump) and decodes
them itself rather than reusing the emitter's decoder, so an encoding bug
in one is not mirrored in the other.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import BytesleuthError
from .pe import PeImage, serialize

_U32 = 0xFFFFFFFF


class VerifierError(BytesleuthError):
    pass


class OverlapFault(VerifierError):
    pass


class UnknownOpcode(VerifierError):
    pass


class StepLimitExceeded(VerifierError):
    pass


class WriteFault(VerifierError):
    pass


class ReadFault(VerifierError):
    pass


@dataclass
class Region:
    start: int
    data: bytearray
    name: str
    writable: bool = True

    @property
    def end(self) -> int:
        return self.start + len(self.data)


@dataclass
class MemoryMap:
    base: int
    regions: list[Region]

    def __post_init__(self):
        self.regions.sort(key=lambda r: r.start)
        for a, b in zip(self.regions, self.regions[1:]):
            if b.start < a.end:
                raise OverlapFault(f"{a.name} and {b.name} overlap at {b.start:#x}")

    def region_of(self, va: int) -> Region | None:
        for r in self.regions:
            if r.start <= va < r.end:
                return r
        return None

    def read(self, va: int, n: int) -> bytes:
        r = self.region_of(va)
        if r is None or va + n > r.end:
            raise ReadFault(f"read of {n} bytes at {va:#x} is unmapped")
        return bytes(r.data[va - r.start:va - r.start + n])

    def write(self, va: int, blob: bytes) -> None:
        r = self.region_of(va)
        if r is None or va + len(blob) > r.end:
            raise WriteFault(f"write of {len(blob)} bytes at {va:#x} is unmapped")
        if not r.writable:
            raise WriteFault(f"write at {va:#x} hits protected region {r.name}")
        r.data[va - r.start:va - r.start + len(blob)] = blob


def build_memory_map(image: PeImage, protect: Iterable[str] = ()) -> MemoryMap:
    """Virtual layout of ``image``; headers and sections named in ``protect`` are read-only."""
    protect = set(protect)
    head = serialize(image)[:image.size_of_headers]
    regions = [Region(image.image_base, bytearray(head), "<headers>", writable=False)]
    for s in image.sections:
        extent = s.virtual_extent
        content = bytearray(s.body[:min(extent, s.raw_size)])
        content.extend(bytes(extent - len(content)))
        regions.append(Region(image.image_base + s.virtual_address, content, s.label, s.label not in protect))
    return MemoryMap(image.image_base, regions)


@dataclass
class StubRun:
    writes: list[tuple[int, bytes]]
    exit_va: int | None
    steps: int


def interpret_stub(
    mem: MemoryMap,
    entry: int,
    max_steps: int | None = None,
    stub_ranges: Sequence[tuple[int, int]] | None = None,
) -> StubRun:
    """Run the stub at ``entry``; a jump leaving ``stub_ranges`` ends the run.

    ``stub_ranges`` defaults to the region holding ``entry``. Writes are
    applied to ``mem`` in place.
    """
    if stub_ranges is None:
        r = mem.region_of(entry)
        if r is None:
            raise ReadFault(f"entry {entry:#x} is unmapped")
        stub_ranges = [(r.start, r.end)]
    if max_steps is None:
        max_steps = sum(e - s for s, e in stub_ranges) + 16

    def inside(va: int) -> bool:
        return any(s <= va < e for s, e in stub_ranges)

    ip = entry
    writes = []
    steps = 0
    while True:
        if steps >= max_steps:
            raise StepLimitExceeded(f"no exit after {steps} steps")
        steps += 1
        r = mem.region_of(ip)
        if r is None:
            raise ReadFault(f"instruction fetch at {ip:#x} is unmapped")
        window = bytes(r.data[ip - r.start:ip - r.start + 10])
        op = window[:1]
        if op == b"\xE9" and len(window) >= 5:
            target = (ip + 5 + struct.unpack("<i", window[1:5])[0]) & _U32
            if not inside(target):
                return StubRun(writes, target, steps)
            ip = target
        elif window[:2] == b"\xC6\x05" and len(window) >= 7:
            va = struct.unpack("<I", window[2:6])[0]
            mem.write(va, window[6:7])
            writes.append((va, window[6:7]))
            ip += 7
        elif window[:2] == b"\xC7\x05" and len(window) >= 10:
            va = struct.unpack("<I", window[2:6])[0]
            mem.write(va, window[6:10])
            writes.append((va, window[6:10]))
            ip += 10
        else:
            raise UnknownOpcode(f"byte {window[:2].hex() or '<end>'} at {ip:#x}")


@dataclass(frozen=True)
class VerificationReport:
    reconstructed_ok: bool
    mismatches: tuple[tuple[int, int, int], ...] = ()
    exit_va: int | None = None
    steps: int = 0
    kind: str = ""
    error: str | None = None
    checked_bytes: int = field(default=0, repr=False)

    def to_record(self) -> dict:
        return {
            "ok": self.reconstructed_ok,
            "kind": self.kind,
            "exit_va": self.exit_va,
            "steps": self.steps,
            "checked_bytes": self.checked_bytes,
            "mismatches": [[va, e, f] for va, e, f in self.mismatches[:64]],
            "mismatch_count": len(self.mismatches),
            "error": self.error,
        }


def _compare_sections(original: PeImage, expected: MemoryMap, found: MemoryMap, limit: int = 4096):
    mismatches = []
    checked = 0
    for s in original.sections:
        va = original.image_base + s.virtual_address
        want = expected.read(va, s.virtual_extent)
        got = found.read(va, s.virtual_extent)
        checked += len(want)
        if want != got:
            for i, (a, b) in enumerate(zip(want, got)):
                if a != b:
                    mismatches.append((va + i, a, b))
                    if len(mismatches) >= limit:
                        return mismatches, checked
    return mismatches, checked


def _new_sections(before: PeImage, after: PeImage) -> list:
    return list(after.sections[len(before.sections):])


def _check_datadisp(original: PeImage, transformed: PeImage, displaced: int) -> VerificationReport:
    stubs = _new_sections(original, transformed)
    names = [s.label for s in stubs]
    base = transformed.image_base
    ranges = [(base + s.virtual_address, base + s.virtual_address + s.virtual_extent) for s in stubs]
    try:
        mem = build_memory_map(transformed, protect=names)
        want = build_memory_map(original)
        run = interpret_stub(mem, transformed.entry_va, 4 * displaced + 16, ranges)
        mismatches, checked = _compare_sections(original, want, mem)
    except VerifierError as exc:
        return VerificationReport(False, kind="DataDisp", error=f"{type(exc).__name__}: {exc}")
    ok = not mismatches and run.exit_va == original.entry_va
    error = None if run.exit_va == original.entry_va else f"exit at {run.exit_va:#x}, expected {original.entry_va:#x}"
    return VerificationReport(ok, tuple(mismatches), run.exit_va, run.steps, "DataDisp", error, checked)


def _decode_jmp(blob: bytes, va: int) -> int | None:
    if len(blob) < 5 or blob[0] != 0xE9:
        return None
    return (va + 5 + struct.unpack("<i", blob[1:5])[0]) & _U32


def _check_disp(original: PeImage, transformed: PeImage, rng: tuple[int, int]) -> VerificationReport:
    start, end = rng
    try:
        new = _new_sections(original, transformed)
        if len(new) != 1:
            return VerificationReport(False, kind="Disp", error=f"expected one new section, found {len(new)}")
        copy = new[0]
        before = serialize(original)
        after = serialize(transformed)
        base = original.image_base
        idx = next(i for i, s in enumerate(original.sections)
                   if s.raw_offset <= start and end <= s.raw_offset + s.raw_size)
        sec = original.sections[idx]
        start_va = base + sec.virtual_address + start - sec.raw_offset
        end_va = start_va + (end - start)
        copy_va = base + copy.virtual_address
        problems = []
        if _decode_jmp(after[start:start + 5], start_va) != copy_va:
            problems.append("in-place jump does not target the copy")
        n = end - start
        if copy.body[:n] != before[start:end]:
            problems.append("copied bytes differ from the original range")
        if _decode_jmp(copy.body[n:n + 5], copy_va + n) != end_va:
            problems.append("trailing jump does not return to the end of the range")
        if transformed.address_of_entry_point != original.address_of_entry_point:
            problems.append("entry point changed")
        for i, (a, b) in enumerate(zip(original.sections, transformed.sections)):
            if i == idx:
                lo, hi = start - a.raw_offset, end - a.raw_offset
                if a.body[:lo] != b.body[:lo] or a.body[hi:] != b.body[hi:]:
                    problems.append(f"bytes outside the range changed in {a.label}")
            elif a.body != b.body:
                problems.append(f"section {a.label} changed")
    except (StopIteration, VerifierError) as exc:
        return VerificationReport(False, kind="Disp", error=f"{type(exc).__name__}: {exc}")
    return VerificationReport(not problems, (), None, 0, "Disp", "; ".join(problems) or None, n)


def _check_append(original: PeImage, transformed: PeImage) -> VerificationReport:
    before = serialize(original)
    after = serialize(transformed)
    ok = after[:len(before)] == before and len(after) > len(before)
    return VerificationReport(ok, kind="Append", error=None if ok else "prefix differs", checked_bytes=len(before))


def verify_preservation(original: PeImage, transformed: PeImage, plan) -> VerificationReport:
    """Check one plan (anything with ``action.kind`` and ``action.targets``)."""
    kind = plan.action.kind
    if kind == "Append":
        return _check_append(original, transformed)
    if kind == "Disp":
        return _check_disp(original, transformed, plan.action.targets[0])
    displaced = sum(e - s for s, e in plan.action.targets)
    return _check_datadisp(original, transformed, displaced)


def verify_chain(original: PeImage, plans: Sequence) -> VerificationReport:
    """Verify each plan against its predecessor, then the DataDisp chain as a whole.

    The whole-chain check interprets every stub from the final entry point
    and requires the original sections back, byte for byte, which is only
    meaningful when no Disp plan rewrote code in place.
    """
    if not plans:
        return VerificationReport(True, kind="Empty")
    current = original
    for plan in plans:
        rep = verify_preservation(current, plan.new_image, plan)
        if not rep.reconstructed_ok:
            return rep
        current = plan.new_image
    kinds = {p.action.kind for p in plans}
    if "DataDisp" in kinds and "Disp" not in kinds:
        displaced = sum(e - s for p in plans if p.action.kind == "DataDisp" for s, e in p.action.targets)
        rep = _check_datadisp(original, current, displaced)
        return VerificationReport(rep.reconstructed_ok, rep.mismatches, rep.exit_va, rep.steps, "Chain",
                                  rep.error, rep.checked_bytes)
    return VerificationReport(True, exit_va=original.entry_va, kind="Chain")
