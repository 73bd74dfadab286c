"""Function-preserving binary transformations.

* Append: bytes added to the overlay, never referenced by the headers.
* Disp: a run of whole instructions is copied into a new executable
  section followed by a jump back; the original location starts with a
  jump to the copy and the rest is overwritten with filler.
* DataDisp: byte ranges are overwritten with filler and a restoration
  stub is placed in a new section. The entry point is redirected to the
  stub, which writes the original bytes back with absolute ``mov``
  instructions and then jumps to the previous entry point.

Stubs use exactly three 32-bit instruction forms::

    C6 05 <abs32> <imm8>     mov byte  [abs32], imm8
    C7 05 <abs32> <imm32>    mov dword [abs32], imm32
    E9 <rel32>               jmp rel32
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import BytesleuthError, OutOfBounds
from .pe import (
    DIRECTORY_NAMES,
    IMAGE_SCN_CNT_CODE,
    IMAGE_SCN_MEM_EXECUTE,
    IMAGE_SCN_MEM_READ,
    IMAGE_SCN_MEM_WRITE,
    PeImage,
    Unmapped,
    append_section,
    offset_to_rva,
    replace_section,
    serialize,
    set_entry_point,
)
from .segmentation import Adversarial, OcclusionPolicy, Random, Zero

SECTION_PREFIX = b".bsx"
DISP_CHARACTERISTICS = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ
STUB_CHARACTERISTICS = DISP_CHARACTERISTICS | IMAGE_SCN_MEM_WRITE

JMP_LEN = 5
MOV_BYTE_LEN = 7
MOV_DWORD_LEN = 10


class TransformError(BytesleuthError, ValueError):
    pass


class DisplacementOverflow(TransformError):
    pass


class RangeTooSmall(TransformError):
    pass


class NotExecutableSection(TransformError):
    pass


class RelocationsPresent(TransformError):
    pass


class StructuralRange(TransformError):
    pass


class UnknownOpcode(TransformError):
    pass


# Instruction forms ---------------------------------------------------------

@dataclass(frozen=True)
class MovByteAbs:
    va: int
    imm8: int


@dataclass(frozen=True)
class MovDwordAbs:
    va: int
    imm32: bytes


@dataclass(frozen=True)
class JmpRel32:
    dst_va: int


@dataclass(frozen=True)
class StubInstruction:
    form: MovByteAbs | MovDwordAbs | JmpRel32
    address: int
    encoded: bytes


def encode_jmp_rel32(src_va: int, dst_va: int) -> bytes:
    rel = dst_va - (src_va + JMP_LEN)
    if not -(1 << 31) <= rel < (1 << 31):
        raise DisplacementOverflow(f"jump {src_va:#x} -> {dst_va:#x} does not fit rel32")
    return b"\xE9" + struct.pack("<i", rel)


def encode_mov_byte_abs(va: int, imm8: int) -> bytes:
    return b"\xC6\x05" + struct.pack("<IB", va & 0xFFFFFFFF, imm8)


def encode_mov_dword_abs(va: int, imm32: bytes) -> bytes:
    if len(imm32) != 4:
        raise ValueError("imm32 must be 4 bytes")
    return b"\xC7\x05" + struct.pack("<I", va & 0xFFFFFFFF) + bytes(imm32)


def encode(form, address: int) -> bytes:
    if isinstance(form, MovByteAbs):
        return encode_mov_byte_abs(form.va, form.imm8)
    if isinstance(form, MovDwordAbs):
        return encode_mov_dword_abs(form.va, form.imm32)
    if isinstance(form, JmpRel32):
        return encode_jmp_rel32(address, form.dst_va)
    raise TypeError(f"not a stub form: {form!r}")


def decode(buf: bytes, offset: int, address: int) -> StubInstruction:
    """Decode one instruction of the emission subset at ``buf[offset:]``."""
    op = buf[offset:offset + 2]
    if op[:1] == b"\xE9" and offset + JMP_LEN <= len(buf):
        (rel,) = struct.unpack_from("<i", buf, offset + 1)
        return StubInstruction(JmpRel32((address + JMP_LEN + rel) & 0xFFFFFFFF), address, buf[offset:offset + JMP_LEN])
    if op == b"\xC6\x05" and offset + MOV_BYTE_LEN <= len(buf):
        va, imm = struct.unpack_from("<IB", buf, offset + 2)
        return StubInstruction(MovByteAbs(va, imm), address, buf[offset:offset + MOV_BYTE_LEN])
    if op == b"\xC7\x05" and offset + MOV_DWORD_LEN <= len(buf):
        (va,) = struct.unpack_from("<I", buf, offset + 2)
        return StubInstruction(
            MovDwordAbs(va, bytes(buf[offset + 6:offset + 10])), address, buf[offset:offset + MOV_DWORD_LEN]
        )
    raise UnknownOpcode(f"unsupported opcode {bytes(op).hex()} at {address:#x}")


@dataclass(frozen=True)
class StubProgram:
    instructions: tuple[StubInstruction, ...]
    entry_va: int
    exit_target_va: int

    @property
    def code(self) -> bytes:
        return b"".join(i.encoded for i in self.instructions)

    def __len__(self) -> int:
        return len(self.code)


def emit_restore_stub(
    writes: Sequence[tuple[int, bytes]], entry_va: int, exit_va: int, batch_dwords: bool = True
) -> StubProgram:
    """Restoration program for ``(va, original_bytes)`` runs, then ``jmp exit_va``."""
    forms = []
    for va, blob in writes:
        i = 0
        if batch_dwords:
            while len(blob) - i >= 4:
                forms.append(MovDwordAbs(va + i, bytes(blob[i:i + 4])))
                i += 4
        forms.extend(MovByteAbs(va + j, blob[j]) for j in range(i, len(blob)))
    forms.append(JmpRel32(exit_va))
    out = []
    addr = entry_va
    for form in forms:
        enc = encode(form, addr)
        out.append(StubInstruction(form, addr, enc))
        addr += len(enc)
    return StubProgram(tuple(out), entry_va, exit_va)


# Plans ----------------------------------------------------------------------

@dataclass(frozen=True)
class TransformAction:
    kind: str  # "Append" | "Disp" | "DataDisp"
    targets: tuple[tuple[int, int], ...] = ()
    filler: OcclusionPolicy = field(default_factory=Zero)
    payload: bytes | None = field(default=None, repr=False)
    batch_dwords: bool = True
    only_changed: bool = False

    def __post_init__(self):
        if self.kind not in ("Append", "Disp", "DataDisp"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        if self.kind == "Append" and not self.payload:
            raise ValueError("Append requires a payload")
        if self.kind == "Disp":
            if len(self.targets) != 1:
                raise ValueError("Disp takes exactly one target range")
            start, end = self.targets[0]
            if end - start < JMP_LEN:
                raise RangeTooSmall(f"Disp range of {end - start} bytes; need >= {JMP_LEN}")

    @property
    def target(self) -> tuple[int, int] | None:
        if not self.targets:
            return None
        return min(s for s, _ in self.targets), max(e for _, e in self.targets)


@dataclass(frozen=True)
class TransformPlan:
    action: TransformAction
    new_image: PeImage = field(repr=False)
    stub: StubProgram | None
    size_delta: int
    original_oep: int
    new_section: str | None = None

    def to_record(self) -> dict:
        target = self.action.target
        return {
            "kind": self.action.kind,
            "start": target[0] if target else None,
            "end": target[1] if target else None,
            "ranges": [list(r) for r in self.action.targets],
            "filler": self.action.filler.describe(),
            "new_section_name": self.new_section,
            "stub_entry_va": self.stub.entry_va if self.stub else None,
            "size_delta": self.size_delta,
            "payload_length": len(self.action.payload) if self.action.payload else 0,
        }


def fill_gap(data: bytes, rng: tuple[int, int], policy: OcclusionPolicy = Zero()) -> bytes:
    start, end = rng
    if not 0 <= start <= end <= len(data):
        raise OutOfBounds(f"range [{start:#x}, {end:#x}) outside {len(data)} bytes")
    if start == end:
        return bytes(data)
    return bytes(data[:start]) + policy.fill(start, end - start) + bytes(data[end:])


def next_section_name(image: PeImage) -> bytes:
    used = {s.name.rstrip(b"\x00") for s in image.sections}
    k = 0
    while SECTION_PREFIX + str(k).encode() in used:
        k += 1
    return SECTION_PREFIX + str(k).encode()


def plan_append(image: PeImage, payload: bytes) -> TransformPlan:
    if not payload:
        raise ValueError("payload must be nonempty")
    new = dataclasses.replace(image, trailing_data=image.trailing_data + bytes(payload))
    return TransformPlan(
        TransformAction("Append", payload=bytes(payload)), new, None, len(payload), image.address_of_entry_point,
    )


def _section_for_range(image: PeImage, start: int, end: int) -> int:
    """Index of the section whose mapped bytes contain ``[start, end)``."""
    for i, s in enumerate(image.sections):
        if s.raw_offset <= start and end <= s.raw_offset + s.mapped_span:
            return i
    raise Unmapped(f"range [{start:#x}, {end:#x}) is not inside one mapped section")


def _directory_file_ranges(image: PeImage) -> list[tuple[str, int, int]]:
    out = []
    for idx, (rva, size) in enumerate(image.data_directories):
        if not size or idx == 4:  # the security directory holds a file offset, not an RVA
            if idx == 4 and size:
                out.append((DIRECTORY_NAMES[idx], rva, rva + size))
            continue
        for s in image.sections:
            lo = max(rva, s.virtual_address)
            hi = min(rva + size, s.virtual_address + s.mapped_span)
            if lo < hi:
                out.append((DIRECTORY_NAMES[idx], s.raw_offset + lo - s.virtual_address,
                            s.raw_offset + hi - s.virtual_address))
    return out


def check_datadisp_range(image: PeImage, rng: tuple[int, int]) -> int:
    """Validate one DataDisp target; return its section index."""
    start, end = rng
    if start < len(image.header):
        raise StructuralRange(f"range [{start:#x}, {end:#x}) touches the headers")
    idx = _section_for_range(image, start, end)
    if image.sections[idx].label.lower() in (".edata", ".reloc"):
        raise StructuralRange(f"range lies in structural section {image.sections[idx].label}")
    for name, lo, hi in _directory_file_ranges(image):
        if start < hi and lo < end:
            raise StructuralRange(f"range [{start:#x}, {end:#x}) overlaps the {name} directory")
    return idx


def plan_disp(image: PeImage, rng: tuple[int, int], filler: OcclusionPolicy = Zero()) -> TransformPlan:
    """Move ``[start, end)`` (whole instructions, no inbound jumps) to a new section.

    The caller guarantees the range holds complete, position-independent
    instructions and that nothing jumps into its interior; this cannot be
    checked without a disassembler.
    """
    start, end = rng
    if end - start < JMP_LEN:
        raise RangeTooSmall(f"Disp range of {end - start} bytes; need >= {JMP_LEN}")
    if image.has_relocations:
        raise RelocationsPresent("image carries base relocations")
    idx = _section_for_range(image, start, end)
    section = image.sections[idx]
    if not section.is_executable:
        raise NotExecutableSection(f"section {section.label} is not executable")

    name = next_section_name(image)
    original = section.body[start - section.raw_offset:end - section.raw_offset]
    end_va = image.image_base + offset_to_rva(image, end - 1) + 1
    start_va = image.image_base + offset_to_rva(image, start)

    probe = append_section(image, name, original + bytes(JMP_LEN), DISP_CHARACTERISTICS)
    copy_va = probe.image_base + probe.sections[-1].virtual_address
    back = encode_jmp_rel32(copy_va + len(original), end_va)
    new = append_section(image, name, original + back, DISP_CHARACTERISTICS)

    body = bytearray(section.body)
    rel = start - section.raw_offset
    body[rel:rel + JMP_LEN] = encode_jmp_rel32(start_va, copy_va)
    tail = filler.fill(start + JMP_LEN, end - start - JMP_LEN)
    body[rel + JMP_LEN:rel + (end - start)] = tail
    new = replace_section(new, idx, body=bytes(body))

    return TransformPlan(
        TransformAction("Disp", ((start, end),), filler), new, None,
        len(serialize(new)) - len(serialize(image)), image.address_of_entry_point,
        name.decode(),
    )


def _normalize_ranges(ranges) -> list[tuple[int, int]]:
    if len(ranges) == 2 and all(isinstance(x, int) for x in ranges):
        ranges = [ranges]
    out = sorted((int(s), int(e)) for s, e in ranges)
    for (s0, e0), (s1, _) in zip(out, out[1:]):
        if s1 < e0:
            raise ValueError(f"DataDisp ranges overlap at {s1:#x}")
    return out


def plan_datadisp(
    image: PeImage,
    ranges,
    filler: OcclusionPolicy = Zero(),
    batch_dwords: bool = True,
    *,
    only_changed: bool = False,
) -> TransformPlan:
    """Occlude ``ranges`` and add a stub that restores them before the entry point.

    ``ranges`` is one ``(start, end)`` pair or a sequence of them. With
    ``only_changed`` the stub skips bytes the filler left identical.
    """
    rngs = [r for r in _normalize_ranges(ranges) if r[1] > r[0]]
    if image.has_relocations:
        raise RelocationsPresent("image carries base relocations")
    touched = {}
    for r in rngs:
        touched.setdefault(check_datadisp_range(image, r), []).append(r)

    new = image
    writes = []
    for idx, rs in touched.items():
        section = new.sections[idx]
        body = bytearray(section.body)
        for start, end in rs:
            rel = start - section.raw_offset
            old = bytes(body[rel:rel + end - start])
            fill = filler.fill(start, end - start)
            body[rel:rel + end - start] = fill
            base_va = image.image_base + section.virtual_address + rel
            if only_changed:
                writes.extend(_changed_runs(base_va, old, fill))
            else:
                writes.append((base_va, old))
        new = replace_section(
            new, idx, body=bytes(body), characteristics=section.characteristics | IMAGE_SCN_MEM_WRITE
        )

    name = next_section_name(image)
    exit_va = image.entry_va
    # The stub's length does not depend on where it lives, so lay it out once to learn the section VA.
    draft = emit_restore_stub(writes, 0, exit_va, batch_dwords)
    placed = append_section(new, name, draft.code, STUB_CHARACTERISTICS)
    entry_rva = placed.sections[-1].virtual_address
    stub = emit_restore_stub(writes, placed.image_base + entry_rva, exit_va, batch_dwords)
    placed = append_section(new, name, stub.code, STUB_CHARACTERISTICS)
    placed = set_entry_point(placed, entry_rva)

    return TransformPlan(
        TransformAction("DataDisp", tuple(rngs), filler, batch_dwords=batch_dwords, only_changed=only_changed),
        placed, stub,
        len(serialize(placed)) - len(serialize(image)), image.address_of_entry_point,
        name.decode(),
    )


def _changed_runs(base_va: int, old: bytes, new: bytes) -> list[tuple[int, bytes]]:
    runs = []
    i = 0
    n = len(old)
    while i < n:
        if old[i] == new[i]:
            i += 1
            continue
        j = i
        while j < n and old[j] != new[j]:
            j += 1
        runs.append((base_va + i, old[i:j]))
        i = j
    return runs


def apply_plans(image: PeImage, actions: Iterable[TransformAction]) -> list[TransformPlan]:
    """Apply actions in order, each on the previous plan's output."""
    plans = []
    for action in actions:
        if action.kind == "Append":
            plan = plan_append(image, action.payload)
        elif action.kind == "Disp":
            plan = plan_disp(image, action.targets[0], action.filler)
        else:
            plan = plan_datadisp(image, action.targets, action.filler, action.batch_dwords,
                                 only_changed=action.only_changed)
        plans.append(plan)
        image = plan.new_image
    return plans


# Plan logs ------------------------------------------------------------------

def policy_record(policy: OcclusionPolicy) -> dict:
    if isinstance(policy, Random):
        return {"policy": "random", "seed": policy.seed}
    if isinstance(policy, Adversarial):
        return {"policy": "adversarial", "pattern_hex": policy.pattern.hex()}
    return {"policy": "zero"}


def policy_from_record(doc: dict) -> OcclusionPolicy:
    kind = doc.get("policy", "zero")
    if kind == "random":
        return Random(int(doc["seed"]))
    if kind == "adversarial":
        return Adversarial(bytes.fromhex(doc["pattern_hex"]))
    if kind == "zero":
        return Zero()
    raise ValueError(f"unknown filler policy {kind!r}")


def action_record(action: TransformAction) -> dict:
    """Everything needed to re-plan ``action`` on the same input image."""
    return {
        "kind": action.kind,
        "ranges": [list(r) for r in action.targets],
        "filler": policy_record(action.filler),
        "payload_hex": action.payload.hex() if action.payload else None,
        "batch_dwords": action.batch_dwords,
        "only_changed": action.only_changed,
    }


def action_from_record(doc: dict) -> TransformAction:
    return TransformAction(
        doc["kind"],
        tuple((int(s), int(e)) for s, e in doc.get("ranges", ())),
        policy_from_record(doc.get("filler", {})),
        bytes.fromhex(doc["payload_hex"]) if doc.get("payload_hex") else None,
        batch_dwords=bool(doc.get("batch_dwords", True)),
        only_changed=bool(doc.get("only_changed", False)),
    )
