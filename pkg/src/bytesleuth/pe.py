"""PE32 parsing and bit-exact rewriting.

The model keeps every byte it does not understand: the header region is
stored verbatim (DOS stub, unparsed optional-header fields, section-table
slack), as are the gaps between section bodies and any overlay after the
last section. ``serialize(parse_pe(b)) == b`` therefore holds for every
well-formed input, including files with loader-tolerated quirks such as
``virtual_size > raw_size``.

Every edit returns a new :class:`PeImage`; instances are never mutated.
"""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BytesleuthError

DOS_HEADER_SIZE = 64
SECTION_HEADER_SIZE = 40
COFF_HEADER_SIZE = 20
PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

IMAGE_SCN_CNT_CODE = 0x00000020
IMAGE_SCN_CNT_INITIALIZED_DATA = 0x00000040
IMAGE_SCN_MEM_EXECUTE = 0x20000000
IMAGE_SCN_MEM_READ = 0x40000000
IMAGE_SCN_MEM_WRITE = 0x80000000

DIRECTORY_NAMES = (
    "export", "import", "resource", "exception", "security", "basereloc",
    "debug", "architecture", "globalptr", "tls", "load_config",
    "bound_import", "iat", "delay_import", "clr", "reserved",
)
BASERELOC_DIRECTORY = 5

# Offsets inside the PE32 optional header.
_OPT_ENTRY = 16
_OPT_IMAGE_BASE = 28
_OPT_SECTION_ALIGN = 32
_OPT_FILE_ALIGN = 36
_OPT_SIZE_OF_IMAGE = 56
_OPT_SIZE_OF_HEADERS = 60
_OPT_CHECKSUM = 64
_OPT_NUM_RVA = 92
_OPT_DIRECTORIES = 96


class PeError(BytesleuthError, ValueError):
    pass


class MissingMzMagic(PeError):
    pass


class MissingPeSignature(PeError):
    pass


class TruncatedHeader(PeError):
    pass


class OverlappingSections(PeError):
    pass


class NotPe32(PeError):
    pass


class InvariantViolation(PeError):
    pass


class SectionTableFull(PeError):
    pass


class RvaOutOfRange(PeError):
    pass


class Unmapped(PeError):
    pass


def align_up(value: int, alignment: int) -> int:
    if alignment <= 0:
        raise ValueError("alignment must be positive")
    return -(-value // alignment) * alignment


@dataclass(frozen=True)
class SectionRecord:
    name: bytes
    virtual_address: int
    virtual_size: int
    raw_offset: int
    raw_size: int
    characteristics: int
    body: bytes = field(repr=False)

    @property
    def label(self) -> str:
        return self.name.rstrip(b"\x00").decode("latin-1")

    @property
    def is_executable(self) -> bool:
        return bool(self.characteristics & (IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_CNT_CODE))

    @property
    def mapped_span(self) -> int:
        """Number of leading body bytes that the loader maps into memory."""
        if self.virtual_size == 0:
            return self.raw_size
        return min(self.raw_size, self.virtual_size)

    @property
    def virtual_extent(self) -> int:
        return self.virtual_size or self.raw_size


@dataclass(frozen=True)
class PeImage:
    """Parsed PE32 file.

    ``header`` holds the raw bytes from offset 0 up to the first section
    body; ``gaps`` holds ``(offset, bytes)`` for unclaimed space between
    section bodies; ``trailing_data`` is the overlay.
    """

    header: bytes = field(repr=False)
    e_lfanew: int
    machine: int
    characteristics: int
    image_base: int
    address_of_entry_point: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    checksum: int
    data_directories: tuple[tuple[int, int], ...]
    sections: tuple[SectionRecord, ...]
    gaps: tuple[tuple[int, bytes], ...] = field(default=(), repr=False)
    trailing_data: bytes = field(default=b"", repr=False)

    @property
    def dos_header(self) -> bytes:
        return self.header[:DOS_HEADER_SIZE]

    @property
    def number_of_sections(self) -> int:
        return len(self.sections)

    @property
    def optional_header_offset(self) -> int:
        return self.e_lfanew + 4 + COFF_HEADER_SIZE

    @property
    def section_table_offset(self) -> int:
        size_of_optional = struct.unpack_from("<H", self.header, self.e_lfanew + 4 + 16)[0]
        return self.optional_header_offset + size_of_optional

    @property
    def has_relocations(self) -> bool:
        if len(self.data_directories) <= BASERELOC_DIRECTORY:
            return False
        return self.data_directories[BASERELOC_DIRECTORY][1] > 0

    @property
    def entry_va(self) -> int:
        return self.image_base + self.address_of_entry_point

    @property
    def layout_end(self) -> int:
        """File offset just past the last section body (overlay starts here)."""
        ends = [s.raw_offset + s.raw_size for s in self.sections if s.raw_size]
        ends += [off + len(blob) for off, blob in self.gaps]
        return max(ends, default=len(self.header))

    def section_at_rva(self, rva: int) -> SectionRecord | None:
        for s in self.sections:
            if s.virtual_address <= rva < s.virtual_address + s.virtual_extent:
                return s
        return None

    def section_at_offset(self, offset: int) -> SectionRecord | None:
        for s in self.sections:
            if s.raw_size and s.raw_offset <= offset < s.raw_offset + s.raw_size:
                return s
        return None

    def section_index(self, section: SectionRecord) -> int:
        for i, s in enumerate(self.sections):
            if s is section:
                return i
        return self.sections.index(section)


def _u16(data: bytes, off: int) -> int:
    return struct.unpack_from("<H", data, off)[0]


def _u32(data: bytes, off: int) -> int:
    return struct.unpack_from("<I", data, off)[0]


def parse_pe(data: bytes) -> PeImage:
    """Parse a PE32 file into a :class:`PeImage`."""
    data = bytes(data)
    if len(data) < DOS_HEADER_SIZE:
        raise TruncatedHeader(f"file is {len(data)} bytes, shorter than a DOS header")
    if data[:2] != b"MZ":
        raise MissingMzMagic(f"expected 'MZ', found {data[:2]!r}")
    e_lfanew = _u32(data, 0x3C)
    if e_lfanew + 4 + COFF_HEADER_SIZE > len(data):
        raise TruncatedHeader("COFF header extends past end of file")
    if data[e_lfanew:e_lfanew + 4] != b"PE\x00\x00":
        raise MissingPeSignature(f"no PE signature at e_lfanew={e_lfanew:#x}")

    coff = e_lfanew + 4
    machine = _u16(data, coff)
    nsections = _u16(data, coff + 2)
    size_of_optional = _u16(data, coff + 16)
    characteristics = _u16(data, coff + 18)

    opt = coff + COFF_HEADER_SIZE
    if opt + 2 > len(data):
        raise TruncatedHeader("optional header missing")
    magic = _u16(data, opt)
    if magic == PE32PLUS_MAGIC:
        raise NotPe32("PE32+ images are not supported")
    if magic != PE32_MAGIC:
        raise NotPe32(f"unknown optional header magic {magic:#x}")
    if size_of_optional < _OPT_DIRECTORIES or opt + size_of_optional > len(data):
        raise TruncatedHeader("optional header truncated")

    num_rva = min(_u32(data, opt + _OPT_NUM_RVA), (size_of_optional - _OPT_DIRECTORIES) // 8)
    directories = tuple(
        struct.unpack_from("<II", data, opt + _OPT_DIRECTORIES + 8 * i) for i in range(num_rva)
    )

    table = opt + size_of_optional
    table_end = table + SECTION_HEADER_SIZE * nsections
    if table_end > len(data):
        raise TruncatedHeader("section table extends past end of file")

    raw_entries = []
    for i in range(nsections):
        off = table + SECTION_HEADER_SIZE * i
        name = data[off:off + 8]
        vsize, va, raw_size, raw_off = struct.unpack_from("<IIII", data, off + 8)
        chars = _u32(data, off + 36)
        raw_entries.append((name, va, vsize, raw_off, raw_size, chars))

    occupied = sorted((e[3], e[3] + e[4]) for e in raw_entries if e[4])
    header_end = occupied[0][0] if occupied else len(data)
    if header_end < table_end:
        raise OverlappingSections("section data overlaps the section table")
    for (s0, e0), (s1, _) in zip(occupied, occupied[1:]):
        if s1 < e0:
            raise OverlappingSections(f"raw ranges overlap at {s1:#x}")
    if occupied and occupied[-1][1] > len(data):
        raise TruncatedHeader("section data extends past end of file")

    sections = tuple(
        SectionRecord(
            name=name, virtual_address=va, virtual_size=vsize, raw_offset=raw_off,
            raw_size=raw_size, characteristics=chars,
            body=data[raw_off:raw_off + raw_size] if raw_size else b"",
        )
        for name, va, vsize, raw_off, raw_size, chars in raw_entries
    )

    gaps = []
    cursor = header_end
    for start, end in occupied:
        if start > cursor:
            gaps.append((cursor, data[cursor:start]))
        cursor = max(cursor, end)
    layout_end = cursor

    return PeImage(
        header=data[:header_end],
        e_lfanew=e_lfanew,
        machine=machine,
        characteristics=characteristics,
        image_base=_u32(data, opt + _OPT_IMAGE_BASE),
        address_of_entry_point=_u32(data, opt + _OPT_ENTRY),
        section_alignment=_u32(data, opt + _OPT_SECTION_ALIGN),
        file_alignment=_u32(data, opt + _OPT_FILE_ALIGN),
        size_of_image=_u32(data, opt + _OPT_SIZE_OF_IMAGE),
        size_of_headers=_u32(data, opt + _OPT_SIZE_OF_HEADERS),
        checksum=_u32(data, opt + _OPT_CHECKSUM),
        data_directories=directories,
        sections=sections,
        gaps=tuple(gaps),
        trailing_data=data[layout_end:],
    )


def _section_entry(s: SectionRecord) -> tuple[bytes, bytes]:
    """Return the (first 24, last 4) bytes of a section header entry."""
    head = s.name.ljust(8, b"\x00")[:8] + struct.pack(
        "<IIII", s.virtual_size, s.virtual_address, s.raw_size, s.raw_offset
    )
    return head, struct.pack("<I", s.characteristics)


def _encode_header(image: PeImage) -> bytes:
    """Patch every modelled field back into the stored header bytes."""
    out = bytearray(image.header)
    table = image.section_table_offset
    if table + SECTION_HEADER_SIZE * len(image.sections) > len(out):
        raise InvariantViolation("section table does not fit in the header region")
    coff = image.e_lfanew + 4
    opt = image.optional_header_offset
    struct.pack_into("<H", out, coff + 2, len(image.sections))
    struct.pack_into("<I", out, opt + _OPT_ENTRY, image.address_of_entry_point)
    struct.pack_into("<I", out, opt + _OPT_SIZE_OF_IMAGE, image.size_of_image)
    struct.pack_into("<I", out, opt + _OPT_CHECKSUM, image.checksum)
    for i, s in enumerate(image.sections):
        off = table + SECTION_HEADER_SIZE * i
        head, tail = _section_entry(s)
        out[off:off + 24] = head
        out[off + 36:off + 40] = tail
    return bytes(out)


def check_invariants(image: PeImage) -> None:
    if image.header[:2] != b"MZ":
        raise InvariantViolation("header lost its MZ magic")
    for s in image.sections:
        if s.raw_size != len(s.body):
            raise InvariantViolation(
                f"section {s.label!r}: raw_size {s.raw_size:#x} != body length {len(s.body):#x}"
            )
    spans = sorted(
        [(s.raw_offset, s.raw_offset + s.raw_size) for s in image.sections if s.raw_size]
        + [(off, off + len(blob)) for off, blob in image.gaps if blob]
    )
    if spans and spans[0][0] < len(image.header):
        raise InvariantViolation("section data overlaps the header region")
    for (s0, e0), (s1, _) in zip(spans, spans[1:]):
        if s1 < e0:
            raise InvariantViolation(f"raw ranges overlap at {s1:#x}")


def serialize(image: PeImage) -> bytes:
    """Encode ``image`` back to bytes."""
    check_invariants(image)
    header = _encode_header(image)
    end = image.layout_end
    out = bytearray(end)
    out[:len(header)] = header
    for off, blob in image.gaps:
        out[off:off + len(blob)] = blob
    for s in image.sections:
        if s.raw_size:
            out[s.raw_offset:s.raw_offset + s.raw_size] = s.body
    out += image.trailing_data
    return bytes(out)


def _with_header(image: PeImage, **changes) -> PeImage:
    updated = dataclasses.replace(image, **changes)
    return dataclasses.replace(updated, header=_encode_header(updated))


def replace_section(image: PeImage, index: int, **changes) -> PeImage:
    """Return ``image`` with section ``index`` updated (body/characteristics)."""
    sections = list(image.sections)
    sections[index] = dataclasses.replace(sections[index], **changes)
    return _with_header(image, sections=tuple(sections))


def append_section(image: PeImage, name: bytes, body: bytes, characteristics: int) -> PeImage:
    """Add a section after the last one; any overlay moves behind it.

    The new header entry is written into slack between the section table
    and the first section body, so no existing offset changes.
    """
    if isinstance(name, str):
        name = name.encode("latin-1")
    if not name or len(name) > 8:
        raise ValueError("section name must be 1..8 bytes")
    if not body:
        raise ValueError("section body must be nonempty")
    entry = image.section_table_offset + SECTION_HEADER_SIZE * len(image.sections)
    if entry + SECTION_HEADER_SIZE > len(image.header):
        raise SectionTableFull(
            f"no header slack for section #{len(image.sections) + 1} "
            f"(table entry would end at {entry + SECTION_HEADER_SIZE:#x}, "
            f"first section body at {len(image.header):#x})"
        )
    if any(image.header[entry:entry + SECTION_HEADER_SIZE]):
        raise SectionTableFull("header slack after the section table is not empty")

    old_end = image.layout_end
    raw_offset = align_up(old_end, image.file_alignment)
    raw_size = align_up(len(body), image.file_alignment)
    virtual_end = max(
        (s.virtual_address + s.virtual_extent for s in image.sections),
        default=align_up(image.size_of_headers, image.section_alignment),
    )
    va = align_up(virtual_end, image.section_alignment)
    new = SectionRecord(
        name=name.ljust(8, b"\x00"),
        virtual_address=va,
        virtual_size=len(body),
        raw_offset=raw_offset,
        raw_size=raw_size,
        characteristics=characteristics,
        body=bytes(body) + bytes(raw_size - len(body)),
    )
    gaps = image.gaps
    if raw_offset > old_end:
        gaps = gaps + ((old_end, bytes(raw_offset - old_end)),)
    return _with_header(
        image,
        sections=image.sections + (new,),
        gaps=gaps,
        size_of_image=va + align_up(len(body), image.section_alignment),
        checksum=0,
    )


def set_entry_point(image: PeImage, rva: int) -> PeImage:
    """Redirect the entry point; only the 4-byte field changes on disk."""
    if image.section_at_rva(rva) is None:
        raise RvaOutOfRange(f"rva {rva:#x} is not inside any section")
    if rva == image.address_of_entry_point:
        return image
    return _with_header(image, address_of_entry_point=rva)


def rva_to_offset(image: PeImage, rva: int) -> int:
    for s in image.sections:
        if s.virtual_address <= rva < s.virtual_address + s.mapped_span:
            return s.raw_offset + (rva - s.virtual_address)
    raise Unmapped(f"rva {rva:#x} has no file backing")


def offset_to_rva(image: PeImage, offset: int) -> int:
    for s in image.sections:
        if s.raw_offset <= offset < s.raw_offset + s.mapped_span:
            return s.virtual_address + (offset - s.raw_offset)
    raise Unmapped(f"file offset {offset:#x} is not mapped by any section")


_DOS_STUB = bytes.fromhex(
    "0e1fba0e00b409cd21b8014ccd21546869732070726f6772616d2063616e6e6f"
    "742062652072756e20696e20444f53206d6f64652e0d0d0a2400000000000000"
)
_CODE_ALPHABET = np.frombuffer(
    bytes.fromhex("5589e583ec8b458b4d8b55ff7508e8c3c9e90f85740431c0"), dtype=np.uint8
)
_STRINGS = (
    b"fail", b"success", b"kernel32.dll", b"GetProcAddress", b"LoadLibraryA",
    b"%s\\%s", b"Software\\Microsoft", b"config.ini", b"error %d", b"http://",
)


def _code_body(rng: np.random.Generator, length: int) -> bytes:
    body = rng.choice(_CODE_ALPHABET, size=length).astype(np.uint8)
    return body.tobytes()


def _sparse_body(rng: np.random.Generator, length: int, stride: int) -> bytes:
    body = bytearray(length)
    for base in range(0, length, stride):
        s = _STRINGS[int(rng.integers(len(_STRINGS)))] + int(rng.integers(256)).to_bytes(1, "little")
        pos = base + int(rng.integers(0, max(1, min(stride, length - base) - len(s))))
        if pos + len(s) <= length:
            body[pos:pos + len(s)] = s
    return bytes(body)


def make_minimal_pe(
    seed: int,
    *,
    file_alignment: int = 0x200,
    section_alignment: int = 0x1000,
    section_units: tuple[int, int, int] = (2, 3, 1),
    header_slack_entries: int = 24,
    image_base: int = 0x400000,
    data_stride: int = 0x100,
) -> bytes:
    """Deterministic PE32 test fixture with ``.text``, ``.data`` and ``.rsrc``.

    ``section_units`` gives raw sizes in multiples of ``file_alignment``;
    the defaults produce 0x400/0x600/0x200 byte bodies. ``.data`` reserves
    one extra ``section_alignment`` in memory, zero-filled at load time.
    Data and resource bodies are sparse: one short string per
    ``data_stride`` bytes, zeros elsewhere.
    """
    if section_alignment < file_alignment:
        raise ValueError("section_alignment must be >= file_alignment")
    rng = np.random.default_rng(seed)

    table_off = 0x80 + 4 + COFF_HEADER_SIZE + 0xE0
    header_size = align_up(table_off + SECTION_HEADER_SIZE * (3 + header_slack_entries), file_alignment)

    names = (b".text", b".data", b".rsrc")
    chars = (
        IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ,
        IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ | IMAGE_SCN_MEM_WRITE,
        IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ,
    )
    sizes = [u * file_alignment for u in section_units]
    bodies = [
        _code_body(rng, sizes[0]),
        _sparse_body(rng, sizes[1], data_stride),
        _sparse_body(rng, sizes[2], data_stride),
    ]
    vsizes = [max(1, sizes[0] - int(rng.integers(0, 16))), sizes[1] + section_alignment, sizes[2]]

    entries = []
    raw = header_size
    va = align_up(header_size, section_alignment)
    for name, size, vsize, ch in zip(names, sizes, vsizes, chars):
        entries.append((name, vsize, va, size, raw, ch))
        raw += size
        va = align_up(va + vsize, section_alignment)
    size_of_image = va
    entry_rva = entries[0][2] + int(rng.integers(0, max(1, vsizes[0] // 2)))

    head = bytearray(header_size)
    head[0:2] = b"MZ"
    struct.pack_into("<HHHHHHHHH", head, 2, 0x90, 3, 0, 4, 0, 0xFFFF, 0, 0xB8, 0)
    struct.pack_into("<H", head, 0x18, 0x40)
    struct.pack_into("<I", head, 0x3C, 0x80)
    head[0x40:0x40 + len(_DOS_STUB)] = _DOS_STUB
    head[0x80:0x84] = b"PE\x00\x00"
    struct.pack_into(
        "<HHIIIHH", head, 0x84, 0x14C, 3, 0x5F000000 + seed % 0x1000000, 0, 0, 0xE0, 0x0102
    )
    opt = 0x98
    struct.pack_into(
        "<HBBIIIIII", head, opt, PE32_MAGIC, 14, 0,
        sizes[0], sizes[1] + sizes[2], 0, entry_rva, entries[0][2], entries[1][2],
    )
    struct.pack_into(
        "<IIIHHHHHHIIIIHHIIIIII", head, opt + _OPT_IMAGE_BASE,
        image_base, section_alignment, file_alignment,
        6, 0, 0, 0, 6, 0, 0,
        size_of_image, header_size, 0, 3, 0x8100,
        0x100000, 0x1000, 0x100000, 0x1000, 0, 16,
    )
    for i, (name, vsize, sva, size, roff, ch) in enumerate(entries):
        off = table_off + SECTION_HEADER_SIZE * i
        head[off:off + 8] = name.ljust(8, b"\x00")
        struct.pack_into("<IIII", head, off + 8, vsize, sva, size, roff)
        struct.pack_into("<I", head, off + 36, ch)
    return bytes(head) + b"".join(bodies)
