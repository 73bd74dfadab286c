import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bytesleuth.errors import EmptyInput, LengthMismatch, OutOfBounds
from bytesleuth.segmentation import (
    Adversarial,
    OverlappingBlocks,
    Random,
    Superpixel,
    SuperpixelMap,
    Zero,
    bits,
    load_listing,
    mask_to_bytes,
    merge_maps,
    segment_by_offset,
    segment_by_sections,
    segment_from_listing,
)

policies = st.one_of(
    st.just(Zero()),
    st.builds(Random, st.integers(0, 2**31)),
    st.builds(Adversarial, st.binary(min_size=1, max_size=8)),
)


def test_offset_ten_parts():
    m = segment_by_offset(204800, 20480)
    assert len(m) == 10
    assert all(p.length == 20480 for p in m)


def test_offset_single_and_remainder():
    assert [p.length for p in segment_by_offset(1000, 1024)] == [1000]
    assert [p.length for p in segment_by_offset(1025, 1024)] == [1024, 1]


def test_offset_empty_file():
    with pytest.raises(EmptyInput):
        segment_by_offset(0, 1024)


@given(st.integers(1, 100_000), st.integers(1, 5000))
def test_offset_lengths_sum(n, chunk):
    m = segment_by_offset(n, chunk)
    assert sum(p.length for p in m) == n
    assert m.pixels[0].start == 0 and m.pixels[-1].end == n


def test_sections_chunking(image):
    m = segment_by_sections(image, 0x400)
    assert len(m) == 1 + 2 + 1
    for p in m:
        sec = image.section_at_offset(p.start)
        assert p.label == sec.label


def test_sections_cover_raw_ranges(image):
    m = segment_by_sections(image, 0x100)
    covered = set()
    for p in m:
        covered.update(range(p.start, p.end))
    expected = set()
    for s in image.sections:
        expected.update(range(s.raw_offset, s.raw_offset + s.raw_size))
    assert covered == expected
    assert min(covered) >= len(image.header)


def test_listing_example_blocks():
    listing = [{"start": 0x10004675, "length": 0x25}, {"start": 0x1000469A, "length": 0x07},
               {"start": 0x100046A1, "length": 0x08}]
    m = segment_from_listing(listing, 0x10004800)
    assert m.ranges() == [(0x10004675, 0x1000469A), (0x1000469A, 0x100046A1), (0x100046A1, 0x100046A9)]


def test_listing_empty():
    assert len(segment_from_listing([], 100)) == 0


def test_listing_overlap_and_bounds():
    with pytest.raises(OverlappingBlocks):
        segment_from_listing([(0, 4), (3, 2)], 100)
    with pytest.raises(OutOfBounds):
        segment_from_listing([(98, 4)], 100)


def test_load_listing(tmp_path):
    path = tmp_path / "blocks.json"
    path.write_text(json.dumps({"blocks": [{"start": 4, "length": 2}]}))
    assert segment_from_listing(load_listing(path), 10).ranges() == [(4, 6)]


def test_two_byte_mask_rows():
    m = SuperpixelMap((Superpixel(0, 1), Superpixel(1, 1)), 2)
    src = b"\x11\x22"
    assert mask_to_bytes(src, m, bits("01")) == b"\x00\x22"
    assert mask_to_bytes(src, m, bits("10")) == b"\x11\x00"
    assert mask_to_bytes(src, m, bits("00")) == b"\x00\x00"
    assert mask_to_bytes(src, m, bits("11")) == src


def test_mask_keeps_unmapped_bytes():
    m = SuperpixelMap((Superpixel(2, 3),), 8)
    out = mask_to_bytes(b"ABCDEFGH", m, bits("0"))
    assert out == b"AB\x00\x00\x00FGH"


def test_mask_length_mismatch():
    m = segment_by_offset(8, 4)
    with pytest.raises(LengthMismatch):
        mask_to_bytes(bytes(8), m, bits("1"))
    with pytest.raises(LengthMismatch):
        mask_to_bytes(bytes(9), m, bits("11"))


@given(st.binary(min_size=1, max_size=400), st.integers(1, 64), policies, st.data())
def test_mask_properties(data, chunk, policy, draw):
    m = segment_by_offset(len(data), chunk)
    assert mask_to_bytes(data, m, np.ones(len(m), dtype=np.uint8), policy) == data
    v = np.array(draw.draw(st.lists(st.integers(0, 1), min_size=len(m), max_size=len(m))), dtype=np.uint8)
    out = mask_to_bytes(data, m, v, policy)
    assert len(out) == len(data)
    assert out == mask_to_bytes(data, m, v, policy)
    for p, bit in zip(m, v):
        if bit:
            assert out[p.start:p.end] == data[p.start:p.end]


def test_adversarial_repetition():
    assert Adversarial(b"AB").fill(10, 5) == b"ABABA"


def test_random_is_seeded():
    assert Random(3).fill(100, 16) == Random(3).fill(100, 16)
    assert Random(3).fill(100, 16) != Random(4).fill(100, 16)


def test_map_validation():
    with pytest.raises(OverlappingBlocks):
        SuperpixelMap((Superpixel(0, 4), Superpixel(2, 4)), 10)
    with pytest.raises(OutOfBounds):
        SuperpixelMap((Superpixel(8, 4),), 10)


def test_merge_and_containing(image):
    a = segment_by_sections(image, 0x200, sections=[0])
    b = segment_by_sections(image, 0x200, sections=[1, 2])
    merged = merge_maps(a, b)
    assert merged.ranges() == segment_by_sections(image, 0x200).ranges()
    assert merged.containing(image.sections[1].raw_offset + 5) == len(a)
    assert merged.containing(3) is None
