import dataclasses

import pytest
from hypothesis import given, strategies as st

from bytesleuth.pe import IMAGE_SCN_MEM_EXECUTE, append_section, make_minimal_pe, parse_pe, replace_section, serialize, set_entry_point
from bytesleuth.segmentation import Random, Zero
from bytesleuth.transform import TransformAction, apply_plans, plan_append, plan_datadisp, plan_disp
from bytesleuth.verifier import (
    MemoryMap,
    OverlapFault,
    ReadFault,
    Region,
    StepLimitExceeded,
    UnknownOpcode,
    WriteFault,
    build_memory_map,
    interpret_stub,
    verify_chain,
    verify_preservation,
)

from conftest import FAIL_VA


def _with_stub(img, code):
    grown = append_section(img, b".hand", code, IMAGE_SCN_MEM_EXECUTE)
    return set_entry_point(grown, grown.sections[-1].virtual_address)


def test_memory_map_zero_fill(image):
    img = replace_section(image, 2, virtual_size=0x1000)
    rsrc = img.sections[2]
    assert rsrc.raw_size == 0x200
    mem = build_memory_map(img)
    va = img.image_base + rsrc.virtual_address
    assert mem.read(va, 0x200) == rsrc.body
    assert mem.read(va + 0x200, 0xE00) == bytes(0xE00)
    with pytest.raises(ReadFault):
        mem.read(va + 0xFFF, 2)


def test_memory_map_headers_and_fault(image, fixture_bytes):
    mem = build_memory_map(image)
    assert mem.read(image.image_base, 2) == b"MZ"
    assert mem.read(image.image_base, 0x40) == fixture_bytes[:0x40]
    with pytest.raises(ReadFault):
        mem.read(image.image_base + 0x100000, 1)
    with pytest.raises(WriteFault):
        mem.write(image.image_base, b"X")


def test_memory_map_overlap():
    with pytest.raises(OverlapFault):
        MemoryMap(0, [Region(0, bytearray(8), "a"), Region(4, bytearray(8), "b")])


def test_hand_assembled_stub(image):
    """A stub written out by hand, not by the emitter, restoring 16 bytes."""
    base = image.image_base
    data_va = base + image.sections[1].virtual_address + 0x40
    oep = image.entry_va
    target = bytes(range(0x30, 0x40))
    body = bytearray(image.sections[1].body)
    body[0x40:0x50] = target
    image = replace_section(image, 1, body=bytes(body))
    body[0x40:0x50] = bytes(16)
    img = replace_section(image, 1, body=bytes(body))
    stub_va = base + 0x5000
    code = b"".join([
        b"\xC7\x05" + data_va.to_bytes(4, "little") + b"\x30\x31\x32\x33",
        b"\xC7\x05" + (data_va + 4).to_bytes(4, "little") + b"\x34\x35\x36\x37",
        b"\xC7\x05" + (data_va + 8).to_bytes(4, "little") + b"\x38\x39\x3a\x3b",
        b"\xC6\x05" + (data_va + 12).to_bytes(4, "little") + b"\x3c",
        b"\xC6\x05" + (data_va + 13).to_bytes(4, "little") + b"\x3d",
        b"\xC6\x05" + (data_va + 14).to_bytes(4, "little") + b"\x3e",
        b"\xC6\x05" + (data_va + 15).to_bytes(4, "little") + b"\x3f",
    ])
    rel = oep - (stub_va + len(code) + 5)
    code += b"\xE9" + rel.to_bytes(4, "little", signed=True)
    stubbed = _with_stub(img, code)
    assert stubbed.entry_va == stub_va

    mem = build_memory_map(stubbed, protect=[".hand"])
    run = interpret_stub(mem, stub_va)
    assert run.exit_va == oep
    assert run.steps == 8
    assert mem.read(data_va, 16) == target

    plan = dataclasses.make_dataclass("P", ["action"])(TransformAction("DataDisp", ((0, 16),)))
    rep = verify_preservation(image, stubbed, plan)
    assert rep.reconstructed_ok, rep


def test_single_jump_zero_writes(image):
    img = _with_stub(image, b"\xE9" + (image.entry_va - (image.image_base + 0x5000 + 5)).to_bytes(4, "little", signed=True))
    run = interpret_stub(build_memory_map(img), img.entry_va)
    assert run.writes == [] and run.exit_va == image.entry_va


def test_nop_is_unknown(image):
    img = _with_stub(image, b"\x90" * 8)
    with pytest.raises(UnknownOpcode):
        interpret_stub(build_memory_map(img), img.entry_va)


def test_step_limit(image):
    # jmp $ loops forever inside the stub
    img = _with_stub(image, b"\xE9\xFB\xFF\xFF\xFF")
    with pytest.raises(StepLimitExceeded):
        interpret_stub(build_memory_map(img), img.entry_va, max_steps=50)


def test_write_to_protected_stub_faults(image):
    va = image.image_base + 0x5000
    img = _with_stub(image, b"\xC6\x05" + va.to_bytes(4, "little") + b"\x00")
    with pytest.raises(WriteFault):
        interpret_stub(build_memory_map(img, protect=[".hand"]), img.entry_va)

    headers = _with_stub(image, b"\xC6\x05" + image.image_base.to_bytes(4, "little") + b"\x00")
    with pytest.raises(WriteFault):
        interpret_stub(build_memory_map(headers), headers.entry_va)

    unmapped = _with_stub(image, b"\xC6\x05" + (0x7FFF0000).to_bytes(4, "little") + b"\x00")
    with pytest.raises(WriteFault):
        interpret_stub(build_memory_map(unmapped), unmapped.entry_va)


def test_fail_stub_writes_four_bytes(fail_case):
    img, off = fail_case
    plan = plan_datadisp(img, (off, off + 4), Zero())
    mem = build_memory_map(plan.new_image)
    run = interpret_stub(mem, plan.new_image.entry_va)
    assert sum(len(b) for _, b in run.writes) == 4
    assert run.writes[0][0] == FAIL_VA


def test_corrupted_stub_fails(fail_case):
    img, off = fail_case
    plan = plan_datadisp(img, (off, off + 4), Zero())
    stub = plan.new_image.sections[-1]
    for pos, value in ((9, 0x00), (0, 0x90)):
        body = bytearray(stub.body)
        body[pos] = value
        bad = replace_section(plan.new_image, len(plan.new_image.sections) - 1, body=bytes(body))
        rep = verify_preservation(img, bad, plan)
        assert not rep.reconstructed_ok
        assert rep.mismatches or "UnknownOpcode" in (rep.error or "")


def test_append_report(image):
    plan = plan_append(image, b"\x00" * 10)
    assert verify_preservation(image, plan.new_image, plan).reconstructed_ok


def test_disp_report_detects_tamper(image):
    s = image.sections[0].raw_offset + 0x10
    plan = plan_disp(image, (s, s + 12))
    assert verify_preservation(image, plan.new_image, plan).reconstructed_ok
    copy = plan.new_image.sections[-1]
    body = bytearray(copy.body)
    body[0] ^= 0xFF
    bad = replace_section(plan.new_image, len(plan.new_image.sections) - 1, body=bytes(body))
    assert not verify_preservation(image, bad, plan).reconstructed_ok


@given(st.integers(0, 500), st.lists(st.tuples(st.integers(0, 2), st.integers(0, 0x3F0), st.integers(0, 64)),
                                     min_size=1, max_size=4))
def test_every_plan_verifies(seed, specs):
    img = parse_pe(make_minimal_pe(seed))
    actions = []
    for idx, rel, length in specs:
        sec = img.sections[idx]
        s = sec.raw_offset + min(rel, sec.mapped_span - 1)
        e = min(s + length, sec.raw_offset + sec.mapped_span)
        actions.append(TransformAction("DataDisp", ((s, e),), Random(seed)))
    plans = apply_plans(img, actions)
    rep = verify_chain(img, plans)
    assert rep.reconstructed_ok, rep
    assert rep.exit_va == img.entry_va


def test_chain_with_append_and_disp(image):
    s = image.sections[0].raw_offset + 0x40
    d = image.sections[1].raw_offset
    plans = apply_plans(image, [
        TransformAction("DataDisp", ((d, d + 40),)),
        TransformAction("Append", payload=b"tail"),
        TransformAction("Disp", ((s, s + 9),)),
    ])
    assert verify_chain(image, plans).reconstructed_ok
    assert serialize(plans[-1].new_image).endswith(b"tail")


def test_report_record(fail_case):
    img, off = fail_case
    plan = plan_datadisp(img, (off, off + 4), Zero())
    rec = verify_preservation(img, plan.new_image, plan).to_record()
    assert rec["ok"] and rec["exit_va"] == img.entry_va and rec["mismatch_count"] == 0
