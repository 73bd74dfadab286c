"""Hide a string with DataDisp and prove the binary still restores it.

The string "fail" sits in .data. DataDisp zeroes it in the file and adds a
new section holding a tiny stub that writes the bytes back, then jumps to
the original entry point. The verifier interprets that stub over a memory
image of the new file.
"""
from bytesleuth.pe import make_minimal_pe, parse_pe, replace_section, serialize
from bytesleuth.segmentation import Zero
from bytesleuth.transform import plan_datadisp, plan_disp
from bytesleuth.verifier import build_memory_map, interpret_stub, verify_preservation

image = parse_pe(make_minimal_pe(7, section_units=(2, 8, 1)))
data = image.sections[1]
body = bytearray(data.body)
body[0xA4E:0xA52] = b"fail"
image = replace_section(image, 1, body=bytes(body))
offset = data.raw_offset + 0xA4E
va = image.image_base + data.virtual_address + 0xA4E

plan = plan_datadisp(image, (offset, offset + 4), Zero())
out = serialize(plan.new_image)
print(f"bytes at {va:#x} in the new file: {out[offset:offset + 4].hex()}")
print(f"new section {plan.new_section}, entry moved to {plan.new_image.entry_va:#x}, +{plan.size_delta} bytes")
for ins in plan.stub.instructions:
    print(f"  {ins.address:#x}: {ins.encoded.hex(' ')}  {ins.form}")

mem = build_memory_map(plan.new_image)
run = interpret_stub(mem, plan.new_image.entry_va)
print("after the stub runs:", mem.read(va, 4), "then jump to", hex(run.exit_va))
print("verifier:", verify_preservation(image, plan.new_image, plan).to_record())

# code is moved instead: the range start becomes a jump to a copy in a new section
text = image.sections[0]
disp = plan_disp(image, (text.raw_offset + 0x40, text.raw_offset + 0x50))
print("Disp check:", verify_preservation(image, disp.new_image, disp).reconstructed_ok)
