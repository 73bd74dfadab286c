"""Build a small PE32 file, inspect it, and cut it into superpixels."""
from bytesleuth.pe import make_minimal_pe, parse_pe, rva_to_offset, serialize
from bytesleuth.segmentation import segment_by_offset, segment_by_sections

blob = make_minimal_pe(0)
image = parse_pe(blob)

print(f"{len(blob)} bytes, image base {image.image_base:#x}, entry rva {image.address_of_entry_point:#x}")
for s in image.sections:
    print(f"  {s.label:6} va={s.virtual_address:#07x} raw=[{s.raw_offset:#06x}, {s.raw_offset + s.raw_size:#06x})"
          f" exec={s.is_executable}")

# parse and serialize are exact inverses
assert serialize(image) == blob

# an RVA inside .text maps back to its file offset
print("rva 0x1010 ->", hex(rva_to_offset(image, 0x1010)))

# two ways to segment: fixed-size chunks over the file, or chunks per section
flat = segment_by_offset(len(blob), 0x400)
per_section = segment_by_sections(image, 0x400)
print(len(flat), "offset pixels;", len(per_section), "section pixels:",
      [(hex(p.start), p.label) for p in per_section])
