"""Explain a detector whose behaviour is known exactly.

The synthetic case hides one malicious 16-byte signature and ten benign
patterns in the data sections. The surrogate should put its largest
positive weight on the pixel holding the signature and negative weights on
pixels holding benign patterns.
"""
import numpy as np

from bytesleuth.detector import DetectorHandle
from bytesleuth.explain import explain_instance, mine_adversarial_data, section_weight_summary, weight_histogram
from bytesleuth.pe import parse_pe
from bytesleuth.segmentation import segment_by_sections
from bytesleuth.synthetic import make_case

case = make_case(4)
image = parse_pe(case.data)
smap = segment_by_sections(image, 1024)
detector = DetectorHandle(case.detector)

print(f"score {detector.score(case.data):.3f} over {len(smap)} pixels")
expl = explain_instance(case.data, smap, detector, seed=0)
print("queries used:", detector.query_counter)

top = int(np.argmax(expl.weights))
start, end = case.signature_range
print(f"top pixel {top} covers [{smap[top].start:#x}, {smap[top].end:#x}); signature at [{start:#x}, {end:#x})")

print("strongest weights:", [(i, round(w, 4)) for i, w in expl.top(5)])
print("weight histogram:", [round(x, 3) for x in weight_histogram(expl)])
print("weight per section:", {k: round(v, 4) for k, v in section_weight_summary(expl, smap).items()})

# pixels with strongly negative weight carry bytes the detector reads as benign
mined = mine_adversarial_data([(expl, smap, case.data)], 0.02)
print(len(mined), "benign-leaning pixels mined")
