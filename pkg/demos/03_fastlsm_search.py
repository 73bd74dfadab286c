"""Find a 16-byte signature in 1 MiB with a few dozen queries."""
import time

from bytesleuth.detector import DetectorHandle, PlantedSignatureDetector
from bytesleuth.fastlsm import FastLsmConfig, brute_force_hot_region, fast_lsm
from bytesleuth.synthetic import planted_blob

sig = bytes.fromhex("4d616c6963696f75735f42797465735f")
at = 0x9A3F0
data = planted_blob(1 << 20, sig, at, seed=1)
detector = DetectorHandle(PlantedSignatureDetector(((sig, 0.6),), 0.2))

t0 = time.perf_counter()
region = fast_lsm(data, detector, FastLsmConfig(n=2, beta=1024))
print(f"region [{region.start:#x}, {region.end:#x}) drop={region.drop:.2f} in {time.perf_counter() - t0:.2f}s")
print(f"queries: {region.lsm_queries} for the level-0 surrogate + {region.refinement_queries} refinements")
for depth, (s, e, score) in enumerate(region.levels, 1):
    print(f"  level {depth}: [{s:#x}, {e:#x}) score after occlusion {score:.2f}")

# the exhaustive scan agrees but needs one query per 1 KiB block
oracle = brute_force_hot_region(data, DetectorHandle(detector.scorer), 1024)
print(f"brute force: [{oracle.start:#x}, {oracle.end:#x}) with {oracle.queries_used} queries")
