"""Black-box explanation and evasion analysis for raw-byte malware detectors."""
from .attack import (
    AttackConfig,
    AttackRound,
    AttackTrace,
    NoPositiveWeights,
    UnsupportedBinary,
    compare_strategies,
    run_attack,
    run_random_baseline,
    select_perturbation,
)
from .detector import DetectorHandle, NgramModel, PlantedSignatureDetector, remote_detector, train_ngram
from .explain import KernelConfig, LinearExplanation, explain_instance, fit_local_linear
from .fastlsm import FastLsmConfig, HotRegion, fast_lsm
from .pe import PeImage, SectionRecord, make_minimal_pe, parse_pe, serialize
from .segmentation import (
    Adversarial,
    Random,
    Superpixel,
    SuperpixelMap,
    Zero,
    mask_to_bytes,
    segment_by_offset,
    segment_by_sections,
    segment_from_listing,
)
from .transform import TransformAction, TransformPlan, plan_append, plan_datadisp, plan_disp
from .verifier import VerificationReport, verify_chain, verify_preservation

__version__ = "0.1.0"

__all__ = [
    "Adversarial", "AttackConfig", "AttackRound", "AttackTrace", "DetectorHandle", "FastLsmConfig",
    "HotRegion", "KernelConfig", "LinearExplanation", "NgramModel", "NoPositiveWeights", "PeImage",
    "PlantedSignatureDetector", "Random", "SectionRecord", "Superpixel", "SuperpixelMap",
    "TransformAction", "TransformPlan", "UnsupportedBinary", "VerificationReport", "Zero",
    "compare_strategies", "explain_instance", "fast_lsm", "fit_local_linear", "make_minimal_pe",
    "mask_to_bytes", "parse_pe", "plan_append", "plan_datadisp", "plan_disp", "remote_detector",
    "run_attack", "run_random_baseline", "segment_by_offset", "segment_by_sections",
    "segment_from_listing", "select_perturbation", "serialize", "train_ngram", "verify_chain",
    "verify_preservation",
]
