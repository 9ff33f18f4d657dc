"""Desk-scale staged vision-language training with prefix attention masks."""
from .masks import MaskKind, SegmentLayout, build_mask
from .model import PRESETS, VLMConfig, VLMParams, get_preset
from .training import StageConfig, run_pipeline, run_stage, stage_preset

__version__ = "0.1.0"

__all__ = [
    "MaskKind", "SegmentLayout", "build_mask", "PRESETS", "VLMConfig", "VLMParams",
    "get_preset", "StageConfig", "run_pipeline", "run_stage", "stage_preset",
]
