"""Desk-scale referring segmentation for remote-sensing style imagery.

A union vision-language encoder, a hierarchical image encoder with
bidirectional text fusion, a mask prompt generator and a light prompt-driven
mask decoder, trained with cross-entropy, DICE and a text-weighted boundary
loss on synthetic scenes.
"""
from .config import ConfigError, RunConfig
from .data import read_dataset, synth_dataset, synth_scene, write_dataset
from .metrics import MetricReport, evaluate, iou
from .model import ReferringSegmenter, build_model

__all__ = ["ConfigError", "MetricReport", "ReferringSegmenter", "RunConfig", "build_model",
           "evaluate", "iou", "read_dataset", "synth_dataset", "synth_scene", "write_dataset"]
__version__ = "0.1.0"
