"""Iterative story visualization with global reference cross-attention.

A story is rendered once from text alone, then re-rendered for a number of
rounds where every frame attends to compact global embeddings of *all*
frames of the previous round.
"""

from .story_model import Frame, FrameSet, RunConfig, StoryManifest, load_manifest
from .weight_schedule import LambdaSchedule, fixed_schedule, linear_schedule

__all__ = [
    "Frame",
    "FrameSet",
    "LambdaSchedule",
    "RunConfig",
    "StoryManifest",
    "fixed_schedule",
    "linear_schedule",
    "load_manifest",
]

__version__ = "0.1.0"
