"""RIS-assisted ISAC with symbol-level precoding and an unfolded ADMM solver."""

from .scene import ChannelSet, SceneConfig, SymbolFrame, draw_symbols, synth_channels, synth_dataset
from .unfold import SolverOptions, StepSchedule, default_schedule, run_unfolded

__all__ = [
    "ChannelSet",
    "SceneConfig",
    "SymbolFrame",
    "draw_symbols",
    "synth_channels",
    "synth_dataset",
    "SolverOptions",
    "StepSchedule",
    "default_schedule",
    "run_unfolded",
]
__version__ = "0.1.0"
