"""Dense out-of-plane micro-motion estimation from laser speckle video."""

from importlib.metadata import PackageNotFoundError, version

from .config import PipelineConfig
from .errors import SpeckleMotionError
from .imageio import FrameSequence, load_sequence, read_displacement, write_displacement
from .pipeline import AnalysisResult, analyze
from .simulator import make_scenario, render_sequence

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "AnalysisResult",
    "FrameSequence",
    "PipelineConfig",
    "SpeckleMotionError",
    "analyze",
    "load_sequence",
    "make_scenario",
    "read_displacement",
    "render_sequence",
    "write_displacement",
]
