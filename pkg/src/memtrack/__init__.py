"""Memory-token single object tracking on LiDAR-style point clouds."""

from .config import TrackerConfig, TrainConfig
from .geometry import Box3D, iou3d
from .synth import Sequence, generate_sequence, read_sequence, write_sequence
from .tracker import init_track, step, track_sequence

__version__ = "0.1.0"

__all__ = [
    "Box3D", "Sequence", "TrackerConfig", "TrainConfig", "generate_sequence", "init_track", "iou3d",
    "read_sequence", "step", "track_sequence", "write_sequence",
]
