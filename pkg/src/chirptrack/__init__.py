"""Sub-millimetre acoustic ranging from the phase of demodulated FMCW chirps.

The package covers waveform generation, a multipath channel simulator,
phase tracking, clock calibration, 3D fusion with failure recovery,
concurrent transmitters and an evaluation harness.
"""

from .chirp import ChirpParams, SampleBlock, pseudo_chirp, synthesize_chirp
from .errors import (BoundDomainError, CalibrationFailed, ChirpTrackError, ConfigurationError,
                     FrameUnderrun, GlobalFailure, IngestError, InsufficientData, InversionError,
                     SignalLost, SimulationError, TriangulationError)
from .fusion import LARGE_ARRAY, SMALL_ARRAY, ArrayTracker, MicArrayGeometry, Pose3D, triangulate
from .sync import ClockCalibration, calibrate
from .tracker import ChannelTracker, Quality, RangeEstimate, TrackerState

__version__ = "0.1.0"

__all__ = [
    "ArrayTracker", "BoundDomainError", "CalibrationFailed", "ChannelTracker", "ChirpParams",
    "ChirpTrackError", "ClockCalibration", "ConfigurationError", "FrameUnderrun", "GlobalFailure",
    "IngestError", "InsufficientData", "InversionError", "LARGE_ARRAY", "MicArrayGeometry",
    "Pose3D", "Quality", "RangeEstimate", "SMALL_ARRAY", "SampleBlock", "SignalLost",
    "SimulationError", "TrackerState", "TriangulationError", "calibrate", "pseudo_chirp",
    "synthesize_chirp", "triangulate",
]
