"""Exception hierarchy shared by every stage of the pipeline."""


class ChirpTrackError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ChirpTrackError, ValueError):
    """Invalid waveform, scenario or filter parameters."""


class SimulationError(ChirpTrackError):
    """The channel renderer was asked for data it cannot produce."""


class FrameUnderrun(ChirpTrackError):
    """Not enough samples buffered to form a full chirp frame."""


class SignalLost(ChirpTrackError):
    """No qualifying spectral peak in a demodulated frame."""


class InversionError(ChirpTrackError):
    """Phase could not be mapped back to a delay inside [0, T)."""


class InsufficientData(ChirpTrackError, ValueError):
    """Too few points for a regression."""


class CalibrationFailed(ChirpTrackError):
    """Touch calibration could not establish start time, offset or drift."""


class TriangulationError(ChirpTrackError):
    """The four ranges do not intersect in the front half-space."""


class GlobalFailure(ChirpTrackError):
    """Three or more microphones disagree; no consensus is available."""


class BoundDomainError(ChirpTrackError, ValueError):
    """A closed-form bound was evaluated outside its assumptions."""


class IngestError(ChirpTrackError):
    """A sample file could not be read or does not match the scenario."""
