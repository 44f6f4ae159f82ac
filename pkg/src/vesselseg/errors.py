"""Exception types shared across the toolkit.

Everything raised on purpose derives from VesselSegError so the CLI can
turn any domain failure into a one-line diagnostic and exit code 1.
Plain OSError is allowed to propagate for unreadable files.
"""


class VesselSegError(Exception):
    """Base class for all toolkit errors."""


class ImageFormatError(VesselSegError):
    """Raster input is not a single-channel 8- or 16-bit image."""


class PairingError(VesselSegError):
    """Image and mask dimensions do not match."""


class ConfigurationError(VesselSegError):
    """Invalid or inconsistent configuration values."""


class DimensionError(VesselSegError):
    """An image is too small for the requested window size."""


class ShapeError(VesselSegError):
    """Input spatial dimensions violate the network's divisibility rule."""


class ContractError(VesselSegError):
    """Mismatched shapes or values passed between operations."""


class UndefinedMetricError(VesselSegError):
    """A metric is undefined for the given data (e.g. single-class truth)."""


class CheckpointVersionError(VesselSegError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointIntegrityError(VesselSegError):
    """Checkpoint file is corrupt or truncated (checksum mismatch)."""


class OutOfMemoryError(VesselSegError):
    """Full-image inference ran out of memory; caller may fall back to tiling."""


class TrainingDivergedError(VesselSegError):
    """Training produced a non-finite loss."""
