"""Exception types shared across the package."""


class DopplerGAError(Exception):
    """Base class for all package-specific errors."""


class MissingFileError(DopplerGAError):
    """A required input file does not exist."""


class WavFormatError(DopplerGAError):
    """WAV payload is compressed, truncated, or otherwise unsupported."""


class EmptyAudioError(DopplerGAError):
    """WAV file parsed fine but contains no samples."""


class ManifestError(DopplerGAError):
    """Dataset manifest is malformed; message names the offending line."""


class FilterDesignError(DopplerGAError):
    """Requested filter cutoffs are infeasible at the given sample rate."""


class ResampleError(DopplerGAError):
    """Target rate would alias the band of interest."""


class NonFiniteSignalError(DopplerGAError):
    """A non-finite sample was encountered; message carries the index."""


class FeatureError(DopplerGAError):
    """Feature extraction or normalization precondition violated."""


class ShapeError(DopplerGAError):
    """Tensor shapes inconsistent with the model configuration."""


class DivergenceError(DopplerGAError):
    """Training loss became non-finite or exceeded the abort threshold."""


class ModelFileError(DopplerGAError):
    """Model file is corrupt or has an unsupported version."""
