"""Exception hierarchy.  ``category`` is the token the CLI prints on failure."""


class VitalError(Exception):
    category = "error"


class ShapeError(VitalError, ValueError):
    category = "shape_error"


class DataError(VitalError, ValueError):
    """Malformed or out-of-contract fingerprint data."""

    category = "format_error"


class ConfigError(VitalError, ValueError):
    category = "bad_config"


class CheckpointFormatError(VitalError, ValueError):
    category = "format_error"


class BadMagicError(CheckpointFormatError):
    pass


class VersionMismatchError(CheckpointFormatError):
    pass


class TruncatedPayloadError(CheckpointFormatError):
    pass


class ManifestMismatchError(CheckpointFormatError):
    pass


class TrainingDivergedError(VitalError, RuntimeError):
    category = "training_divergence"
