"""Exception hierarchy.

Every error maps to one CLI exit code class: configuration problems (2),
data problems (3) and training divergence (4).
"""


class AuditError(Exception):
    exit_code = 1


class ConfigError(AuditError, ValueError):
    exit_code = 2


class DataError(AuditError):
    exit_code = 3


class TrainingError(AuditError):
    exit_code = 4


# core_data
class MissingPath(DataError, FileNotFoundError):
    pass


class EmptyDataset(DataError):
    pass


class MalformedManifestRow(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class CorruptImage(DataError):
    pass


class UnmappedClass(DataError):
    pass


class InvalidMapping(ConfigError):
    pass


# cropper
class ImageTooSmall(DataError):
    pass


class IoFailure(DataError):
    pass


class UnsupportedChannelCount(DataError, ValueError):
    pass


# sampling
class ClassTooSmall(DataError):
    pass


class DegenerateDataset(DataError):
    pass


# probe / optim
class ShapeMismatch(AuditError, ValueError):
    exit_code = 3


class LengthMismatch(AuditError, ValueError):
    pass


class NonFiniteGradient(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


# metrics
class EmptyMatrix(AuditError, ValueError):
    pass


class InvalidBaseline(AuditError, ValueError):
    pass


# synthgen
class InfeasibleScene(ConfigError):
    pass
