"""Exception hierarchy.

Every error carries a short ``category`` string so the command line can
report a machine-parsable failure class.
"""


class UnaganError(Exception):
    category = "error"


class ConfigError(UnaganError, ValueError):
    category = "config"

    def __init__(self, message, key_path=None):
        super().__init__(message)
        self.key_path = key_path


class InvalidConfig(ConfigError):
    pass


class InputTooShort(UnaganError, ValueError):
    category = "input"


class ShapeError(UnaganError, ValueError):
    category = "shape"


class LengthMismatch(UnaganError, ValueError):
    category = "input"


class ZeroReference(UnaganError, ValueError):
    category = "input"


class SilentNoise(UnaganError, ValueError):
    category = "input"


class SilentClean(UnaganError, ValueError):
    category = "input"


class SampleRateMismatch(UnaganError, ValueError):
    category = "input"


class PairingError(UnaganError):
    category = "corpus"


class IngestError(UnaganError):
    category = "corpus"

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class ManifestError(UnaganError):
    category = "corpus"


class MixError(UnaganError):
    category = "corpus"

    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)


class EmptyPool(UnaganError):
    category = "corpus"


class InsufficientData(UnaganError):
    category = "corpus"


class DegenerateNce(UnaganError, ValueError):
    category = "loss"


class TrainingDiverged(UnaganError, RuntimeError):
    category = "training"

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class IncompatibleCheckpoint(UnaganError):
    category = "checkpoint"


class GroupingError(UnaganError, ValueError):
    category = "report"


class ToolOutputError(UnaganError):
    category = "tool"

    def __init__(self, message, output=""):
        super().__init__(message)
        self.output = output


class StageFailed(UnaganError):
    category = "pipeline"
