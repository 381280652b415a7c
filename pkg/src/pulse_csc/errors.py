"""Exception taxonomy shared across the package.

Everything raised on purpose derives from PulseCscError so the CLI can map
failures to exit codes without matching on builtin exception types.
"""


class PulseCscError(Exception):
    """Base class for all deliberate failures."""


class ConfigError(PulseCscError):
    """Invalid or inconsistent configuration values."""


class SchemaError(PulseCscError):
    """Malformed serialized data: dataset records, checkpoints, manifests."""


class ChecksumError(SchemaError):
    """Stored integrity checksum does not match the payload."""


class InvalidSpecError(ConfigError):
    """A design request is out of range, e.g. band edges at or above Nyquist."""


class DesignFailureError(PulseCscError):
    """Filter design produced unusable coefficients (non-finite or unstable)."""


class UnsupportedRatioError(PulseCscError):
    """Resampling ratio has no reasonably small rational form."""


class ConvergenceError(PulseCscError):
    """An iterative estimate failed to converge within its iteration budget."""


class StaleTraceError(PulseCscError):
    """A forward trace is being replayed against a model that has since changed."""


class DivergedTrainingError(PulseCscError):
    """Non-finite gradients or parameters encountered during optimization."""


class FsMismatchError(PulseCscError):
    """Input sampling rate differs from what the model/pipeline expects."""


class EmptyEvaluationError(PulseCscError):
    """No aligned, reliable data points remain to evaluate."""


class UndefinedTestError(PulseCscError):
    """The hypothesis test is undefined for this input (e.g. all-zero differences)."""


class UndefinedReferenceError(PulseCscError):
    """A reference signal required to be nonzero is identically zero."""


class InsufficientDataError(PulseCscError):
    """Fewer data points than the statistic needs."""
