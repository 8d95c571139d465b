"""Exception types shared across the toolkit."""


class DeepcKitError(ValueError):
    """Base class for all toolkit errors."""


class DepthExceedsData(DeepcKitError):
    """Requested Hankel depth (or excitation order) exceeds the signal length."""


class DepthMismatch(DeepcKitError):
    """Hankel depth does not equal the requested past + future split."""


class DimensionMismatch(DeepcKitError):
    """Operands have inconsistent dimensions."""


class NonPositiveMass(DeepcKitError):
    """A mass parameter is zero or negative."""


class BadSplit(DeepcKitError):
    """Requested known/unknown partition sizes are out of range."""


class ExcitationFailed(DeepcKitError):
    """Collected input data failed the persistency-of-excitation check."""


class BuffersNotWarm(DeepcKitError):
    """Controller asked to solve before its history buffers were filled."""


class ScenarioCountMismatch(DeepcKitError):
    """Number of supplied scenarios differs from the configured count."""


class NonPositiveBase(DeepcKitError):
    """Improvement percentage requested against a non-positive baseline."""


class ConfigError(DeepcKitError):
    """Experiment configuration file is malformed or incomplete."""
