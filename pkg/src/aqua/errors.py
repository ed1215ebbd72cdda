"""Exception and warning types.

Each error carries the CLI exit code it maps to: 2 for configuration
problems, 3 for data problems, 4 for numeric failures.
"""


class AquaError(Exception):
    exit_code = 3

    def __init__(self, message="", **context):
        super().__init__(message)
        self.context = context


class ConfigError(AquaError):
    exit_code = 2


class NumericError(AquaError):
    exit_code = 4


# raster / tile format
class AllInvalid(AquaError):
    pass


class ShapeMismatch(AquaError):
    pass


class EmptyInput(AquaError):
    pass


class BadMagic(AquaError):
    pass


class TruncatedFile(AquaError):
    pass


class UnsupportedVersion(AquaError):
    pass


# scenes
class InfeasibleSpec(ConfigError):
    pass


# teacher
class MissingBand(AquaError):
    pass


class UnknownIndex(ConfigError):
    pass


# baselines
class BadKernel(ConfigError):
    pass


# model
class BadConfig(ConfigError):
    pass


class ParamCountMismatch(AquaError):
    pass


# training
class EmptyDataset(AquaError):
    pass


class DivergenceDetected(NumericError):
    pass


class DegenerateRange(UserWarning):
    """Percentile clip range collapsed; the raster was zeroed instead of scaled."""


class DegenerateHistogram(UserWarning):
    """All histogram mass sits in a single bin."""
