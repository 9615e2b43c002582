#!/usr/bin/env python3


class BiasLabException(Exception):
    pass


class ConfigError(BiasLabException):
    pass


class InputError(BiasLabException):
    pass


class RowError(InputError):
    """A problem tied to one line of an input file."""

    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__("line %s: %s" % (line, reason))


class MalformedRowError(RowError):
    pass


class ScaleError(RowError):
    pass


class ZeroRatingError(RowError):
    pass


class NotFound(BiasLabException):
    pass


class EmptyAfterFilter(BiasLabException):
    pass


class MissingThetaError(BiasLabException):
    pass


class SingularSystemError(BiasLabException):
    pass


class UndefinedStatistic(BiasLabException):
    pass


class FingerprintMismatch(BiasLabException):
    pass


class ProviderFailure(BiasLabException):
    pass
