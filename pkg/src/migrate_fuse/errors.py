"""Exception hierarchy.

Input problems derive from :class:`InputError` (CLI exit code 2), numerical
failures from :class:`NumericalError` (CLI exit code 3).
"""


class MigrateError(Exception):
    pass


class InputError(MigrateError, ValueError):
    pass


class NumericalError(MigrateError, ArithmeticError):
    pass


class DuplicateId(InputError):
    pass


class InconsistentContainment(InputError):
    pass


class UnknownMember(InputError):
    pass


class UnknownArea(InputError):
    pass


class PartitionMismatch(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class NonPositiveFactor(InputError):
    pass


class NoDates(InputError):
    pass


class EmptyAfterCleaning(InputError):
    pass


class MissingMonth(InputError):
    pass


class MissingComponent(InputError):
    pass


class AlreadyAdjusted(InputError):
    pass


class ZeroEstimate(InputError):
    pass


class NonFiniteInput(InputError):
    pass


class MissingCentroids(InputError):
    pass


class LengthMismatch(InputError):
    pass


class EmptyRegion(InputError):
    pass


class ZeroBaseShare(InputError):
    pass


class InconsistentMarginals(NumericalError):
    pass


class ZeroTotal(NumericalError):
    pass


class ZeroVariance(NumericalError):
    pass


class RawPerfect(NumericalError):
    pass
