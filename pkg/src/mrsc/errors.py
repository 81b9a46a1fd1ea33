"""Exception and warning types shared across the package.

Every error carries an ``exit_code`` so the command-line layer can map it to
the stable process exit contract (2 = bad input, 3 = numerical failure).
"""


class MRSCError(Exception):
    exit_code = 2


class PreconditionError(MRSCError, ValueError):
    pass


class DimensionMismatch(MRSCError, ValueError):
    pass


class NonFinite(MRSCError, ValueError):
    pass


class EmptyInput(MRSCError, ValueError):
    pass


class RankTooLarge(MRSCError, ValueError):
    pass


class SvdFailure(MRSCError, ArithmeticError):
    exit_code = 3


class NoUsableColumns(MRSCError, ValueError):
    pass


class EmptyDonorPool(MRSCError, ValueError):
    pass


class DegenerateBaseline(MRSCError, ArithmeticError):
    exit_code = 3


class MRSCWarning(UserWarning):
    pass


class MissingDataWarning(MRSCWarning):
    """Raised when the donor pool has no observed entries at all."""


class AllZeroSpectrum(MRSCWarning):
    """Every singular value is zero; effective rank collapses to 0."""


class DegenerateModel(MRSCWarning):
    """The denoised model retained no singular values; beta is forced to 0."""


class ZeroActual(MRSCWarning):
    """An actual value of 0 was excluded from a percentage error."""
