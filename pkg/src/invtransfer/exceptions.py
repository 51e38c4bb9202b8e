"""Exception hierarchy shared by every module of the package."""


class InvTransferError(Exception):
    """Base class for all errors raised by invtransfer."""


class DatasetError(InvTransferError, ValueError):
    pass


class DimensionMismatch(DatasetError):
    pass


class NonFiniteValue(DatasetError):
    pass


class DuplicateTaskId(DatasetError):
    pass


class TaskTooSmall(DatasetError):
    pass


class NoLabeledData(DatasetError):
    pass


class UnlabeledTask(DatasetError):
    pass


class RankDeficient(InvTransferError, ArithmeticError):
    pass


class InvalidK(InvTransferError, ValueError):
    pass


class TooFewSamples(InvTransferError, ValueError):
    pass


class SingleTask(InvTransferError, ValueError):
    pass


class EnumerationTooLarge(InvTransferError, ValueError):
    pass


class TestTaskTooSmall(InvTransferError, ValueError):
    __test__ = False  # keep pytest from collecting this class


class NoTestTask(InvTransferError, ValueError):
    pass


class NotPositiveDefinite(InvTransferError, ArithmeticError):
    pass


class InfeasibleConstraints(InvTransferError, ArithmeticError):
    pass


class SingularM(InvTransferError, ArithmeticError):
    pass


class DegenerateDenominator(InvTransferError, ArithmeticError):
    pass


class InvalidConfig(InvTransferError, ValueError):
    pass


class ParseError(InvTransferError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InconsistentWidth(ParseError):
    pass
