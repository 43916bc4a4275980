"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented codes: 2 usage/validation, 3 data, 4 numeric.
"""


class WaverError(Exception):
    exit_code = 3


class ValidationError(WaverError, ValueError):
    exit_code = 2


class DataError(WaverError):
    exit_code = 3


class NumericError(WaverError, ArithmeticError):
    exit_code = 4


class InvalidConfig(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class EmptyCaption(ValidationError):
    pass


class EmptyPhrase(ValidationError):
    pass


class NonSquare(ValidationError):
    pass


class NonPositiveTemperature(ValidationError):
    pass


class NotScalar(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class ZeroNorm(NumericError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyVocab(DataError):
    pass


class UnknownId(DataError, LookupError):
    pass


class UnknownCaption(DataError, LookupError):
    pass


class DanglingReference(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class ShapeOverflow(DataError):
    pass
