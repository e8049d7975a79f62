"""Exception hierarchy shared by the library and the command line."""


class DPFError(Exception):
    """Base class for all errors raised by dpfnet."""

    exit_code = 3


class DimensionError(DPFError, ValueError):
    exit_code = 2


class ParameterError(DPFError, ValueError):
    exit_code = 2


class ParseError(DPFError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyInputError(DPFError, ValueError):
    pass


class DegenerateInputError(DPFError, ValueError):
    pass


class FormatError(DPFError, ValueError):
    """Checkpoint or binary file that cannot be decoded; names the bad section."""

    def __init__(self, message, section=None):
        self.section = section
        prefix = f"section {section!r}: " if section else ""
        super().__init__(prefix + message)


class IncompatibleConfigError(DPFError, ValueError):
    pass


class NumericError(DPFError, ArithmeticError):
    exit_code = 4
