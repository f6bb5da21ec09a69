class EGPAError(Exception):
    pass


class ValidationError(EGPAError, ValueError):
    """Bad input data, configuration or flags."""


class ParameterError(ValidationError):
    """An injector or operator parameter outside its admissible range."""


class ParseError(ValidationError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "")
            where += ": "
        super().__init__(where + message)
