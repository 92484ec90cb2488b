"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class GwevalError(Exception):
    exit_status = 1


class FormatError(GwevalError, ValueError):
    """Malformed input text. ``line`` is 1-based when known."""

    exit_status = 2

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = source
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class InputDomainError(GwevalError, ValueError):
    """Well-formed input that violates an operation's precondition."""

    exit_status = 3


class DegenerateVarianceError(InputDomainError):
    exit_status = 3


class ConfigError(GwevalError, ValueError):
    exit_status = 4
