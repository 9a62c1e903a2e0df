"""Exception hierarchy shared across the package."""


class ElicitError(Exception):
    """Base class for every error raised by elicitkit."""


class ConfigurationError(ElicitError):
    pass


class DegenerateColumnError(ElicitError):
    def __init__(self, column: str):
        super().__init__(f"column {column!r} has zero variance and cannot be normalised")
        self.column = column


class ParseError(ElicitError):
    """Malformed input file; carries row/column location when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


class TemplateError(ElicitError):
    pass


class ExpansionError(ElicitError):
    pass


class TransportError(ElicitError):
    pass


class CacheMissError(ElicitError):
    def __init__(self, key: str):
        super().__init__(f"no cached response for request hash {key}")
        self.key = key


class ElicitationParseError(ElicitError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class ComponentRejectedError(ElicitError):
    pass


class NumericError(ElicitError):
    def __init__(self, message: str, coordinate: int | None = None):
        super().__init__(message)
        self.coordinate = coordinate


class SamplerHealthError(ElicitError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class SingularDesignError(ElicitError):
    pass


class ProbeError(ElicitError):
    pass
