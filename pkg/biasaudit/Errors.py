# Exception hierarchy shared by every module of the toolkit.
# Stage runners catch AuditError subclasses, log them and turn them into a non-zero exit status.


class AuditError(Exception):
    pass


class ConfigError(AuditError):
    pass


class SchemaError(AuditError):
    """Malformed input file. Carries the offending row (1-based data row) and column when known."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class DimensionError(AuditError, ValueError):
    pass


class DegenerateInputError(AuditError):
    pass


class EmptyGroupError(AuditError):
    pass


class SamplingError(AuditError):
    pass


class TrainingError(AuditError):
    pass


class UndefinedMetricError(AuditError):
    pass
