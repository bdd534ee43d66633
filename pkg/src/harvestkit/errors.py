"""Exception hierarchy shared by every harvestkit module."""


class HarvestError(Exception):
    """Base class for all errors raised by harvestkit."""


class InputError(HarvestError, ValueError):
    """Caller-supplied data violates a documented precondition."""


class DegenerateMarkError(InputError):
    """A RECIST mark whose endpoints span zero width or zero height."""


class StateError(HarvestError):
    """Pipeline state is missing something a later stage requires."""


class NumericError(HarvestError, ArithmeticError):
    """A numeric quantity left its valid domain."""


class SchemaError(InputError):
    """A persisted record failed validation.

    Carries the 1-based line number and offending field when known so
    that messages point straight at the bad input.
    """

    def __init__(self, message, line=None, field=None, source=None):
        self.message = message
        self.line = line
        self.field = field
        self.source = source
        where = []
        if source is not None:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
