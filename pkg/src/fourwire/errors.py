"""Exception hierarchy.

Everything raised on purpose by the library derives from :class:`FourWireError`
so the CLI can map domain failures to exit code 1 in one place.
"""


class FourWireError(Exception):
    """Base class for domain errors."""


class ModelError(FourWireError, ValueError):
    """A domain object was constructed with inconsistent data."""


class DssError(FourWireError):
    """Problem reading or writing the circuit text format."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class DssSyntaxError(DssError):
    pass


class UnsupportedElement(DssError):
    """The circuit text uses an element class outside the supported subset."""

    def __init__(self, element, line=None, column=None):
        self.element = element
        super().__init__(f"unsupported element {element!r}", line, column)


class DimensionMismatch(DssError):
    pass


class TransformError(FourWireError):
    pass


class SingularNeutralError(TransformError):
    pass


class SingularImpedanceError(FourWireError):
    def __init__(self, line_id, condition):
        self.line_id = line_id
        self.condition = condition
        super().__init__(f"series impedance of line {line_id!r} is singular (cond={condition:.3g})")


class VoltageCollapseError(FourWireError):
    """A loaded phase reached zero phase-to-neutral voltage."""


class RecoveryError(FourWireError):
    pass


class GenerationError(FourWireError):
    pass
