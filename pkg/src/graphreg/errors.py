"""Exception hierarchy shared across the package."""


class GraphRegError(Exception):
    pass


class InvalidArgumentError(GraphRegError, ValueError):
    """Bad shapes, out-of-range ids, or parameters outside their domain."""


class DegenerateInputError(GraphRegError, ValueError):
    """Input is well-formed but the quantity is undefined (zero norm, zero counts)."""


class PreconditionError(GraphRegError, ValueError):
    """A caller-side contract was broken, e.g. ground truth missing from the sampled labels."""


class ParseError(GraphRegError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class SchemaError(GraphRegError):
    """File parsed but its contents violate a structural invariant."""


class TrainingDivergedError(GraphRegError, FloatingPointError):
    pass
