"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
FormatError -> 3, InvariantError (and plain assertion failures) -> 1.
"""


class ShapeError(ValueError):
    """Tensor dimensions do not match the declared layout."""


class ConfigError(ValueError):
    """Parameters violate a documented precondition."""


class FormatError(IOError):
    """A serialized file is malformed (bad magic, version, or length)."""


class InvariantError(AssertionError):
    """A runtime invariant check tripped; indicates an implementation bug."""


class DegenerateQueryWarning(UserWarning):
    """A zero-norm vector was seen where a direction was expected."""
