"""Exception taxonomy shared across the package.

Every error raised by shadetree code derives from ShadeTreeError so callers
can catch the whole family at once.  The CLI maps these onto its exit codes
(2 = parse, 3 = I/O, 4 = algorithmic failure).
"""

from __future__ import annotations


class ShadeTreeError(Exception):
    """Base class for all shadetree errors."""


class DslSyntaxError(ShadeTreeError):
    """Malformed DSL text.  Carries 1-based line/column of the offending token."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class ParamRangeError(ShadeTreeError):
    """A node parameter is outside its declared range."""


class ArityError(ShadeTreeError):
    """A node was built with the wrong number of arguments (e.g. Mix without a mask)."""


class PathError(ShadeTreeError):
    """A tree path addresses a node that does not exist."""


class DimensionMismatch(ShadeTreeError):
    """Two images that must share a pixel grid do not."""


class UnknownEnvIndex(ShadeTreeError):
    """EnvRef refers to an index outside the environment library."""


class NoProposal(ShadeTreeError):
    """The split proposers cannot decompose a (near-constant) node."""


class DecompositionFailed(ShadeTreeError):
    """Even the stage-2 search exhausted its budget on the root node.

    The partial report is attached so callers can still inspect it.
    """

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class EditNotFound(ShadeTreeError):
    """No differing subtree between the example pair exceeds the threshold."""
