"""Exception hierarchy shared across the package.

Two families matter to callers: `InputError` covers anything wrong with
what the user handed us (bad expression, bad file, bad shapes, unknown
variant) and maps to exit code 2 on the command line; `SemanticError`
covers well-formed requests whose computation failed a semantic contract
(NaN outputs, no feasible plan) and maps to exit code 1.
"""

from __future__ import annotations


class ForgeError(Exception):
    """Base error.  `kind` is a stable machine-readable tag."""

    kind = "error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def __str__(self) -> str:
        if not self.context:
            return self.message
        extras = ", ".join(f"{k}={v!r}" for k, v in sorted(self.context.items()))
        return f"{self.message} ({extras})"


class InputError(ForgeError):
    kind = "input"


class ParseError(InputError):
    """Lex or parse failure.  `offset` is a byte offset into the source."""

    kind = "parse"

    def __init__(self, message: str, offset: int | None = None, **context):
        if offset is not None:
            context["offset"] = offset
        super().__init__(message, **context)
        self.offset = offset


class LowerError(InputError):
    kind = "lower"


class ShapeError(InputError):
    kind = "shape-mismatch"


class GraphError(InputError):
    kind = "graph"


class SchemaError(InputError):
    kind = "schema"


class UnknownVariantError(InputError):
    kind = "unknown-variant"


class SemanticError(ForgeError):
    kind = "semantic"


class UnsupportedError(SemanticError):
    """A well-formed request this implementation cannot serve (template
    limits, unavailable modes, oversized search spaces): exit code 1."""

    kind = "unsupported"


class NanError(SemanticError):
    kind = "nan-in-output"


class NoFeasiblePlanError(SemanticError):
    kind = "no-feasible-plan"
