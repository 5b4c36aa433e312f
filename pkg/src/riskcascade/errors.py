"""Exception types shared across the package.

Unreadable files surface as the builtin OSError family; everything the
package itself can diagnose gets a dedicated class here so callers can
handle failure modes selectively.
"""


class FormatError(ValueError):
    """A record in an input file is malformed (carries row number and reason)."""

    def __init__(self, row: int, reason: str):
        self.row = row
        self.reason = reason
        super().__init__(f"row {row}: {reason}")


class SchemaError(ValueError):
    """A required field in a structured model reply is missing or mistyped."""

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"field {field!r}: {reason}")


class ParseError(ValueError):
    """No usable JSON object could be extracted from a model reply."""


class AnalystError(RuntimeError):
    """Feature extraction failed for a post after bounded retries."""

    def __init__(self, post_id: str, cause: Exception):
        self.post_id = post_id
        self.cause = cause
        super().__init__(f"analysis failed for post {post_id!r}: {cause}")


class DegenerateDataError(ValueError):
    """A training or validation set lacks one of the two label classes."""


class DimensionError(ValueError):
    """A vector or roster has the wrong length."""


class TransportError(RuntimeError):
    """A remote endpoint stayed unreachable through all retries."""


class ProtocolError(RuntimeError):
    """A remote endpoint answered with an out-of-contract payload."""


class LengthMismatchError(ValueError):
    """Paired prediction/gold sequences differ in length."""


class EmptyEvaluationError(ValueError):
    """An evaluation was requested over zero items."""
