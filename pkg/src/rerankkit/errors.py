"""Exception hierarchy shared by every stage."""

from __future__ import annotations


class RerankKitError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RerankKitError, ValueError):
    """Input violates a documented precondition or invariant."""


class TransportError(RerankKitError):
    """An HTTP call failed (after retries, when retrying applies)."""

    def __init__(self, message: str, *, status: int | None = None, context: dict | None = None):
        super().__init__(message)
        self.status = status
        self.context = dict(context or {})

    @property
    def transient(self) -> bool:
        return self.status is None or self.status in (408, 409, 425, 429) or self.status >= 500


class UnparseableResponseError(RerankKitError):
    """A model response could not be parsed after the allowed attempts."""

    def __init__(self, message: str, raw_response: str):
        super().__init__(message)
        self.raw_response = raw_response
