"""Structured domain errors shared by every module."""

from __future__ import annotations


class DroidError(Exception):
    """A domain error with a machine-readable code.

    The CLI serialises these to JSON on stderr and exits with status 1.
    """

    def __init__(self, code: str, message: str, **details):
        super().__init__(message)
        self.code = code
        self.message = message
        self.details = details

    def to_dict(self) -> dict:
        out = {"error": self.code, "message": self.message}
        if self.details:
            out["details"] = self.details
        return out
