"""
Exception hierarchy shared by every chronoscene module.

The CLI turns any ``ChronosceneError`` into exit code 1 with the message on stderr.
"""

from __future__ import annotations


class ChronosceneError(Exception):
    """Base class for all engine errors."""


class FormatError(ChronosceneError, ValueError):
    """A file, record or payload does not follow its on-disk or wire format."""


class UsageError(ChronosceneError, ValueError):
    """An operation was called with its preconditions violated."""


class DetectorError(ChronosceneError):
    """A change detector failed or returned a malformed response."""


class ProviderError(ChronosceneError):
    """An embedding or description provider failed."""
