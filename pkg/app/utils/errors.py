"""
Error hierarchy shared by every service.

The CLI maps the two branches below to exit codes:
- DataFormatError: bad input data or a corrupt file (exit 2)
- InvariantViolation: internal bookkeeping went wrong (exit 3)
"""


class CacheSimError(Exception):
    """Base exception for the cache simulator."""
    pass


class DataFormatError(CacheSimError):
    """Input data is malformed or inconsistent."""
    pass


class InvariantViolation(CacheSimError):
    """An internal invariant no longer holds."""
    pass
