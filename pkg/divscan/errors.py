"""
Exception hierarchy for divscan

Library functions raise these; app.py turns them into result dicts and
exit codes (validation -> 2, I/O -> 1).
"""


class DivscanError(Exception):
    """Base class for every error raised by the package"""


class ValidationError(DivscanError, ValueError):
    """Malformed input, violated invariant or bad configuration"""


class BundleIOError(DivscanError, OSError):
    """Missing, unreadable or unwritable file"""


class NumericalError(DivscanError, ArithmeticError):
    """A numerical routine failed to converge"""
