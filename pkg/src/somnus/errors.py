"""Error taxonomy shared across the somnus pipeline.

Exit-code mapping used by the CLI: 0 ok, 2 config error, 3 data error,
4 internal error.
"""

from __future__ import annotations


class SomnusError(Exception):
    """Base class for all somnus-specific errors."""

    exit_code = 4


class ConfigError(SomnusError):
    """Invalid configuration (bad file, missing path, out-of-range value)."""

    exit_code = 2


class DataError(SomnusError):
    """Input data violates a contract (exit code 3)."""

    exit_code = 3


class ParseError(DataError):
    """A single input line could not be parsed.

    Carries enough context to report the failure without aborting the
    surrounding stream.
    """

    def __init__(self, line_no: int, field: str, reason: str):
        self.line_no = line_no
        self.field = field
        self.reason = reason
        super().__init__(f"line {line_no}: field '{field}': {reason}")


class EmptySalt(ConfigError):
    """Anonymization requested with an empty salt."""


class InvalidSpec(ConfigError):
    """Synthetic cohort specification is unusable."""


class UnknownMac(DataError):
    """Record MAC address is missing from the device registry."""


class NoOverlap(DataError):
    """Ground-truth interval does not intersect the day window."""


class InsufficientData(DataError):
    """Not enough samples for the requested statistic."""


class EmptyDataset(DataError):
    """Training requested on an empty dataset."""


class MissingCounts(DataError):
    """Forest lacks resample inclusion counts needed for variance estimates."""


class InsufficientUserData(DataError):
    """Personalization fraction rounds to zero days of user data."""


class NoVariance(DataError):
    """Confidence flagging mode requires per-minute variances but none exist."""


class WindowTooLarge(ConfigError):
    """Smoothing window exceeds the available sequence length."""


class NoSleepDetected(DataError):
    """No sleep-state run exists in the smoothed day."""


class LengthMismatch(DataError):
    """Paired sequences have different lengths."""


class TooFewUsers(DataError):
    """Leave-one-user-out evaluation needs at least two users."""


class UnmatchedDay(DataError):
    """An estimate has no matching ground-truth day."""


class VersionMismatch(DataError):
    """Persisted model was written by an incompatible format version."""

    def __init__(self, found: str, expected: str):
        self.found = found
        self.expected = expected
        super().__init__(
            f"model format version {found!r} incompatible with expected {expected!r}"
        )


class ChecksumFailure(DataError):
    """Persisted model failed integrity verification."""
