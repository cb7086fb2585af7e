"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: InputError -> 2, ConsistencyError -> 3,
NumericalError -> 4.
"""


class ScopedError(Exception):
    """Base class for all package errors."""


class InputError(ScopedError):
    """Invalid user input: bad config values, missing files, shape mismatches."""


class ConsistencyError(ScopedError):
    """Artifacts that do not belong together, e.g. fingerprint mismatches."""


class NumericalError(ScopedError):
    """Non-finite values where finite ones are required (diverged training,
    too many scoring failures)."""


class ScoringFailure(NumericalError):
    """A single sample produced non-finite intermediates while being scored.

    Batch-level callers catch this and record the sample as failed instead
    of aborting the whole run.
    """

    def __init__(self, sample_index, noise_level, reason):
        self.sample_index = sample_index
        self.noise_level = noise_level
        self.reason = reason
        super().__init__(
            f"sample {sample_index} at noise level {noise_level}: {reason}"
        )
