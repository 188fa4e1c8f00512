"""Shared exception types."""


class FedidsError(Exception):
    """Base class for all package errors."""


class ValidationError(FedidsError):
    """A config or argument violates a documented constraint.

    Carries one message per offending field so callers can report every
    problem at once instead of failing on the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ParseError(FedidsError):
    """A text line did not match the expected grammar."""


class CorpusError(FedidsError):
    """A corpus directory, manifest, or trace file is unusable."""
