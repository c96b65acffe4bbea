"""Exception hierarchy. The CLI maps each class to an exit code."""


class PersonaRankError(Exception):
    """Base class for all package errors."""


class DataError(PersonaRankError, ValueError):
    """Malformed input files, inconsistent dimensions, missing records."""


class ParseError(PersonaRankError, ValueError):
    """An LLM response could not be parsed into the expected scores."""


class BackendError(PersonaRankError):
    """The LLM backend failed after exhausting its retry budget."""

    def __init__(self, message: str, qid: str | None = None):
        super().__init__(message if qid is None else f"{message} (qid={qid})")
        self.qid = qid


class TrainingError(PersonaRankError):
    """Training diverged (non-finite loss)."""
