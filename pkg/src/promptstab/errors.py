"""Exception hierarchy shared across promptstab modules."""

from __future__ import annotations


class PromptStabError(Exception):
    """Base class for all promptstab errors."""


class ConfigError(PromptStabError, ValueError):
    """Invalid configuration or malformed input file."""


class ParseError(ConfigError):
    """A file could not be parsed into the expected structure."""


class PlaceholderError(ConfigError):
    """A prompt's placeholders do not match what is required."""


class PlaceholderMismatch(PlaceholderError):
    """A variant in a variant set does not share the base placeholders."""

    def __init__(self, index: int, message: str = "") -> None:
        self.index = index
        super().__init__(message or f"placeholder-mismatch({index})")


class BackendError(PromptStabError):
    """Base class for failures raised while obtaining predictions."""


class BackendUnavailable(BackendError):
    """Transport failure persisted after all retries."""


class InvalidOutput(BackendError):
    """Model text could not be mapped onto the task's label set."""

    def __init__(self, example_id: str | None, raw_output: str, reason: str = "") -> None:
        self.example_id = example_id
        self.raw_output = raw_output
        self.reason = reason
        detail = f": {reason}" if reason else ""
        super().__init__(f"invalid-output({example_id!r}, {raw_output[:80]!r}){detail}")


class VariantGenerationError(PromptStabError):
    """Could not obtain enough distinct placeholder-preserving paraphrases."""


class CandidateGenerationError(PromptStabError):
    """Could not obtain enough distinct valid candidate prompts."""


class MetricError(PromptStabError, ValueError):
    """A metric was asked for on inputs that cannot support it."""


class EmptyInputError(MetricError):
    pass


class MissingProbsError(MetricError):
    pass


class LengthMismatchError(MetricError):
    pass


class DegenerateInputError(MetricError):
    """A statistic is undefined for the input (e.g. a constant vector)."""
