"""Exception hierarchy shared across the package.

ValidationError and its subclasses mean the caller handed us something
malformed (bad flag values, broken data files, mismatched inputs) and map
to CLI exit code 1.  Everything else that escapes is a runtime failure
and maps to exit code 2.
"""


class MaclError(Exception):
    pass


class ValidationError(MaclError):
    """Bad user-supplied input: parameters, files, alignment."""


class ParameterError(ValidationError):
    """A numeric or enum argument is outside its documented domain."""


class CorpusFormatError(ValidationError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UndefinedMetricError(ValidationError):
    """The metric has no value on this input (empty corpus, short response)."""


class AlignmentError(ValidationError):
    """References and generations do not share the same example ids."""


class ConfigurationError(ValidationError):
    """Model/trainer configuration is inconsistent with the data."""


class VocabularyError(ValidationError):
    """A token id or surface falls outside the vocabulary."""


class StaleCacheError(ValidationError):
    """A negatives cache was mined with a different degenerator checkpoint."""


class NumericError(MaclError):
    """A loss or gradient became non-finite."""
