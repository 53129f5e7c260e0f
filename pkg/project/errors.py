from typing import Optional


class HeftError(Exception):
    """
    Base class for every error raised by the HEFT lab. Subclasses also inherit the
    closest builtin exception so callers may catch either.
    """


class ShapeError(HeftError, ValueError):
    pass


class VocabularyError(HeftError, IndexError):
    pass


class SequenceLengthError(HeftError, ValueError):
    def __init__(self, message: str, length: int):
        super().__init__(message)
        self.length = length


class AdapterError(HeftError, ValueError):
    pass


class InterventionError(HeftError, ValueError):
    pass


class GenerationError(HeftError, ValueError):
    pass


class DatasetFormatError(HeftError, ValueError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class TrainingError(HeftError, RuntimeError):
    def __init__(
        self,
        message: str,
        parameter: Optional[str] = None,
        step: Optional[int] = None,
    ):
        super().__init__(message)
        self.parameter = parameter
        self.step = step


class CheckpointFormatError(HeftError, ValueError):
    pass


class ExperimentError(HeftError, RuntimeError):
    pass
