"""Domain exceptions for the quantification pipeline.

Each exception also derives from the builtin a caller would naturally catch
(ValueError, FileNotFoundError, ArithmeticError), so code written against the
builtins keeps working.
"""

from __future__ import annotations

from typing import Optional


class CardiqError(Exception):
    """Base class for every pipeline error."""


class ValidationError(CardiqError, ValueError):
    """Input violates a documented precondition or invariant."""


class NiftiFormatError(ValidationError):
    """Bytes are not a readable single-file NIfTI-1 image."""


class UnsupportedDatatypeError(NiftiFormatError):
    def __init__(self, code: int) -> None:
        super().__init__(f"unsupported NIfTI datatype code {code} (supported: 2=uint8, 4=int16, 16=float32)")
        self.code = code


class TruncatedPayloadError(NiftiFormatError):
    def __init__(self, expected: Optional[int], available: int) -> None:
        if expected is None:
            message = f"compressed stream truncated after {available} bytes"
        else:
            message = f"payload truncated: expected {expected} bytes, found {available}"
        super().__init__(message)
        self.expected = expected
        self.available = available


class CaseNotFoundError(CardiqError, FileNotFoundError):
    """A case directory or one of its required files is missing."""


class InfoCfgParseError(ValidationError):
    def __init__(self, line_number: int, line: str, reason: str = "expected 'Key: value'") -> None:
        super().__init__(f"Info.cfg line {line_number}: {reason}: {line!r}")
        self.line_number = line_number
        self.line = line


class ConsistencyError(ValidationError):
    """Two inputs that must agree (dims, spacing, lengths) do not."""


class InsufficientFramesError(ValidationError):
    """The operation needs more frames than the study has."""


class DegenerateStudyError(ValidationError):
    """The study carries no usable signal (e.g. an all-zero volume curve)."""


class InsufficientDataError(ValidationError):
    """Too few observations for the requested statistic."""


class UndefinedCorrelationError(InsufficientDataError):
    """Pearson r is undefined because one side is constant."""


class DegenerateTestError(InsufficientDataError):
    """The paired t-test is undefined because the differences have zero variance."""


class ModelFormatError(ValidationError):
    """A parameter file is not a readable CDIQ file of a known version."""


class NumericError(CardiqError, ArithmeticError):
    """A computation produced non-finite values."""


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int, loss: Optional[float] = None) -> None:
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
