"""Exception hierarchy shared by the whole toolkit.

Three branches map onto the CLI exit-code contract: usage errors (1),
data errors such as unreadable or malformed files (2), and invariant
violations in otherwise well-formed inputs (3).
"""

from __future__ import annotations


class ToolError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3


class UsageError(ToolError):
    """Bad flags or flag values; rejected before any computation."""

    exit_code = 1


class DataError(ToolError):
    """A file or document could not be read or decoded."""

    exit_code = 2


class InvariantError(ToolError):
    """Well-formed input that violates a documented invariant."""

    exit_code = 3


# --- feature-dump / tensor container ---------------------------------------

class BadMagic(DataError):
    """File does not start with the dump magic."""


class UnsupportedVersion(DataError):
    """Unknown container version, dtype code, or reserved byte."""


class TruncatedPayload(DataError):
    """Declared payload size disagrees with the file length."""


class NonFiniteData(DataError):
    """NaN or Inf encountered in tensor data."""


class IoFailure(DataError):
    """Underlying OS-level read/write failure."""


class InvariantViolation(InvariantError):
    """A domain-type invariant does not hold."""


class IndexOutOfRange(InvariantError, IndexError):
    """Batch or channel index outside the valid range."""


# --- frequency --------------------------------------------------------------

class InvalidSigma(InvariantError, ValueError):
    """Gaussian sigma must be a positive finite real."""


class InvalidSize(InvariantError, ValueError):
    """Kernel size must be an odd integer >= 1."""


# --- planner ----------------------------------------------------------------

class DegeneratePlan(InvariantError):
    """Requested pruning would leave a layer with no channels."""


class MalformedPlan(DataError):
    """Plan document cannot be parsed."""


# --- micronet ---------------------------------------------------------------

class ShapeMismatch(InvariantError):
    """Tensor shapes inconsistent with the layer schema."""


class DivergedLoss(InvariantError):
    """Training produced a non-finite loss."""


class PlanMismatch(InvariantError):
    """Plan layers do not line up with the network's conv layers."""


class EmptySavedSet(InvariantError):
    """A plan layer saves zero channels."""
