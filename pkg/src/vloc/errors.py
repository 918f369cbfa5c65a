"""Exception hierarchy shared across the package."""

from __future__ import annotations


class VlocError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(VlocError):
    """Ill-posed geometric input (degenerate motion, bad depth, ...)."""


class NonPositiveDepth(GeometryError):
    """Point does not lie strictly in front of the camera."""


class DegenerateTranslation(GeometryError):
    """Relative translation too small to define an essential matrix."""


class ParallelRays(GeometryError):
    """Triangulation rays are parallel within tolerance."""


class ZeroGradient(GeometryError):
    """Sampson denominator vanished; the residual gradient is zero."""


class EstimationError(VlocError):
    """A robust estimation or reconstruction step could not produce a model."""


class InsufficientCorrespondences(EstimationError):
    """Fewer correspondences than the minimal sample requires."""


class DegenerateConfiguration(EstimationError):
    """Point configuration leaves the model underdetermined."""


class NoModelFound(EstimationError):
    """RANSAC finished without a model meeting the inlier requirement."""


class CheiralityAmbiguity(EstimationError):
    """Essential decomposition candidates tie in the cheirality vote."""


class RegistrationFailed(EstimationError):
    """PnP registration produced fewer inliers than the minimum."""


class NoInitPair(EstimationError):
    """No candidate pair qualifies to bootstrap a reconstruction."""


class SingularNormalEquations(EstimationError):
    """Bundle adjustment normal equations unusable even under damping."""


class MatchingError(VlocError):
    """Invalid matching input (points outside domains, missing warps)."""


class OutOfDomain(MatchingError):
    """Point lies outside the source coordinate domain."""


class OutOfCrop(MatchingError):
    """Point lies outside the warp's source crop."""


class MissingCropCombination(MatchingError):
    """A required crop combination has no warp."""


class DataError(VlocError):
    """Malformed or inconsistent pipeline data."""


class DimensionMismatch(DataError):
    """Embedding vectors disagree in dimension."""


class MissingWarp(DataError):
    """No warp available for a requested frame pair."""


class MissingEstimate(DataError):
    """A consecutive pair has neither a two-view estimate nor a failure flag."""


class CoverageMismatch(DataError):
    """Estimated and ground-truth motion sets cover different pairs."""


class FormatError(DataError):
    """File content violates its declared binary or text format."""
