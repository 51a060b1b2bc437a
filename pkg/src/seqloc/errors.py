"""Exception types raised across the seqloc pipeline."""

from __future__ import annotations


class SeqlocError(Exception):
    """Base class for all seqloc errors."""


class InvalidConfig(SeqlocError):
    """A configuration value or combination is unusable."""


class NonPositiveDepth(SeqlocError):
    """A point with z <= 0 cannot be projected."""


class NonPositiveDisparity(SeqlocError):
    """A measurement with d <= 0 cannot be backprojected."""


class CorruptDataset(SeqlocError):
    """A dataset file is missing, truncated, or malformed."""


class BadGeometry(SeqlocError):
    """Image or patch dimensions do not fit the requested operation."""


class SequenceTooShort(SeqlocError):
    """Fewer frames than the sequence search needs."""


class MissingVO(SeqlocError):
    """A frame is missing its odometry edge."""


class NoPath(SeqlocError):
    """The experience graph has no route between the requested vertices."""


class EmptyCorrespondences(SeqlocError):
    """No usable (non-rejected) correspondences to draw from."""


class OutOfBounds(SeqlocError):
    """A sample coordinate lies outside the image."""


class DegenerateGeometry(SeqlocError):
    """Point configuration does not determine a rigid transform."""


class NoConsensus(SeqlocError):
    """RANSAC found no consensus set of at least minimal size."""


class TooFewValidDepths(SeqlocError):
    """Not enough matches with usable disparity to attempt a fit."""


class NonFiniteGradient(SeqlocError):
    """A training gradient contains NaN or infinity."""
