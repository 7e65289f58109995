"""Exception types shared across the package, ordered roughly by pipeline stage."""

from __future__ import annotations


class VoilabError(ValueError):
    """Base class for all package-specific errors."""


# --- simulator ---

class EmptyEligibleSet(VoilabError):
    """No ad is eligible for an impression, so no allocation or policy choice exists."""


class InvalidBidQuality(VoilabError):
    """An eligible ad has nonpositive bid*quality."""


class IneligibleAction(VoilabError):
    """A policy chose an ad outside the impression's eligible set."""


# --- feature pipeline ---

class InvalidTime(VoilabError):
    """Hour or minute outside its valid range."""


class OrderingViolation(VoilabError):
    """A user's rows arrived out of timestamp order."""


# --- reward models ---

class DimensionError(VoilabError):
    """Tensor shapes inconsistent with the model configuration."""


class InvalidTimeGap(VoilabError):
    """Negative inter-impression time gap."""


class LabelError(VoilabError):
    """A training label is not in {0, 1}."""


class NumericalError(VoilabError):
    """A loss or gradient evaluated to a non-finite value."""


class EmptyInput(VoilabError):
    """An operation received no rows."""


# --- propensity / policy evaluation ---

class DataInconsistency(VoilabError):
    """A logged shown ad is marked ineligible by the rebuilt eligibility matrix."""


class SupportViolation(VoilabError):
    """A matched impression has zero estimated propensity."""


class WeightingError(VoilabError):
    """A shown ad carries zero propensity, so inverse weighting is undefined."""


# --- delta tests ---

class AlignmentError(VoilabError):
    """Per-regime term lists do not cover identical impressions in identical order."""


class BinningError(VoilabError):
    """Requested bin count exceeds the distinct depth support."""


# --- spatial statistics ---

class ZeroVariance(VoilabError):
    """Residuals are constant; autocorrelation statistics are undefined."""


class DegenerateGeometry(VoilabError):
    """Too few distinct centroids to build a weight matrix."""


class InsufficientRegions(VoilabError):
    """Region count after flooring is too small for spatial testing."""
