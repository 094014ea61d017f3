"""Error types raised across the package."""
from __future__ import annotations


class RoadPrivError(Exception):
    """Base class for all package errors."""


# graph construction and queries
class DuplicateNode(RoadPrivError, ValueError):
    pass


class DanglingEdge(RoadPrivError, ValueError):
    pass


class NonPositiveWeight(RoadPrivError, ValueError):
    pass


class EmptyGraph(RoadPrivError, ValueError):
    pass


class EmptyResult(RoadPrivError, ValueError):
    pass


class UnknownNode(RoadPrivError, KeyError):
    pass


class InvalidCoordinate(RoadPrivError, ValueError):
    pass


# mechanisms
class InvalidEpsilon(RoadPrivError, ValueError):
    pass


class EmptySupport(RoadPrivError, ValueError):
    pass


class SupportTooLarge(RoadPrivError, ValueError):
    pass


class InfiniteCost(RoadPrivError, ValueError):
    pass


class DimensionMismatch(RoadPrivError, ValueError):
    pass


class UnknownRow(RoadPrivError, KeyError):
    pass


class Infeasible(RoadPrivError, RuntimeError):
    pass


InfeasibleLP = Infeasible


class SolverTimeout(RoadPrivError, RuntimeError):
    pass


class NotStochastic(RoadPrivError, ValueError):
    pass


class GeoIndViolation(RoadPrivError, ValueError):
    pass


# neural kernels
class NonFinite(RoadPrivError, FloatingPointError):
    pass


class OddDimension(RoadPrivError, ValueError):
    pass


# attacks and defense
class ShapeMismatch(RoadPrivError, ValueError):
    pass


class EmptyCandidateSet(RoadPrivError, ValueError):
    pass


class UntrainedModel(RoadPrivError, RuntimeError):
    pass


class DegenerateSlot(RoadPrivError, RuntimeError):
    """Posterior mass vanished at a slot. Handled by a fallback, also logged."""


class MatrixMissing(RoadPrivError, ValueError):
    pass


class LengthMismatch(RoadPrivError, ValueError):
    pass


class EmptyCorpus(RoadPrivError, ValueError):
    pass


class AllZeroColumn(RoadPrivError, ValueError):
    pass


class AllPathsZero(RoadPrivError, ValueError):
    pass


class SinkNode(RoadPrivError, ValueError):
    pass


# serialization and harness
class FormatError(RoadPrivError, ValueError):
    pass


class ConfigError(RoadPrivError, ValueError):
    pass


class MalformedRow(RoadPrivError, ValueError):
    pass


class EmptyAfterFilter(RoadPrivError, ValueError):
    pass
