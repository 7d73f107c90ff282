"""Exception hierarchy.

Everything raised on bad input derives from :class:`ValidationError` (CLI exit
code 2); failures of the sampler itself derive from :class:`SamplingError`
(CLI exit code 3).
"""


class SaeError(Exception):
    """Base class for all package errors."""


class ValidationError(SaeError, ValueError):
    """Input data or configuration is invalid."""


class SamplingError(SaeError, RuntimeError):
    """A sampler or optimizer failed at run time."""


# graph
class GraphError(ValidationError):
    pass


class SelfLoopError(GraphError):
    pass


class DuplicateEdgeError(GraphError):
    pass


class IsolatedRegionError(GraphError):
    pass


class DisconnectedGraphError(GraphError):
    pass


class WeightedAdjacencyError(GraphError):
    pass


# priors
class RhoOutOfRangeError(ValidationError):
    pass


class NonPositiveScaleError(ValidationError):
    pass


class SigmaNotPDError(ValidationError):
    pass


# autodiff
class ShapeMismatchError(ValidationError):
    pass


class UnboundInputError(ValidationError):
    pass


class NonScalarLossError(ValidationError):
    pass


# vae / artifacts
class DimMismatchError(ShapeMismatchError):
    pass


class NonFiniteLossError(SamplingError):
    pass


class VersionUnsupportedError(ValidationError):
    pass


class CorruptFileError(ValidationError):
    pass


class HashMismatchError(ValidationError):
    pass


# models
class KMismatchError(ValidationError):
    pass


class SingularDesignError(ValidationError):
    pass


# hmc
class AllDivergentError(SamplingError):
    pass


class NonFiniteInitError(SamplingError):
    pass


class TooFewDrawsError(ValidationError):
    pass


# harness
class NonPositiveEstimateError(ValidationError):
    pass


class BadLevelError(ValidationError):
    pass


class InvertedIntervalError(ValidationError):
    pass
