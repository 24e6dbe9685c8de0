"""Exception types shared across the engine.

Every module raises one of these instead of bare ValueError so callers
(and the CLI exit-code mapping) can tell usage mistakes apart from
correctness failures.
"""


class TinferError(Exception):
    """Base class for all engine errors."""


class DimensionError(TinferError):
    """Tensor shapes do not line up for the requested operation."""


class PrecisionError(TinferError):
    """Mixed F16/F32 operands where a single dtype is required."""


class NumericError(TinferError):
    """Non-finite values where finite ones are required."""


class ConfigError(TinferError):
    """Model configuration violates its invariants."""


class VocabError(TinferError):
    """Bad vocabulary: duplicates, empty tokens, or out-of-range ids."""


class PositionError(TinferError):
    """Sequence position beyond the model's position table."""


class CapacityError(TinferError):
    """KV cache is full."""


class ParameterError(TinferError):
    """Operation parameter outside its documented range."""


class FormatError(TinferError):
    """Malformed weight/vocab/dataset file."""


class GraphError(TinferError):
    """Malformed operator graph."""


class PlanError(TinferError):
    """Arena plan violates lifetime disjointness."""


class BindingError(TinferError):
    """Graph execution is missing an input or weight binding."""


class CorrectnessError(TinferError):
    """An equivalence oracle failed; results must not be trusted or timed."""
