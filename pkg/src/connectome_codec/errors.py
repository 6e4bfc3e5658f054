"""Exception types shared across the package."""


class CodecError(Exception):
    """Base class for all package errors."""


class MalformedRow(CodecError):
    """A CSV row has the wrong column count or an unparseable field."""


class UnknownLabel(CodecError):
    """A neurotransmitter label outside the four known types."""


class DanglingEdge(CodecError):
    """An edge references a neuron id that is not in the table."""


class InvalidMix(CodecError):
    """Label proportions do not sum to 1."""


class UnsatisfiableCenter(CodecError):
    """No cylinder radius at this center encloses an acceptable neuron count."""


class ExhaustedRetries(CodecError):
    """The center retry budget ran out; the table is too sparse or clumped."""


class TooManyNodes(CodecError):
    """More real nodes than the fixed subgraph size."""


class InsufficientSamples(CodecError):
    """Too few samples for the requested estimator."""


class ShapeMismatch(CodecError):
    """Tensor shapes are inconsistent with the model configuration."""


class NonFiniteLoss(CodecError):
    """Training produced a NaN or infinite loss.

    Carries enough context to replay the offending batch.
    """

    def __init__(self, phase: str, epoch: int, batch_indices: list[int]):
        super().__init__(
            f"non-finite loss in phase {phase!r}, epoch {epoch}, "
            f"batch indices {batch_indices}"
        )
        self.phase = phase
        self.epoch = epoch
        self.batch_indices = batch_indices


class InsufficientValidPairs(CodecError):
    """Too few training pairs with a defined target value."""


class EmptyTable(CodecError):
    """Every cell of a binned attribution table fell below the count floor."""


class GridOverflow(CodecError):
    """A contribution falls outside the target grid even after widening."""


class NoReachableCell(CodecError):
    """The assignment table has no reachable target cell."""
