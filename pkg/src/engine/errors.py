"""Exception hierarchy for the PINN training engine"""

from typing import Optional


class PinnError(Exception):
    """Base class for every error raised by the engine"""


# ========== VALIDATION ERRORS ==========


class ShapeError(PinnError, ValueError):
    """Array or feature dimensions do not line up"""


class InvalidPeriod(PinnError, ValueError):
    """A periodic embedding was given a nonpositive period"""


class InvalidLoss(PinnError, ValueError):
    """A loss value is negative or non-finite"""


class InvalidScale(PinnError, ValueError):
    """A characteristic scale is nonpositive"""


class InvalidNode(PinnError, ValueError):
    """A tape index does not name a recorded scalar"""


class InvalidProblem(PinnError, ValueError):
    """A problem definition violates its domain or order invariants"""


class EmptyBatch(PinnError, ValueError):
    """A loss term was asked to average over zero samples"""


class BatchTooLarge(PinnError, ValueError):
    """A dense diagnostic was requested on too many samples"""


class AlreadyFactorized(PinnError, ValueError):
    """Random weight factorization applied twice to the same network"""


# ========== NUMERICAL ERRORS ==========


class NumericalOverflow(PinnError, ArithmeticError):
    """Non-finite values appeared while propagating through a layer"""

    def __init__(self, message: str, layer: Optional[int] = None):
        super().__init__(message)
        self.layer = layer


class NonFiniteGradient(PinnError, ArithmeticError):
    """The optimizer received a gradient containing NaN or Inf"""

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DegenerateGradient(PinnError, ArithmeticError):
    """A loss term has a vanishing gradient norm, so it cannot be balanced"""

    def __init__(self, message: str, terms: Optional[list] = None):
        super().__init__(message)
        self.terms = terms or []


class DegenerateKernel(PinnError, ArithmeticError):
    """A loss term has a vanishing NTK trace, so it cannot be balanced"""

    def __init__(self, message: str, terms: Optional[list] = None):
        super().__init__(message)
        self.terms = terms or []


class DegenerateReference(PinnError, ArithmeticError):
    """Relative error requested against a reference with zero norm"""


# ========== RUNTIME ERRORS ==========


class SolverDiverged(PinnError, RuntimeError):
    """The reference solver produced an unbounded solution"""


class CheckpointError(PinnError, RuntimeError):
    """A checkpoint file is corrupt or incompatible with the requested layout"""

    def __init__(
        self,
        message: str,
        version: Optional[int] = None,
        expected_version: Optional[int] = None,
    ):
        super().__init__(message)
        self.version = version
        self.expected_version = expected_version


class MarchAborted(PinnError, RuntimeError):
    """A time-marching window failed; completed windows are kept on ``result``"""

    def __init__(self, message: str, result=None, window: Optional[int] = None):
        super().__init__(message)
        self.result = result
        self.window = window
