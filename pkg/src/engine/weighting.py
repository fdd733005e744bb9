"""
Adaptive loss weighting: causal temporal weights, grad-norm and NTK-trace
global weights, and their moving-average refresh.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .autodiff import Node, ParamVector, Tape, per_sample_gradients, stop_gradient
from .errors import DegenerateGradient, DegenerateKernel, EmptyBatch, InvalidLoss

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12
RESIDUAL_TERM = "r"


@dataclass
class LossWeights:
    """Global weights per loss term plus temporal weights over M chunks"""

    lambdas: Dict[str, float]
    w: np.ndarray
    epsilon: float = 1.0
    alpha: float = 0.9
    update_every: int = 1000

    @classmethod
    def initial(
        cls,
        terms: Sequence[str],
        chunks: int,
        epsilon: float = 1.0,
        alpha: float = 0.9,
        update_every: int = 1000,
    ) -> "LossWeights":
        return cls(
            lambdas={name: 1.0 for name in terms},
            w=np.ones(chunks),
            epsilon=epsilon,
            alpha=alpha,
            update_every=update_every,
        )

    @property
    def chunks(self) -> int:
        return int(self.w.size)

    @property
    def min_w(self) -> float:
        return float(np.min(self.w))

    @property
    def mean_w(self) -> float:
        return float(np.mean(self.w))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambdas": dict(self.lambdas),
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "update_every": self.update_every,
            "chunks": self.chunks,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], w: np.ndarray) -> "LossWeights":
        return cls(
            lambdas={k: float(v) for k, v in data["lambdas"].items()},
            w=np.array(w, dtype=np.float64),
            epsilon=float(data["epsilon"]),
            alpha=float(data["alpha"]),
            update_every=int(data["update_every"]),
        )


@dataclass
class LossBreakdown:
    """
    Per-term loss nodes of one batch.

    ``residual`` is built as the mean over chunks of ``stop_gradient(w_i) * L_i``.
    """

    terms: Dict[str, Node]
    chunk_losses: Node
    w: np.ndarray
    residual: Node = field(init=False)

    def __post_init__(self):
        frozen = stop_gradient(self.chunk_losses.tape.constant(self.w))
        self.residual = (frozen * self.chunk_losses).mean()

    @property
    def chunk_values(self) -> np.ndarray:
        return np.asarray(self.chunk_losses.value, dtype=np.float64)

    def nodes(self) -> Dict[str, Node]:
        out = dict(self.terms)
        out[RESIDUAL_TERM] = self.residual
        return out

    def values(self) -> Dict[str, float]:
        return {name: float(node.value) for name, node in self.nodes().items()}


# ========== TEMPORAL WEIGHTS ==========


def causal_weights(chunk_losses: Sequence[float], epsilon: float) -> np.ndarray:
    """w_i = exp(-ε · sum of the losses of all earlier chunks); w_0 = 1"""
    if not epsilon > 0:
        raise ValueError(f"Causal tolerance must be positive, got {epsilon}")
    losses = np.asarray(chunk_losses, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(losses)) or np.any(losses < 0):
        raise InvalidLoss(
            f"Chunk losses must be finite and nonnegative, got {losses.tolist()}"
        )
    prefix = np.concatenate([[0.0], np.cumsum(losses)[:-1]])
    return np.exp(-epsilon * prefix)


def chunk_index(t: np.ndarray, t_span: Tuple[float, float], chunks: int) -> np.ndarray:
    """Chunk of each time: floor(M (t - t0) / T), clamped to M - 1 at the end"""
    t0, t1 = t_span
    idx = np.floor(chunks * (np.asarray(t) - t0) / (t1 - t0)).astype(int)
    return np.clip(idx, 0, chunks - 1)


# ========== GLOBAL WEIGHTS ==========


def _balance(stats: Mapping[str, float]) -> Tuple[Dict[str, float], List[str]]:
    total = float(sum(stats.values()))
    hats, skipped = {}, []
    for name, value in stats.items():
        if value < DEGENERATE_TOL:
            skipped.append(name)
            continue
        hats[name] = total / value
    return hats, skipped


def grad_norm_lambdas(grad_norms: Mapping[str, float]) -> Dict[str, float]:
    """λ̂_i = (Σ_j ‖∇L_j‖) / ‖∇L_i‖, so every weighted gradient norm equals the sum"""
    hats, skipped = _balance(grad_norms)
    if skipped:
        raise DegenerateGradient(
            f"Vanishing gradient norm for terms: {', '.join(skipped)}.\n"
            "The training loop keeps the previous weight for these terms.",
            terms=skipped,
        )
    return hats


def ntk_lambdas(traces: Mapping[str, float]) -> Dict[str, float]:
    """λ̂_i = (Σ_j Tr K_j) / Tr K_i"""
    hats, skipped = _balance(traces)
    if skipped:
        raise DegenerateKernel(
            f"Vanishing NTK trace for terms: {', '.join(skipped)}.\n"
            "The training loop keeps the previous weight for these terms.",
            terms=skipped,
        )
    return hats


def ema_update(old: Mapping[str, float], new_hat: Mapping[str, float], alpha: float) -> Dict[str, float]:
    """λ ← α λ + (1 − α) λ̂ for every term present in ``new_hat``"""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"Moving-average factor must lie in [0, 1], got {alpha}")
    out = dict(old)
    for name, hat in new_hat.items():
        out[name] = alpha * old.get(name, 1.0) + (1.0 - alpha) * hat
    return out


def refresh_lambdas(weights: LossWeights, stats: Mapping[str, float]) -> LossWeights:
    """Balance on ``stats`` (grad norms or traces), skipping degenerate terms, then EMA"""
    hats, skipped = _balance(stats)
    if skipped:
        logger.warning(f"Skipping λ update for degenerate terms: {', '.join(skipped)}")
    lambdas = ema_update(weights.lambdas, hats, weights.alpha)
    return replace(weights, lambdas=lambdas)


def should_refresh(step: int, update_every: int) -> bool:
    return step % update_every == 0


def total_loss(breakdown: LossBreakdown, weights: LossWeights) -> Node:
    """Σ λ_i L_i with every weight frozen"""
    tape = breakdown.residual.tape
    loss = None
    for name, node in breakdown.nodes().items():
        lam = stop_gradient(tape.constant(weights.lambdas.get(name, 1.0)))
        term = lam * node
        loss = term if loss is None else loss + term
    return loss


def grad_norms(tape: Tape, breakdown: LossBreakdown) -> Dict[str, float]:
    """‖∇θ L_i‖ for each unweighted term; one reverse sweep per term"""
    return {
        name: float(np.linalg.norm(tape.param_gradient(node)))
        for name, node in breakdown.nodes().items()
    }


# ========== NTK ==========

TermFn = Callable[[Any, Mapping[str, Node], Any], Node]


def ntk_trace(net: Any, params: ParamVector, term_fn: TermFn, batch: Any) -> float:
    """
    Σ_i ‖∂ o_i / ∂θ‖², the trace of the NTK block of one loss term.

    ``term_fn(net, nodes, batch)`` returns the per-sample outputs ``o``: the
    network value for data terms, the residual operator for the PDE term.
    """
    if batch is None or len(batch) == 0:
        raise EmptyBatch("NTK trace needs at least one sample")
    tape = Tape()
    nodes = tape.bind_params(params)
    outputs = term_fn(net, nodes, batch)
    jac = per_sample_gradients(tape, outputs)
    return float(np.sum(jac * jac))
