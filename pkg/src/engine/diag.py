"""
Training-pathology instruments: NTK eigen-spectra, gradient histograms,
temporal residual profiles and the spectral-bias regression experiment.

Nothing here runs inside the training hot loop unless diagnostics are
requested at a logging interval.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import ParamVector, Tape, per_sample_gradients
from .config import FourierConfig, NetworkConfig
from .errors import BatchTooLarge, EmptyBatch
from .nets import Network, build_network
from .problems import ProblemSpec, residual_values, term_outputs
from .weighting import TermFn

logger = logging.getLogger(__name__)

MAX_SPECTRUM_BATCH = 200
HISTOGRAM_EDGES = np.logspace(-12, 2, 29)


# ========== NTK ==========


def ntk_jacobian(net: Network, params: ParamVector, term_fn: TermFn, batch: np.ndarray) -> np.ndarray:
    tape = Tape()
    nodes = tape.bind_params(params)
    return per_sample_gradients(tape, term_fn(net, nodes, batch))


def ntk_spectrum(net: Network, params: ParamVector, term_fn: TermFn, batch: np.ndarray) -> np.ndarray:
    """Eigenvalues of the per-sample gradient Gram matrix, largest first"""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise EmptyBatch("NTK spectrum needs at least one sample")
    if batch.shape[0] > MAX_SPECTRUM_BATCH:
        raise BatchTooLarge(
            f"NTK spectrum batch of {batch.shape[0]} exceeds the limit of {MAX_SPECTRUM_BATCH}.\n"
            "The Gram matrix is assembled densely; use ntk_trace for larger batches."
        )
    jac = ntk_jacobian(net, params, term_fn, batch)
    gram = jac @ jac.T
    return np.sort(np.linalg.eigvalsh(gram))[::-1]


def term_spectra(
    problem: ProblemSpec, net: Network, params: ParamVector, batch: int, seed: int = 0
) -> Dict[str, Dict[str, Any]]:
    """NTK spectra of the initial-condition and residual terms on fixed random points"""
    rng = np.random.default_rng([seed, 7])
    (t0, t1), (x_lo, x_hi) = problem.t_span, problem.x_span
    ic_x = x_lo + rng.random(batch) * (x_hi - x_lo)
    ic_points = np.column_stack([np.full(batch, t0), ic_x])
    samples = {term: ic_points for term in problem.ic_terms}
    samples["r"] = np.column_stack([t0 + rng.random(batch) * (t1 - t0), x_lo + rng.random(batch) * (x_hi - x_lo)])
    out = {}
    for term, points in samples.items():
        eigenvalues = ntk_spectrum(net, params, term_outputs(problem, term), points)
        out[term] = {"eigenvalues": eigenvalues.tolist(), "trace": float(eigenvalues.sum())}
    return out


# ========== GRADIENTS ==========


def grad_histogram(grads: Any) -> Dict[str, Any]:
    """
    Counts of |g| over fixed log-spaced bins on [1e-12, 1e2].

    Entries below the range (zeros included) land in ``underflow``, entries
    above in ``overflow``; all counts add up to the parameter count.
    """
    flat = np.abs(np.asarray(getattr(grads, "flat", grads), dtype=np.float64).reshape(-1))
    counts, _ = np.histogram(flat, bins=HISTOGRAM_EDGES)
    underflow = int(np.sum(flat < HISTOGRAM_EDGES[0]))
    overflow = int(np.sum(flat > HISTOGRAM_EDGES[-1]))
    return {
        "edges": HISTOGRAM_EDGES.tolist(),
        "counts": counts.astype(int).tolist(),
        "underflow": underflow,
        "overflow": overflow,
        "total": int(flat.size),
        "norm": float(np.linalg.norm(flat)),
        "max_abs": float(flat.max()) if flat.size else 0.0,
    }


def term_gradients(problem: ProblemSpec, net: Network, params: ParamVector, config, seed: int = 0) -> Dict[str, Dict[str, Any]]:
    """Histograms of the unweighted loss-term gradients on one training batch"""
    from .train import evaluate_losses, sample_batch
    from .weighting import LossWeights

    rng = np.random.default_rng([seed, 8])
    batch = sample_batch(rng, problem, config)
    weights = LossWeights.initial(problem.loss_terms, config.weighting.chunks, epsilon=config.weighting.causal_tol)
    tape, breakdown = evaluate_losses(problem, net, params, batch, weights, config.weighting.causal)
    return {name: grad_histogram(tape.param_gradient(node)) for name, node in breakdown.nodes().items()}


# ========== TEMPORAL PROFILE ==========


def temporal_residual_profile(
    net: Network,
    params: ParamVector,
    problem: ProblemSpec,
    chunks: int,
    n_x: int = 256,
    points_per_chunk: int = 4,
) -> np.ndarray:
    """
    Mean squared residual per temporal chunk on a fixed dense grid.

    Each chunk uses ``points_per_chunk`` midpoint times crossed with ``n_x``
    uniform spatial points, so the profile's mean equals the unchunked loss on
    the same points.
    """
    if chunks < 2:
        raise ValueError(f"A temporal profile needs at least two chunks, got {chunks}")
    t0, t1 = problem.t_span
    width = (t1 - t0) / chunks
    xs = np.linspace(problem.x_span[0], problem.x_span[1], n_x, endpoint=not problem.periodic)
    offsets = (np.arange(points_per_chunk) + 0.5) / points_per_chunk * width
    profile = np.zeros(chunks)
    for i in range(chunks):
        tt, xx = np.meshgrid(t0 + i * width + offsets, xs, indexing="ij")
        coords = np.column_stack([tt.reshape(-1), xx.reshape(-1)])
        tape = Tape(grad_enabled=False)
        nodes = tape.bind_params(params)
        residual = residual_values(problem, net, nodes, coords).value
        profile[i] = float(np.mean(residual * residual))
    return profile


# ========== SPECTRAL BIAS ==========


@dataclass
class SpectralBiasResult:
    """Iterations until each target component's error halves; None if it never did"""

    seed: int
    half_life: Dict[int, Optional[int]]
    history: Dict[int, List[float]] = field(default_factory=dict)

    def gap(self, low: int, high: int, budget: int) -> float:
        lo = self.half_life[low] if self.half_life[low] is not None else budget
        hi = self.half_life[high] if self.half_life[high] is not None else budget
        return float(hi - lo)


def _component_errors(residual: np.ndarray, frequencies: Sequence[int]) -> Dict[int, float]:
    spectrum = np.fft.rfft(residual) * (2.0 / residual.size)
    return {k: float(np.abs(spectrum[k])) for k in frequencies}


def spectral_bias_run(
    seed: int,
    frequencies: Sequence[int] = (1, 8),
    fourier_scale: Optional[float] = None,
    steps: int = 2000,
    learning_rate: float = 1e-3,
    width: int = 128,
    depth: int = 3,
    n_points: int = 256,
    record_every: int = 10,
) -> SpectralBiasResult:
    """
    Regress Σ sin(k x) on [0, 2π) with full-batch gradient descent and track the
    error of every Fourier component of the target.
    """
    config = NetworkConfig(
        arch="plain",
        depth=depth,
        width=width,
        activation="tanh",
        coords=["x"],
        fourier=FourierConfig(scale=fourier_scale) if fourier_scale is not None else None,
    )
    net = build_network(config, seed)
    xs = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    target = sum(np.sin(k * xs) for k in frequencies)
    coords = xs[:, None]

    params = net.params
    initial: Dict[int, float] = {}
    half_life: Dict[int, Optional[int]] = {k: None for k in frequencies}
    history: Dict[int, List[float]] = {k: [] for k in frequencies}
    for step in range(steps + 1):
        tape = Tape()
        nodes = tape.bind_params(params)
        pred = net.jets(nodes, coords, {}).value(0)
        diff = pred - target
        loss = (diff * diff).mean()
        errors = _component_errors(diff.value, frequencies)
        if step == 0:
            initial = errors
        for k, err in errors.items():
            if half_life[k] is None and err <= 0.5 * initial[k]:
                half_life[k] = step
            if step % record_every == 0:
                history[k].append(err)
        if step == steps or all(h is not None for h in half_life.values()):
            break
        grad = tape.param_gradient(loss)
        params = params.with_flat(params.flat - learning_rate * grad)
    logger.info(f"Spectral bias seed={seed} fourier={fourier_scale}: half-lives {half_life}")
    return SpectralBiasResult(seed=seed, half_life=half_life, history=history)
