"""
Training loop and curriculum drivers.

One iteration: draw a fresh batch, evaluate the initial/boundary losses and
the chunked residual loss on one tape, update the causal weights, refresh the
global weights every ``update_every`` steps, then take one Adam step on the
weighted total.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diag
from .autodiff import ParamVector, Tape, loss_grad
from .checkpoint import save_checkpoint
from .config import RunConfig
from .errors import InvalidProblem, MarchAborted, NonFiniteGradient, ShapeError
from .metrics import MetricsRecord, MetricsWriter
from .nets import Network, build_network, predict
from .oracle import FourierInterpolant, GridSolution, evaluate_on_grid, relative_l2, uniform_grid
from .problems import ProblemSpec, bc_loss, ic_component, ic_loss, residual_values, term_outputs
from .weighting import (
    LossBreakdown,
    LossWeights,
    causal_weights,
    chunk_index,
    grad_norms,
    ntk_trace,
    refresh_lambdas,
    should_refresh,
    total_loss,
)

logger = logging.getLogger(__name__)


# ========== OPTIMIZER STATE ==========


@dataclass(frozen=True)
class LearningRateSchedule:
    """η(step) = base · rate^⌊(step − start_step) / decay_steps⌋"""

    base: float = 1e-3
    decay_rate: float = 0.9
    decay_steps: int = 2000
    start_step: int = 0

    def __call__(self, step: int) -> float:
        return self.base * self.decay_rate ** ((step - self.start_step) // self.decay_steps)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base": self.base,
            "decay_rate": self.decay_rate,
            "decay_steps": self.decay_steps,
            "start_step": self.start_step,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LearningRateSchedule":
        return cls(
            base=float(data["base"]),
            decay_rate=float(data["decay_rate"]),
            decay_steps=int(data["decay_steps"]),
            start_step=int(data["start_step"]),
        )


@dataclass(frozen=True)
class AdamSettings:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self) -> Dict[str, Any]:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AdamSettings":
        return cls(beta1=float(data["beta1"]), beta2=float(data["beta2"]), eps=float(data["eps"]))


@dataclass
class TrainState:
    """
    Everything a run needs to continue bit-exactly.

    ``step`` is the global iteration counter and never decreases;
    ``adam_count`` counts updates since the moments were last reset and
    drives bias correction. ``phase_start`` is the step at which the current
    window or continuation stage began; refresh and logging intervals count
    from it.
    """

    params: ParamVector
    m: ParamVector
    v: ParamVector
    weights: LossWeights
    rng: np.random.Generator
    schedule: LearningRateSchedule
    adam: AdamSettings = field(default_factory=AdamSettings)
    step: int = 0
    adam_count: int = 0
    phase_start: int = 0
    last_checkpoint: Optional[str] = None

    def __post_init__(self):
        fingerprint = self.params.layout.fingerprint()
        if self.m.layout.fingerprint() != fingerprint or self.v.layout.fingerprint() != fingerprint:
            raise ShapeError("Adam moments must share the parameter layout")

    @classmethod
    def initial(
        cls,
        net: Network,
        config: RunConfig,
        terms: Sequence[str],
        rng: Optional[np.random.Generator] = None,
        step: int = 0,
    ) -> "TrainState":
        opt, weighting = config.optimizer, config.weighting
        return cls(
            params=net.params,
            m=net.params.zeros_like(),
            v=net.params.zeros_like(),
            weights=LossWeights.initial(
                terms,
                weighting.chunks,
                epsilon=weighting.causal_tol,
                alpha=weighting.alpha,
                update_every=weighting.update_every,
            ),
            rng=rng if rng is not None else np.random.default_rng(config.seed),
            schedule=LearningRateSchedule(opt.learning_rate, opt.decay_rate, opt.decay_steps, start_step=step),
            adam=AdamSettings(opt.beta1, opt.beta2, opt.eps),
            step=step,
            phase_start=step,
        )

    @property
    def learning_rate(self) -> float:
        return self.schedule(self.step)

    def reset_moments(self) -> "TrainState":
        return replace(self, m=self.params.zeros_like(), v=self.params.zeros_like(), adam_count=0)


def adam_step(state: TrainState, grad: ParamVector) -> TrainState:
    """Bias-corrected Adam update at the scheduled learning rate; no weight decay"""
    if grad.layout.fingerprint() != state.params.layout.fingerprint():
        raise ShapeError(
            f"Gradient layout ({grad.layout.size} parameters) does not match the "
            f"parameters ({state.params.layout.size})"
        )
    if not grad.is_finite():
        where = state.last_checkpoint or "none saved yet"
        raise NonFiniteGradient(
            f"Non-finite gradient at step {state.step}.\n"
            f"Last good checkpoint: {where}\n"
            "Try a smaller learning rate or nondimensionalize the problem.",
            checkpoint=state.last_checkpoint,
        )
    b1, b2, eps = state.adam.beta1, state.adam.beta2, state.adam.eps
    count = state.adam_count + 1
    g = grad.flat
    m = b1 * state.m.flat + (1.0 - b1) * g
    v = b2 * state.v.flat + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**count)
    v_hat = v / (1.0 - b2**count)
    update = -state.schedule(state.step) * m_hat / (np.sqrt(v_hat) + eps)
    return replace(
        state,
        params=state.params.with_flat(state.params.flat + update),
        m=state.m.with_flat(m),
        v=state.v.with_flat(v),
        step=state.step + 1,
        adam_count=count,
    )


# ========== SAMPLING ==========


@dataclass
class Batch:
    """One iteration's training points; collocation rows are grouped by chunk"""

    ic_x: np.ndarray
    coords: np.ndarray
    chunks: np.ndarray
    bc_coords: Optional[np.ndarray] = None
    bc_targets: Optional[np.ndarray] = None

    @property
    def per_chunk(self) -> int:
        return self.coords.shape[0] // int(self.chunks.max() + 1)


def sample_collocation(
    rng: np.random.Generator, problem: ProblemSpec, n_r: int, chunks: int
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stratified (t, x) points: ``ceil(n_r / chunks)`` per temporal chunk.

    Returns the coordinates ordered by chunk and the chunk label of every row.
    """
    per_chunk = math.ceil(n_r / chunks)
    if per_chunk * chunks != n_r:
        logger.debug(f"Rounding {n_r} collocation points up to {per_chunk * chunks}")
    t0, t1 = problem.t_span
    width = (t1 - t0) / chunks
    labels = np.repeat(np.arange(chunks), per_chunk)
    lo = t0 + labels * width
    hi = np.minimum(lo + width, t1)
    t = lo + rng.random(labels.size) * (hi - lo)
    # floating-point rounding can push a point over its chunk edge
    for _ in range(4):
        wrong = chunk_index(t, problem.t_span, chunks) != labels
        if not wrong.any():
            break
        t[wrong] = np.where(
            chunk_index(t[wrong], problem.t_span, chunks) > labels[wrong],
            np.nextafter(t[wrong], -np.inf),
            np.nextafter(t[wrong], np.inf),
        )
    x_lo, x_hi = problem.x_span
    x = x_lo + rng.random(labels.size) * (x_hi - x_lo)
    return np.column_stack([t, x]), labels


def sample_batch(rng: np.random.Generator, problem: ProblemSpec, config: RunConfig) -> Batch:
    sizes = config.batch
    chunks = config.weighting.chunks
    coords, labels = sample_collocation(rng, problem, sizes.n_r, chunks)
    x_lo, x_hi = problem.x_span
    ic_x = x_lo + rng.random(sizes.n_ic) * (x_hi - x_lo)
    bc_coords = bc_targets = None
    if "bc" in problem.loss_terms:
        t0, t1 = problem.t_span
        t = t0 + rng.random(sizes.n_bc) * (t1 - t0)
        x = np.where(np.arange(sizes.n_bc) % 2 == 0, x_lo, x_hi)
        bc_coords = np.column_stack([t, x])
        bc_targets = np.asarray(problem.bc_value(t, x), dtype=np.float64)
    return Batch(ic_x=ic_x, coords=coords, chunks=labels, bc_coords=bc_coords, bc_targets=bc_targets)


# ========== LOSSES ==========


def evaluate_losses(
    problem: ProblemSpec, net: Network, params: ParamVector, batch: Batch, weights: LossWeights, causal: bool
) -> Tuple[Tape, LossBreakdown]:
    """Record every loss term of ``batch`` on a fresh tape; returns the tape and the breakdown"""
    tape = Tape()
    nodes = tape.bind_params(params)
    terms = {
        term: ic_loss(net, nodes, batch.ic_x, problem.ic, problem.t_span[0], ic_component(term))
        for term in problem.ic_terms
    }
    if batch.bc_coords is not None:
        terms["bc"] = bc_loss(net, nodes, batch.bc_coords, batch.bc_targets)
    residual = residual_values(problem, net, nodes, batch.coords)
    chunks = weights.chunks
    chunk_losses = (residual * residual).reshape(chunks, batch.coords.shape[0] // chunks).mean(axis=1)
    if causal:
        w = causal_weights(chunk_losses.value, weights.epsilon)
    else:
        w = np.ones(chunks)
    return tape, LossBreakdown(terms=terms, chunk_losses=chunk_losses, w=w)


def ntk_statistics(
    problem: ProblemSpec, net: Network, params: ParamVector, batch: Batch, size: int
) -> Dict[str, float]:
    """Per-sample-normalized NTK traces of every term on the first ``size`` points of the batch"""
    t0 = problem.t_span[0]
    ic_x = batch.ic_x[:size]
    ic_points = np.column_stack([np.full_like(ic_x, t0), ic_x])
    samples = {term: ic_points for term in problem.ic_terms}
    if batch.bc_coords is not None:
        samples["bc"] = batch.bc_coords[:size]
    # spread the residual sub-batch over all chunks
    stride = max(1, batch.coords.shape[0] // size)
    samples["r"] = batch.coords[::stride][:size]
    return {
        term: ntk_trace(net, params, term_outputs(problem, term), points) / points.shape[0]
        for term, points in samples.items()
    }


# ========== TRAINING LOOP ==========


def _diagnostics(
    problem: ProblemSpec, net: Network, params: ParamVector, config: RunConfig, tape: Tape, breakdown: LossBreakdown
) -> Dict[str, Any]:
    which = config.diagnostics.which
    out: Dict[str, Any] = {}
    if "grads" in which:
        out["grads"] = {
            name: diag.grad_histogram(tape.param_gradient(node)) for name, node in breakdown.nodes().items()
        }
    if "ntk" in which:
        out["ntk"] = diag.term_spectra(problem, net, params, config.diagnostics.batch, seed=config.seed)
    if "temporal" in which:
        out["temporal"] = diag.temporal_residual_profile(net, params, problem, max(2, config.weighting.chunks)).tolist()
    return out


def train_window(
    problem: ProblemSpec,
    net: Network,
    state: TrainState,
    config: RunConfig,
    steps: Optional[int] = None,
    reference: Optional[GridSolution] = None,
    sink: Optional[MetricsWriter] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    window: int = 0,
    stage: int = 0,
) -> Tuple[TrainState, List[MetricsRecord]]:
    """
    Run ``steps`` iterations (default ``config.optimizer.steps``) and return the new state and records.

    If an iteration fails the last good state is written to
    ``checkpoint_path`` before the error propagates.
    """
    if net.config.output_dim < problem.outputs:
        raise InvalidProblem(
            f"Problem '{problem.name}' has {problem.outputs} outputs but the network only {net.config.output_dim}"
        )
    steps = config.optimizer.steps if steps is None else steps
    weighting = config.weighting
    records: List[MetricsRecord] = []
    started = time.perf_counter()
    first_step = state.step
    origin = state.phase_start
    meta = {
        "problem": problem.fingerprint(),
        "window": window,
        "stage": stage,
        "run_config": config.model_dump(mode="json"),
    }

    def save(current: TrainState) -> TrainState:
        path = save_checkpoint(checkpoint_path, net.with_params(current.params), current, meta)
        return replace(current, last_checkpoint=str(path))

    logger.info(
        f"Training {problem.name} window={window} stage={stage}: {steps} steps from step {state.step} "
        f"(weighting={weighting.mode}, causal={weighting.causal})"
    )
    try:
        for _ in range(steps):
            step = state.step
            batch = sample_batch(state.rng, problem, config)
            tape, breakdown = evaluate_losses(problem, net, state.params, batch, state.weights, weighting.causal)
            weights = replace(state.weights, w=breakdown.w)

            if weighting.mode != "none" and should_refresh(step - origin, weighting.update_every):
                if weighting.mode == "grad_norm":
                    stats = grad_norms(tape, breakdown)
                else:
                    stats = ntk_statistics(problem, net, state.params, batch, weighting.ntk_batch)
                weights = refresh_lambdas(weights, stats)
                logger.debug(f"Step {step}: λ = {weights.lambdas}")

            loss = total_loss(breakdown, weights)
            grad = loss_grad(tape, loss)

            last = step == first_step + steps - 1
            if (step - origin) % config.log_every == 0 or last:
                rel_l2 = None
                if reference is not None and config.eval.every and (step - origin) % config.eval.every == 0:
                    rel_l2 = relative_l2(evaluate_on_grid(net, state.params, reference), reference)
                diagnostics = None
                if config.diagnostics.every and (step - origin) % config.diagnostics.every == 0:
                    diagnostics = _diagnostics(problem, net, state.params, config, tape, breakdown)
                losses = breakdown.values()
                losses["total"] = float(loss.value)
                record = MetricsRecord(
                    step=step,
                    losses=losses,
                    lambdas=dict(weights.lambdas),
                    w_min=weights.min_w,
                    w_mean=weights.mean_w,
                    learning_rate=state.schedule(step),
                    wall_clock=time.perf_counter() - started,
                    window=window,
                    stage=stage,
                    rel_l2=rel_l2,
                    diagnostics=diagnostics,
                )
                records.append(record)
                if sink is not None:
                    sink.write(record)
                logger.debug(f"Step {step}: total loss {losses['total']:.4e}, min w {weights.min_w:.3f}")

            state = adam_step(replace(state, weights=weights), grad)
            if checkpoint_path and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                state = save(state)
    except Exception as e:
        logger.error(f"Training failed at step {state.step}: {e}")
        if checkpoint_path:
            state = save(state)
            if isinstance(e, NonFiniteGradient):
                e.checkpoint = state.last_checkpoint
        raise

    if checkpoint_path:
        state = save(state)
    logger.info(f"Finished {problem.name} window={window} stage={stage} at step {state.step}")
    return state, records


# ========== TIME MARCHING ==========


@dataclass(frozen=True)
class WindowPlan:
    """Equal windows tiling the temporal domain"""

    windows: int
    steps_per_window: int
    transfer_points: int = 512
    warm_start: bool = True

    def __post_init__(self):
        if self.windows < 1:
            raise ValueError(f"A window plan needs at least one window, got {self.windows}")
        if self.steps_per_window < 0:
            raise ValueError(f"Window budget must be nonnegative, got {self.steps_per_window}")

    @classmethod
    def from_config(cls, config: RunConfig) -> "WindowPlan":
        march = config.curriculum.time_march
        steps = march.steps_per_window
        if steps is None:
            steps = config.optimizer.steps // march.windows
        return cls(march.windows, steps, march.transfer_points, march.warm_start)

    def boundaries(self, t_span: Tuple[float, float]) -> List[Tuple[float, float]]:
        edges = np.linspace(t_span[0], t_span[1], self.windows + 1)
        edges[-1] = t_span[1]
        return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


class StitchedSolution:
    """Dispatches each query point to the network trained on its time window"""

    def __init__(self, boundaries: Sequence[Tuple[float, float]], networks: Sequence[Network]):
        if len(boundaries) != len(networks):
            raise ValueError("Need one network per window")
        self.boundaries = list(boundaries)
        self.networks = list(networks)
        self._ends = np.array([b for _, b in self.boundaries])

    def owner(self, t: np.ndarray) -> np.ndarray:
        index = np.searchsorted(self._ends, np.asarray(t), side="left")
        return np.clip(index, 0, len(self.networks) - 1)

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        owner = self.owner(coords[:, 0])
        out = np.zeros(coords.shape[0])
        for k, net in enumerate(self.networks):
            mask = owner == k
            if mask.any():
                out[mask] = predict(net, coords[mask])[:, 0]
        return out

    def on_grid(self, grid: GridSolution) -> GridSolution:
        return grid.with_values(self(grid.coordinates()), provenance={"kind": "prediction"})


@dataclass
class MarchResult:
    states: List[TrainState]
    networks: List[Network]
    records: List[MetricsRecord]
    solution: StitchedSolution
    ic_losses: List[float] = field(default_factory=list)


def transfer_condition(net: Network, problem: ProblemSpec, t: float, points: int) -> Callable[[np.ndarray], np.ndarray]:
    """Interpolant of the prediction at time ``t``, used as the next window's initial condition"""
    xs = uniform_grid(problem.x_span, points, periodic=problem.periodic)
    values = predict(net, np.column_stack([np.full_like(xs, t), xs]))[:, 0]
    if problem.periodic:
        return FourierInterpolant(values, problem.x_span[0], problem.length)
    return lambda x: np.interp(x, xs, values)


def time_march(
    problem: ProblemSpec,
    plan: WindowPlan,
    config: RunConfig,
    sink: Optional[MetricsWriter] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> MarchResult:
    """
    Train one network per window in sequence.

    Each window starts from fresh optimizer moments and loss weights; with
    ``warm_start`` it inherits the previous window's parameters. A failed
    window raises MarchAborted carrying the completed windows.
    """
    states: List[TrainState] = []
    networks: List[Network] = []
    records: List[MetricsRecord] = []
    if problem.outputs > 1:
        raise InvalidProblem("Time marching transfers a scalar initial condition; vector problems are not supported")
    ic_losses: List[float] = []
    boundaries = plan.boundaries(problem.t_span)
    ic, ic_tag = problem.ic, problem.ic_tag
    rng = np.random.default_rng(config.seed)
    step = 0
    net: Optional[Network] = None

    for k, (a, b) in enumerate(boundaries):
        window_problem = problem.window(a, b, ic=ic, ic_tag=ic_tag)
        if net is None or not plan.warm_start:
            net = build_network(config.network, config.seed + k, time_length=b - a)
        state = TrainState.initial(net, config, window_problem.loss_terms, rng=rng, step=step)
        path = Path(out_dir) / f"window_{k}.ckpt" if out_dir else None
        logger.info(f"Time-march window {k + 1}/{len(boundaries)}: t in [{a:.4g}, {b:.4g}]")
        try:
            state, window_records = train_window(
                window_problem, net, state, config, steps=plan.steps_per_window,
                sink=sink, checkpoint_path=path, window=k,
            )
        except Exception as e:
            partial = MarchResult(states, networks, records, StitchedSolution(boundaries[:k], networks), ic_losses)
            raise MarchAborted(
                f"Time marching aborted in window {k} ([{a:.4g}, {b:.4g}]): {e}",
                result=partial,
                window=k,
            ) from e
        net = net.with_params(state.params)
        states.append(state)
        networks.append(net)
        records.extend(window_records)
        xs = uniform_grid(problem.x_span, plan.transfer_points, periodic=problem.periodic)
        ic_losses.append(float(ic_loss(net, state.params, xs, window_problem.ic, a).value))
        rng, step = state.rng, state.step
        ic = transfer_condition(net, problem, b, plan.transfer_points)
        ic_tag = f"{problem.ic_tag}/window{k + 1}"

    return MarchResult(states, networks, records, StitchedSolution(boundaries, networks), ic_losses)


# ========== PARAMETER CONTINUATION ==========


@dataclass(frozen=True)
class ContinuationPlan:
    """Ordered (value, budget) stages for one named problem constant"""

    constant: str
    stages: Tuple[Tuple[float, int], ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("A continuation plan needs at least one stage")
        bad = [budget for _, budget in self.stages if budget <= 0]
        if bad:
            raise ValueError(f"Continuation budgets must be positive, got {bad}")

    @classmethod
    def from_config(cls, config: RunConfig) -> "ContinuationPlan":
        plan = config.curriculum.continuation
        return cls(plan.constant, tuple(zip(plan.values, plan.steps)))


@dataclass
class RunResult:
    network: Network
    state: TrainState
    records: List[MetricsRecord]
    solution: Callable[[np.ndarray], np.ndarray]
    moment_resets: int = 0

    def predict_grid(self, grid: GridSolution) -> GridSolution:
        return grid.with_values(self.solution(grid.coordinates()), provenance={"kind": "prediction"})


def continue_parameter(
    problem: ProblemSpec,
    plan: ContinuationPlan,
    config: RunConfig,
    sink: Optional[MetricsWriter] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> RunResult:
    """
    Train through the plan's values of one constant, warm-starting each stage.

    Parameters and the step counter carry over; Adam moments are reset at
    every stage boundary while the learning-rate schedule continues.
    """
    net = build_network(config.network, config.seed, time_length=problem.duration)
    state = TrainState.initial(net, config, problem.loss_terms)
    records: List[MetricsRecord] = []
    resets = 0
    for i, (value, budget) in enumerate(plan.stages):
        stage_problem = problem.with_constants(**{plan.constant: value})
        if i > 0:
            state = replace(state.reset_moments(), phase_start=state.step)
            resets += 1
        logger.info(f"Continuation stage {i + 1}/{len(plan.stages)}: {plan.constant}={value}")
        path = Path(out_dir) / f"stage_{i}.ckpt" if out_dir else None
        state, stage_records = train_window(
            stage_problem, net, state, config, steps=budget, sink=sink, checkpoint_path=path, stage=i
        )
        net = net.with_params(state.params)
        records.extend(stage_records)
    return RunResult(net, state, records, solution=lambda coords: predict(net, coords)[:, 0], moment_resets=resets)


def run_curriculum(
    problem: ProblemSpec,
    config: RunConfig,
    sink: Optional[MetricsWriter] = None,
    out_dir: Optional[Union[str, Path]] = None,
    reference: Optional[GridSolution] = None,
) -> RunResult:
    """Dispatch on ``config.curriculum.kind``"""
    kind = config.curriculum.kind
    if kind == "time_march":
        march = time_march(problem, WindowPlan.from_config(config), config, sink=sink, out_dir=out_dir)
        return RunResult(march.networks[-1], march.states[-1], march.records, solution=march.solution)
    if kind == "continuation":
        return continue_parameter(problem, ContinuationPlan.from_config(config), config, sink=sink, out_dir=out_dir)

    net = build_network(config.network, config.seed, time_length=problem.duration)
    state = TrainState.initial(net, config, problem.loss_terms)
    path = Path(out_dir) / "final.ckpt" if out_dir else None
    state, records = train_window(problem, net, state, config, reference=reference, sink=sink, checkpoint_path=path)
    net = net.with_params(state.params)
    return RunResult(net, state, records, solution=lambda coords: predict(net, coords)[:, 0])
