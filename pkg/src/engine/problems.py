"""
Benchmark PDE definitions.

Coordinates are ordered (t, x): axis 0 is time, axis 1 is space. Residual
functions are plain arithmetic, so they accept floats, numpy arrays or tape
nodes alike.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from .autodiff import Node, ParamVector, Tape
from .errors import EmptyBatch, InvalidProblem, InvalidScale

logger = logging.getLogger(__name__)

TIME_AXIS = 0
SPACE_AXIS = 1

# field name -> (axis, derivative order)
FIELD_ORDERS: Dict[str, Tuple[int, int]] = {
    "u": (TIME_AXIS, 0),
    "u_t": (TIME_AXIS, 1),
    "u_x": (SPACE_AXIS, 1),
    "u_xx": (SPACE_AXIS, 2),
    "u_xxxx": (SPACE_AXIS, 4),
}


class BoundaryKind(Enum):
    """How boundary conditions are imposed"""

    PERIODIC_HARD = "periodic-hard"
    LOSS_TERM = "loss-term"


# ========== RESIDUALS ==========


def allen_cahn_residual(u_t, u_xx, u, diffusion: float = 1e-4, reaction: float = 5.0):
    return u_t - diffusion * u_xx + reaction * (u * u * u) - reaction * u


def advection_residual(u_t, u_x, c: float):
    return u_t + c * u_x


def ks_residual(u_t, u, u_x, u_xx, u_xxxx, alpha: float, beta: float, gamma: float):
    return u_t + alpha * u * u_x + beta * u_xx + gamma * u_xxxx


def heat_residual(u_t, u_xx, kappa: float):
    return u_t - kappa * u_xx


# ========== PROBLEM SPEC ==========

ResidualFn = Callable[[Mapping[str, Any], Mapping[str, float]], Any]


@dataclass(frozen=True)
class ProblemSpec:
    """
    A PDE benchmark on [t0, t1] x [x_lo, x_hi].

    ``fields`` lists the derivative fields the residual reads; ``orders``
    maps axis -> highest jet order and must cover every field.
    ``constant_dims`` gives each constant's (length, time, value) exponents
    for nondimensionalization.
    """

    name: str
    x_span: Tuple[float, float]
    t_span: Tuple[float, float]
    residual: ResidualFn
    ic: Callable[[np.ndarray], np.ndarray]
    bc_kind: BoundaryKind
    constants: Mapping[str, float]
    fields: Tuple[str, ...]
    orders: Mapping[int, int]
    constant_dims: Mapping[str, Tuple[int, int, int]] = field(default_factory=dict)
    exact: Optional[Callable[[np.ndarray, np.ndarray, Mapping[str, float]], np.ndarray]] = None
    bc_value: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    ic_tag: str = "default"
    outputs: int = 1

    def __post_init__(self):
        t0, t1 = self.t_span
        if not t1 > t0:
            raise InvalidProblem(f"Temporal domain [{t0}, {t1}] is empty; need T > 0")
        if not self.x_span[1] > self.x_span[0]:
            raise InvalidProblem(f"Spatial domain {self.x_span} is empty; need x_hi > x_lo")
        if self.outputs < 1:
            raise InvalidProblem(f"Problem '{self.name}' needs at least one output, got {self.outputs}")
        for name in self.fields:
            if name not in FIELD_ORDERS:
                raise InvalidProblem(f"Unknown residual field '{name}'")
            axis, order = FIELD_ORDERS[name]
            if order and self.orders.get(axis, 0) < order:
                raise InvalidProblem(
                    f"Problem '{self.name}' reads {name} but declares order "
                    f"{self.orders.get(axis, 0)} on axis {axis}"
                )

    @property
    def duration(self) -> float:
        return self.t_span[1] - self.t_span[0]

    @property
    def length(self) -> float:
        return self.x_span[1] - self.x_span[0]

    @property
    def periodic(self) -> bool:
        return self.bc_kind is BoundaryKind.PERIODIC_HARD

    @property
    def ic_terms(self) -> Tuple[str, ...]:
        """One initial-condition term per output component of a vector problem"""
        if self.outputs == 1:
            return ("ic",)
        return tuple(f"ic_{k}" for k in range(self.outputs))

    @property
    def loss_terms(self) -> Tuple[str, ...]:
        terms = self.ic_terms + ("bc",) if self.bc_kind is BoundaryKind.LOSS_TERM else self.ic_terms
        return terms + ("r",)

    def with_constants(self, **overrides: float) -> "ProblemSpec":
        unknown = [k for k in overrides if k not in self.constants]
        if unknown:
            raise InvalidProblem(
                f"Unknown constants for '{self.name}': {', '.join(unknown)}.\n"
                f"Available: {', '.join(self.constants)}"
            )
        return replace(self, constants={**self.constants, **overrides})

    def window(self, t0: float, t1: float, ic=None, ic_tag: Optional[str] = None) -> "ProblemSpec":
        """Same PDE restricted to [t0, t1], optionally with a new initial condition"""
        return replace(
            self,
            t_span=(t0, t1),
            ic=ic if ic is not None else self.ic,
            ic_tag=ic_tag or self.ic_tag,
        )

    def fingerprint(self) -> Dict[str, Any]:
        """JSON-able identity used for cache keys and run records"""
        return {
            "name": self.name,
            "x_span": list(self.x_span),
            "t_span": list(self.t_span),
            "constants": {k: float(v) for k, v in sorted(self.constants.items())},
            "ic": self.ic_tag,
        }


# ========== LOSS TERMS ==========


def _nodes_for(params) -> Mapping[str, Node]:
    if isinstance(params, ParamVector):
        return Tape().bind_params(params)
    return params


def ic_component(term: str) -> Optional[int]:
    """Output column of an ``ic_k`` term; None for the scalar ``ic`` term"""
    if term == "ic":
        return None
    if term.startswith("ic_") and term[3:].isdigit():
        return int(term[3:])
    raise InvalidProblem(f"'{term}' is not an initial-condition term")


def ic_loss(
    net,
    params,
    xs: np.ndarray,
    g: Callable[[np.ndarray], np.ndarray],
    t0: float = 0.0,
    component: Optional[int] = None,
) -> Node:
    """
    Mean squared mismatch between u(t0, x) and g(x) over the sample points.

    With ``component`` set, compares output column k against column k of
    g(x), which then returns shape (n, outputs).
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    if xs.size == 0:
        raise EmptyBatch("Initial-condition loss needs at least one sample point")
    nodes = _nodes_for(params)
    coords = np.column_stack([np.full_like(xs, t0), xs])
    target = np.asarray(g(xs), dtype=np.float64)
    if component is None:
        u = net.jets(nodes, coords, {}).value(0)
        target = target.reshape(-1)
    else:
        u = net.jets(nodes, coords, {}).value(component)
        target = target.reshape(xs.size, -1)[:, component]
    diff = u - target
    return (diff * diff).mean()


def bc_loss(net, params, coords: np.ndarray, targets: np.ndarray) -> Node:
    """Mean squared boundary mismatch for loss-term boundary conditions"""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    if coords.shape[0] == 0:
        raise EmptyBatch("Boundary loss needs at least one sample point")
    nodes = _nodes_for(params)
    u = net.jets(nodes, coords, {}).value(0)
    diff = u - np.asarray(targets, dtype=np.float64).reshape(-1)
    return (diff * diff).mean()


def residual_values(problem: ProblemSpec, net, nodes: Mapping[str, Node], coords: np.ndarray) -> Node:
    """PDE residual at every row of ``coords`` via one jet pass"""
    bundle = net.jets(nodes, coords, problem.orders)
    fields = {}
    for name in problem.fields:
        axis, order = FIELD_ORDERS[name]
        fields[name] = bundle.value(0) if order == 0 else bundle.derivative(axis, order)
    return problem.residual(fields, problem.constants)


def term_outputs(problem: ProblemSpec, term: str) -> Callable:
    """Per-sample outputs whose parameter gradients form the NTK block of ``term``"""
    if term == "r":
        return lambda net, nodes, coords: residual_values(problem, net, nodes, coords)
    column = ic_component(term) if term.startswith("ic") else None
    return lambda net, nodes, coords: net.jets(nodes, coords, {}).value(column or 0)


# ========== BENCHMARKS ==========


def _allen_cahn_fields(f, c):
    return allen_cahn_residual(f["u_t"], f["u_xx"], f["u"], c["diffusion"], c["reaction"])


def _advection_fields(f, c):
    return advection_residual(f["u_t"], f["u_x"], c["c"])


def _ks_fields(f, c):
    return ks_residual(f["u_t"], f["u"], f["u_x"], f["u_xx"], f["u_xxxx"], c["alpha"], c["beta"], c["gamma"])


def _heat_fields(f, c):
    return heat_residual(f["u_t"], f["u_xx"], c["kappa"])


def allen_cahn(t_max: float = 1.0, **constants: float) -> ProblemSpec:
    return ProblemSpec(
        name="allen_cahn",
        x_span=(-1.0, 1.0),
        t_span=(0.0, t_max),
        residual=_allen_cahn_fields,
        ic=lambda x: x**2 * np.cos(np.pi * x),
        bc_kind=BoundaryKind.PERIODIC_HARD,
        constants={"diffusion": 1e-4, "reaction": 5.0, **constants},
        fields=("u", "u_t", "u_xx"),
        orders={TIME_AXIS: 1, SPACE_AXIS: 2},
        constant_dims={"diffusion": (2, -1, 0), "reaction": (0, -1, 0)},
    )


def advection(t_max: float = 1.0, **constants: float) -> ProblemSpec:
    return ProblemSpec(
        name="advection",
        x_span=(0.0, 2.0 * math.pi),
        t_span=(0.0, t_max),
        residual=_advection_fields,
        ic=np.sin,
        bc_kind=BoundaryKind.PERIODIC_HARD,
        constants={"c": 80.0, **constants},
        fields=("u_t", "u_x"),
        orders={TIME_AXIS: 1, SPACE_AXIS: 1},
        constant_dims={"c": (1, -1, 0)},
    )


def kuramoto_sivashinsky(t_max: float = 0.1, **constants: float) -> ProblemSpec:
    return ProblemSpec(
        name="ks",
        x_span=(0.0, 2.0 * math.pi),
        t_span=(0.0, t_max),
        residual=_ks_fields,
        ic=lambda x: np.cos(x) * (1.0 + np.sin(x)),
        bc_kind=BoundaryKind.PERIODIC_HARD,
        constants={"alpha": 100.0 / 16, "beta": 100.0 / 16**2, "gamma": 100.0 / 16**4, **constants},
        fields=("u", "u_t", "u_x", "u_xx", "u_xxxx"),
        orders={TIME_AXIS: 1, SPACE_AXIS: 4},
        constant_dims={"alpha": (1, -1, -1), "beta": (2, -1, 0), "gamma": (4, -1, 0)},
    )


def _heat_exact(t, x, constants):
    return np.exp(-constants["kappa"] * np.pi**2 * t) * np.sin(np.pi * x)


def heat_dirichlet(t_max: float = 1.0, **constants: float) -> ProblemSpec:
    """u_t = κ u_xx on [0, 1] with u = 0 at both ends; exact solution exp(-κπ²t) sin(πx)"""
    return ProblemSpec(
        name="heat_dirichlet",
        x_span=(0.0, 1.0),
        t_span=(0.0, t_max),
        residual=_heat_fields,
        ic=lambda x: np.sin(np.pi * x),
        bc_kind=BoundaryKind.LOSS_TERM,
        constants={"kappa": 0.1, **constants},
        fields=("u_t", "u_xx"),
        orders={TIME_AXIS: 1, SPACE_AXIS: 2},
        constant_dims={"kappa": (2, -1, 0)},
        exact=_heat_exact,
        bc_value=lambda t, x: np.zeros_like(np.asarray(t, dtype=np.float64)),
    )


PROBLEMS: Dict[str, Callable[..., ProblemSpec]] = {
    "allen_cahn": allen_cahn,
    "advection": advection,
    "ks": kuramoto_sivashinsky,
    "heat_dirichlet": heat_dirichlet,
}


def get_problem(name: str, overrides: Optional[Mapping[str, float]] = None, t_max: Optional[float] = None) -> ProblemSpec:
    """Build a registered problem with constant overrides and an optional horizon"""
    if name not in PROBLEMS:
        raise InvalidProblem(
            f"Unknown problem: '{name}'.\n"
            f"Registered problems: {', '.join(sorted(PROBLEMS))}"
        )
    kwargs = {"t_max": t_max} if t_max is not None else {}
    problem = PROBLEMS[name](**kwargs)
    if overrides:
        problem = problem.with_constants(**overrides)
    return problem


# ========== NONDIMENSIONALIZATION ==========


@dataclass(frozen=True)
class ScalingRecord:
    """
    Characteristic scales: length L*, value (velocity) U*, optional viscosity ν.

    Time scales as T* = L*/U*; Re = U* L*/ν when ν is given.
    """

    length: float
    value: float
    viscosity: Optional[float] = None

    def __post_init__(self):
        scales = {"length": self.length, "value": self.value}
        if self.viscosity is not None:
            scales["viscosity"] = self.viscosity
        for name, scale in scales.items():
            if not scale > 0:
                raise InvalidScale(
                    f"Invalid {name} scale: {scale}.\n"
                    "Characteristic scales must be positive, e.g. length=0.1, value=0.2."
                )

    @property
    def time(self) -> float:
        return self.length / self.value

    @property
    def reynolds(self) -> Optional[float]:
        if self.viscosity is None:
            return None
        return self.value * self.length / self.viscosity

    def groups(self) -> Dict[str, float]:
        out = {"time": self.time}
        if self.reynolds is not None:
            out["reynolds"] = self.reynolds
        return out

    def to_dimensionless(self, x=None, t=None, u=None, p=None) -> Dict[str, Any]:
        out = {}
        if x is not None:
            out["x"] = np.asarray(x) / self.length
        if t is not None:
            out["t"] = np.asarray(t) / self.time
        if u is not None:
            out["u"] = np.asarray(u) / self.value
        if p is not None:
            out["p"] = np.asarray(p) * self.length / (self._viscosity() * self.value)
        return out

    def to_physical(self, x=None, t=None, u=None, p=None) -> Dict[str, Any]:
        out = {}
        if x is not None:
            out["x"] = np.asarray(x) * self.length
        if t is not None:
            out["t"] = np.asarray(t) * self.time
        if u is not None:
            out["u"] = np.asarray(u) * self.value
        if p is not None:
            out["p"] = np.asarray(p) * self._viscosity() * self.value / self.length
        return out

    def _viscosity(self) -> float:
        if self.viscosity is None:
            raise InvalidScale("Pressure scaling needs a viscosity")
        return self.viscosity

    def constant_factor(self, dims: Tuple[int, int, int]) -> float:
        """Factor turning a constant with (length, time, value) exponents dimensionless"""
        a, b, c = dims
        return self.length ** (-a) * self.time ** (-b) * self.value ** (-c)


def nondimensionalize(record: ScalingRecord, problem: ProblemSpec) -> ProblemSpec:
    """
    Rescale domain, initial condition and constants of a physical problem.

    Constants without declared dimensions are treated as already dimensionless.
    """
    constants = {
        name: value * record.constant_factor(problem.constant_dims.get(name, (0, 0, 0)))
        for name, value in problem.constants.items()
    }
    if record.reynolds is not None:
        constants.setdefault("reynolds", record.reynolds)
    physical_ic = problem.ic

    def ic(x_star):
        return np.asarray(physical_ic(np.asarray(x_star) * record.length)) / record.value

    return replace(
        problem,
        x_span=(problem.x_span[0] / record.length, problem.x_span[1] / record.length),
        t_span=(problem.t_span[0] / record.time, problem.t_span[1] / record.time),
        ic=ic,
        constants=constants,
        ic_tag=f"{problem.ic_tag}/scaled",
        exact=None,
    )
