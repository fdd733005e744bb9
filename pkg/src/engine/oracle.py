"""
Reference solutions and error metrics.

Advection has a closed form; periodic Allen-Cahn and Kuramoto-Sivashinsky
are integrated with a Fourier pseudo-spectral ETDRK4 scheme (Kassam &
Trefethen contour-integral coefficients). Spectral grids are cached on disk
in the grid file format below.

Grid file layout (all integers and floats little-endian)::

    magic     8 bytes  b"PINNGRID"
    version   uint32
    hdr_len   uint32
    header    hdr_len bytes of UTF-8 JSON
    times     nt   float64
    xs        nx   float64
    values    nt*nx float64, row-major (time-major)
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np

from .cache import CacheConfig, cache_aside, cache_key_generator
from .config import EvalConfig
from .errors import DegenerateReference, InvalidProblem, ShapeError, SolverDiverged
from .nets import predict
from .problems import ProblemSpec

logger = logging.getLogger(__name__)

GRID_MAGIC = b"PINNGRID"
GRID_VERSION = 1
BLOWUP_THRESHOLD = 1e3
CONTOUR_POINTS = 32

# largest stable default step per problem
DEFAULT_DT = {"allen_cahn": 1e-3, "ks": 2.5e-4}


# ========== GRID SOLUTION ==========


@dataclass(frozen=True)
class GridSolution:
    """
    Solution samples on a tensor grid ``times`` x ``xs``.

    For periodic problems ``xs`` is uniform with the right endpoint excluded
    (the period is implied); otherwise both endpoints are included.
    """

    times: np.ndarray
    xs: np.ndarray
    values: np.ndarray
    problem: str = ""
    provenance: Dict[str, Any] = field(default_factory=dict)
    periodic: bool = True

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        xs = np.asarray(self.xs, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (times.size, xs.size):
            raise ShapeError(
                f"Grid values have shape {values.shape}, expected ({times.size}, {xs.size})"
            )
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ShapeError("Grid times must be strictly increasing")
        if xs.size > 2:
            spacing = np.diff(xs)
            if not np.allclose(spacing, spacing[0], rtol=1e-9, atol=1e-12):
                raise ShapeError("Grid xs must be uniformly spaced")
        if not np.all(np.isfinite(values)):
            raise ShapeError("Grid values contain NaN or infinite entries")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def coordinates(self) -> np.ndarray:
        """(nt*nx, 2) array of (t, x) rows in time-major order"""
        tt, xx = np.meshgrid(self.times, self.xs, indexing="ij")
        return np.column_stack([tt.reshape(-1), xx.reshape(-1)])

    def with_values(self, values: np.ndarray, provenance: Optional[Dict[str, Any]] = None) -> "GridSolution":
        return GridSolution(
            times=self.times,
            xs=self.xs,
            values=np.asarray(values, dtype=np.float64).reshape(self.shape),
            problem=self.problem,
            provenance=provenance if provenance is not None else dict(self.provenance),
            periodic=self.periodic,
        )

    def subsample(self, time_stride: int = 1, space_stride: int = 1) -> "GridSolution":
        return GridSolution(
            times=self.times[::time_stride],
            xs=self.xs[::space_stride],
            values=self.values[::time_stride, ::space_stride],
            problem=self.problem,
            provenance=dict(self.provenance),
            periodic=self.periodic,
        )

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {
                "problem": self.problem,
                "nt": int(self.times.size),
                "nx": int(self.xs.size),
                "periodic": self.periodic,
                "provenance": self.provenance,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        parts = [
            GRID_MAGIC,
            struct.pack("<II", GRID_VERSION, len(header)),
            header,
            self.times.astype("<f8").tobytes(),
            self.xs.astype("<f8").tobytes(),
            self.values.astype("<f8").tobytes(order="C"),
        ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "GridSolution":
        if data[: len(GRID_MAGIC)] != GRID_MAGIC:
            raise ValueError("Not a grid file (bad magic)")
        offset = len(GRID_MAGIC)
        version, hdr_len = struct.unpack_from("<II", data, offset)
        if version != GRID_VERSION:
            raise ValueError(f"Unsupported grid file version {version}, expected {GRID_VERSION}")
        offset += 8
        header = json.loads(data[offset : offset + hdr_len].decode("utf-8"))
        offset += hdr_len
        nt, nx = header["nt"], header["nx"]
        expected = offset + 8 * (nt + nx + nt * nx)
        if len(data) != expected:
            raise ValueError(f"Truncated grid file: {len(data)} bytes, expected {expected}")
        arrays = np.frombuffer(data, dtype="<f8", offset=offset).astype(np.float64)
        return cls(
            times=arrays[:nt],
            xs=arrays[nt : nt + nx],
            values=arrays[nt + nx :].reshape(nt, nx),
            problem=header["problem"],
            provenance=header["provenance"],
            periodic=header["periodic"],
        )

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GridSolution":
        return cls.from_bytes(Path(path).read_bytes())


def uniform_grid(x_span: Tuple[float, float], n: int, periodic: bool = True) -> np.ndarray:
    lo, hi = x_span
    return np.linspace(lo, hi, n, endpoint=not periodic)


# ========== INTERPOLATION ==========


class FourierInterpolant:
    """Trigonometric interpolant of samples on a uniform periodic grid"""

    def __init__(self, values: np.ndarray, x_lo: float, length: float):
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        self.n = values.size
        self.x_lo = x_lo
        self.length = length
        self.coeffs = np.fft.rfft(values) / self.n
        self.wavenumbers = 2.0 * np.pi * np.arange(self.coeffs.size) / length
        # real-valued Nyquist mode contributes once
        self.weights = np.full(self.coeffs.size, 2.0)
        self.weights[0] = 1.0
        if self.n % 2 == 0:
            self.weights[-1] = 1.0

    def derivative(self, x: np.ndarray, order: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        phase = np.exp(1j * np.multiply.outer(x - self.x_lo, self.wavenumbers))
        factor = (1j * self.wavenumbers) ** order
        if order % 2 == 1 and self.n % 2 == 0:
            factor = factor.copy()
            factor[-1] = 0.0
        return np.real(phase @ (self.weights * factor * self.coeffs))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.derivative(x, 0)


# ========== ANALYTIC SOLUTIONS ==========


def advection_exact(
    g: Callable[[np.ndarray], np.ndarray],
    c: float,
    times: np.ndarray,
    xs: np.ndarray,
    period: float = 2.0 * math.pi,
    x_lo: float = 0.0,
) -> GridSolution:
    """u(t, x) = g((x - c t) mod period), by characteristics"""
    times = np.asarray(times, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    shifted = x_lo + np.mod(xs[None, :] - c * times[:, None] - x_lo, period)
    values = np.asarray(g(shifted), dtype=np.float64)
    return GridSolution(
        times=times,
        xs=xs,
        values=values,
        problem="advection",
        provenance={"kind": "analytic", "c": float(c)},
    )


def exact_grid(problem: ProblemSpec, times: np.ndarray, xs: np.ndarray) -> GridSolution:
    tt, xx = np.meshgrid(times, xs, indexing="ij")
    return GridSolution(
        times=times,
        xs=xs,
        values=problem.exact(tt, xx, problem.constants),
        problem=problem.name,
        provenance={"kind": "analytic"},
        periodic=problem.periodic,
    )


# ========== SPECTRAL SOLVER ==========


class ETDRK4:
    """
    ETDRK4 stepper for u_t = L u + N(u) with diagonal L in Fourier space.

    The phi-function coefficients are evaluated by averaging over points on a
    contour around each h*L, which avoids cancellation for small |h L|.
    """

    def __init__(self, linear: np.ndarray, nonlinear: Callable[[np.ndarray], np.ndarray], dt: float):
        self.nonlinear = nonlinear
        self.exp_full = np.exp(dt * linear)
        self.exp_half = np.exp(0.5 * dt * linear)
        roots = np.exp(1j * np.pi * (np.arange(CONTOUR_POINTS) + 0.5) / CONTOUR_POINTS)
        lr = dt * linear[:, None] + roots[None, :]
        exp_lr = np.exp(lr)
        self.coeff_f0 = dt * np.real(np.mean((np.exp(lr / 2.0) - 1.0) / lr, axis=1))
        self.coeff_f1 = dt * np.real(np.mean((-4.0 - lr + exp_lr * (4.0 - 3.0 * lr + lr**2)) / lr**3, axis=1))
        self.coeff_f2 = dt * np.real(np.mean((2.0 + lr + exp_lr * (lr - 2.0)) / lr**3, axis=1))
        self.coeff_f3 = dt * np.real(np.mean((-4.0 - 3.0 * lr - lr**2 + exp_lr * (4.0 - lr)) / lr**3, axis=1))

    def step(self, v: np.ndarray) -> np.ndarray:
        n0 = self.nonlinear(v)
        a = self.exp_half * v + self.coeff_f0 * n0
        n1 = self.nonlinear(a)
        b = self.exp_half * v + self.coeff_f0 * n1
        n2 = self.nonlinear(b)
        c = self.exp_half * a + self.coeff_f0 * (2.0 * n2 - n0)
        n3 = self.nonlinear(c)
        return self.exp_full * v + self.coeff_f1 * n0 + 2.0 * self.coeff_f2 * (n1 + n2) + self.coeff_f3 * n3


def _operators(problem: ProblemSpec, k: np.ndarray, n: int) -> Tuple[np.ndarray, Callable]:
    # 2/3 rule: drop the top third of the resolved modes after each product
    keep = np.arange(k.size) < (n // 3)
    c = problem.constants
    if problem.name == "allen_cahn":
        linear = -c["diffusion"] * k**2 + c["reaction"]

        def nonlinear(v):
            u = np.fft.irfft(v, n=n)
            return keep * np.fft.rfft(-c["reaction"] * u**3)

    elif problem.name == "ks":
        linear = c["beta"] * k**2 - c["gamma"] * k**4
        ik = 1j * k
        ik[-1] = 0.0

        def nonlinear(v):
            u = np.fft.irfft(v, n=n)
            return keep * (-0.5 * c["alpha"] * ik * np.fft.rfft(u * u))

    else:
        raise InvalidProblem(
            f"No spectral solver for problem '{problem.name}'.\n"
            "Spectral references exist for: allen_cahn, ks"
        )
    return linear, nonlinear


def _check_modes(n_modes: int) -> None:
    if n_modes < 128 or n_modes & (n_modes - 1):
        raise ValueError(f"n_modes must be a power of two >= 128, got {n_modes}")


def _spectral_key(problem: ProblemSpec, n_modes: int, dt: float, t_final: float, nt: int = 101, nx: int = 256) -> str:
    return cache_key_generator(
        f"oracle:{problem.name}",
        f"v{GRID_VERSION}",
        problem=problem.fingerprint(),
        n_modes=n_modes,
        dt=dt,
        t_final=t_final,
        nt=nt,
        nx=nx,
    )


@cache_aside(
    CacheConfig(key_prefix="oracle", encode=GridSolution.to_bytes, decode=GridSolution.from_bytes),
    key_func=_spectral_key,
)
def spectral_solve(
    problem: ProblemSpec, n_modes: int, dt: float, t_final: float, nt: int = 101, nx: int = 256
) -> GridSolution:
    """
    Integrate a periodic problem from t0 to ``t_final`` and sample ``nt`` times on ``nx`` points.

    The step is shrunk so every save time falls on a step; the solution is
    resampled onto the output grid by trigonometric interpolation.
    """
    _check_modes(n_modes)
    if not problem.periodic:
        raise InvalidProblem(f"Spectral solver needs periodic boundaries; '{problem.name}' is not periodic")
    t0 = problem.t_span[0]
    duration = t_final - t0
    if not duration >= 0:
        raise ValueError(f"Final time {t_final} precedes the initial time {t0}")
    saves = max(nt - 1, 1)
    steps_per_save = max(1, math.ceil(duration / (dt * saves))) if duration > 0 else 1
    h = duration / (steps_per_save * saves) if duration > 0 else dt

    x_lo, length = problem.x_span[0], problem.length
    grid = x_lo + length * np.arange(n_modes) / n_modes
    k = 2.0 * np.pi * np.arange(n_modes // 2 + 1) / length
    linear, nonlinear = _operators(problem, k, n_modes)
    stepper = ETDRK4(linear, nonlinear, h)

    xs = uniform_grid(problem.x_span, nx, periodic=True)
    times = np.linspace(t0, t_final, nt) if nt > 1 else np.array([t0])
    v = np.fft.rfft(np.asarray(problem.ic(grid), dtype=np.float64))
    rows = []
    logger.info(
        f"Spectral solve {problem.name}: N={n_modes}, dt={h:.3e}, T={t_final}, "
        f"{steps_per_save * saves} steps"
    )
    for i in range(nt):
        if i > 0:
            for _ in range(steps_per_save):
                v = stepper.step(v)
        u = np.fft.irfft(v, n=n_modes)
        peak = float(np.max(np.abs(u)))
        if not np.isfinite(peak) or peak > BLOWUP_THRESHOLD:
            raise SolverDiverged(
                f"Spectral solution blew up at t={times[i]:.4g} (max |u| = {peak:.3g}).\n"
                "Reduce dt or increase n_modes."
            )
        rows.append(FourierInterpolant(u, x_lo, length)(xs))
    return GridSolution(
        times=times,
        xs=xs,
        values=np.stack(rows),
        problem=problem.name,
        provenance={"kind": "spectral", "n_modes": n_modes, "dt": h, "t_final": t_final},
    )


def reference_solution(
    problem: ProblemSpec,
    eval_config: Optional[EvalConfig] = None,
    use_cache: bool = True,
) -> GridSolution:
    """Reference grid over the problem's domain: closed form where one exists, else spectral"""
    eval_config = eval_config or EvalConfig()
    times = np.linspace(problem.t_span[0], problem.t_span[1], eval_config.nt)
    xs = uniform_grid(problem.x_span, eval_config.nx, periodic=problem.periodic)
    if problem.exact is not None:
        return exact_grid(problem, times, xs)
    if problem.name == "advection":
        return advection_exact(problem.ic, problem.constants["c"], times, xs, problem.length, problem.x_span[0])
    dt = eval_config.dt or DEFAULT_DT.get(problem.name)
    if dt is None:
        raise InvalidProblem(f"No reference solution available for '{problem.name}'")
    return spectral_solve(
        problem, eval_config.n_modes, dt, problem.t_span[1], eval_config.nt, eval_config.nx, use_cache=use_cache
    )


# ========== METRICS ==========


def relative_l2(pred: Union[np.ndarray, GridSolution], ref: Union[np.ndarray, GridSolution]) -> float:
    """‖pred - ref‖₂ / ‖ref‖₂ over the whole space-time grid"""
    p = pred.values if isinstance(pred, GridSolution) else np.asarray(pred, dtype=np.float64)
    r = ref.values if isinstance(ref, GridSolution) else np.asarray(ref, dtype=np.float64)
    if p.size != r.size:
        raise ShapeError(f"Prediction has {p.size} entries, reference has {r.size}")
    p = p.reshape(r.shape)
    denom = float(np.linalg.norm(r))
    if denom == 0.0:
        raise DegenerateReference(
            "Reference solution has zero norm; relative error is undefined.\n"
            "Compare absolute errors instead."
        )
    return float(np.linalg.norm(p - r) / denom)


def grid_residual(solution: GridSolution, problem: ProblemSpec) -> float:
    """
    RMS PDE residual of a periodic grid solution.

    Space derivatives are spectral on each time slice; u_t uses second-order
    central differences, so only interior times are scored.
    """
    if solution.times.size < 3:
        raise ShapeError("Residual check needs at least three time slices")
    length = problem.length
    x_lo = problem.x_span[0]
    dt = np.diff(solution.times)
    u_t = (solution.values[2:] - solution.values[:-2]) / (dt[1:] + dt[:-1])[:, None]
    residuals = []
    for i in range(1, solution.times.size - 1):
        interp = FourierInterpolant(solution.values[i], x_lo, length)
        fields = {
            "u": solution.values[i],
            "u_t": u_t[i - 1],
            "u_x": interp.derivative(solution.xs, 1),
            "u_xx": interp.derivative(solution.xs, 2),
            "u_xxxx": interp.derivative(solution.xs, 4),
        }
        residuals.append(problem.residual(fields, problem.constants))
    return float(np.sqrt(np.mean(np.square(residuals))))


def evaluate_on_grid(net, params, grid: GridSolution) -> GridSolution:
    """Network prediction on the grid's (t, x) points"""
    values = predict(net, grid.coordinates(), params)[:, 0]
    return grid.with_values(values, provenance={"kind": "prediction"})
