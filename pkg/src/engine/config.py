"""
Run configuration schema.

One YAML file describes one run. Every section is a pydantic model that
rejects unknown keys; every field has a default, and defaults follow the
recommended training recipe (λ refresh every 1000 steps, α=0.9, ε=1.0,
learning rate 1e-3 decayed by 0.9 every 2000 steps).
"""

import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import yaml
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

COORDINATE_NAMES = ("t", "x", "y")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ========== NETWORK ==========


class FourierConfig(_Section):
    """Random Fourier feature embedding; σ in [1, 10] is the usual range"""

    scale: float = Field(1.0, gt=0)
    features: int = Field(128, ge=1)

    @model_validator(mode="after")
    def _recommend_scale(self):
        if not 1.0 <= self.scale <= 10.0:
            logger.warning(
                f"Fourier scale {self.scale} is outside the usual range [1, 10]; "
                "small scales keep spectral bias, large ones fit noise"
            )
        return self


class PeriodicConfig(_Section):
    """Exact periodic embedding: coordinate name -> period"""

    periods: Dict[str, float] = Field(default_factory=dict)
    trainable_time: bool = False

    @field_validator("periods")
    @classmethod
    def _positive_periods(cls, value: Dict[str, float]) -> Dict[str, float]:
        for name, period in value.items():
            if name not in COORDINATE_NAMES:
                raise ValueError(f"Unknown coordinate '{name}'; use one of {', '.join(COORDINATE_NAMES)}")
            if period <= 0:
                raise ValueError(
                    f"Invalid period for '{name}': {period}.\n"
                    "Periods must be positive, e.g. 6.283185307179586 for a 2π-periodic axis."
                )
        return value


class RWFConfig(_Section):
    """Random weight factorization s ~ N(mu, sigma); recommended mu=1.0, sigma=0.1"""

    mu: float = 1.0
    sigma: float = Field(0.1, ge=0)


class NetworkConfig(_Section):
    arch: Literal["plain", "modified"] = "modified"
    depth: int = Field(4, ge=1)
    width: int = Field(256, ge=1)
    activation: Literal["tanh", "gelu", "sin"] = "tanh"
    coords: List[str] = Field(default_factory=lambda: ["t", "x"])
    output_dim: int = Field(1, ge=1)
    fourier: Optional[FourierConfig] = None
    periodic: Optional[PeriodicConfig] = None
    rwf: Optional[RWFConfig] = None

    @field_validator("activation", mode="before")
    @classmethod
    def _reject_relu(cls, value):
        if isinstance(value, str) and value.lower() == "relu":
            raise ValueError(
                "ReLU is not supported: its second derivative vanishes, so residuals "
                "with u_xx or higher terms carry no signal.\n"
                "Use one of:\n"
                "  • 'tanh' (default)\n"
                "  • 'gelu'\n"
                "  • 'sin'"
            )
        return value

    @field_validator("coords")
    @classmethod
    def _known_coords(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("At least one input coordinate is required")
        unknown = [c for c in value if c not in COORDINATE_NAMES]
        if unknown or len(set(value)) != len(value):
            raise ValueError(
                f"Invalid coordinates {value}; use distinct names from {', '.join(COORDINATE_NAMES)}"
            )
        return value

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.periodic is not None:
            unknown = [name for name in self.periodic.periods if name not in self.coords]
            if unknown:
                raise ValueError(f"Periodic axes {unknown} are not network coordinates {self.coords}")
            if self.periodic.trainable_time and "t" not in self.coords:
                raise ValueError("trainable_time needs a 't' coordinate")
        if not 128 <= self.width <= 512:
            logger.warning(f"Network width {self.width} is outside the recommended range 128-512")
        if not 3 <= self.depth <= 6:
            logger.warning(f"Network depth {self.depth} is outside the recommended range 3-6")
        return self

    @property
    def input_dim(self) -> int:
        return len(self.coords)


# ========== TRAINING ==========


class WeightingConfig(_Section):
    mode: Literal["grad_norm", "ntk", "none"] = "grad_norm"
    causal: bool = True
    causal_tol: float = Field(1.0, gt=0)
    alpha: float = Field(0.9, ge=0, le=1)
    update_every: int = Field(1000, ge=1)
    chunks: int = Field(32, ge=1)
    ntk_batch: int = Field(64, ge=1)


class OptimizerConfig(_Section):
    learning_rate: float = Field(1e-3, gt=0)
    decay_rate: float = Field(0.9, gt=0, le=1)
    decay_steps: int = Field(2000, ge=1)
    steps: int = Field(10000, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class BatchConfig(_Section):
    n_ic: int = Field(512, ge=1)
    n_bc: int = Field(256, ge=1)
    n_r: int = Field(4096, ge=1)


class TimeMarchConfig(_Section):
    windows: int = Field(1, ge=1)
    steps_per_window: Optional[int] = Field(None, ge=0)
    transfer_points: int = Field(512, ge=8)
    warm_start: bool = True


class ContinuationConfig(_Section):
    constant: str
    values: List[float]
    steps: List[int]

    @model_validator(mode="after")
    def _matching_stages(self):
        if not self.values:
            raise ValueError("A continuation plan needs at least one stage")
        if len(self.values) != len(self.steps):
            raise ValueError(
                f"Continuation has {len(self.values)} values but {len(self.steps)} step budgets"
            )
        if any(s <= 0 for s in self.steps):
            raise ValueError(f"Continuation budgets must be positive, got {self.steps}")
        return self


class CurriculumConfig(_Section):
    kind: Literal["none", "time_march", "continuation"] = "none"
    time_march: TimeMarchConfig = Field(default_factory=TimeMarchConfig)
    continuation: Optional[ContinuationConfig] = None

    @model_validator(mode="after")
    def _plan_present(self):
        if self.kind == "continuation" and self.continuation is None:
            raise ValueError("curriculum.kind is 'continuation' but no continuation plan is given")
        return self


class ProblemConfig(_Section):
    name: str = "advection"
    overrides: Dict[str, float] = Field(default_factory=dict)
    t_max: Optional[float] = Field(None, gt=0)


class EvalConfig(_Section):
    nt: int = Field(101, ge=2)
    nx: int = Field(256, ge=2)
    every: int = Field(0, ge=0)
    n_modes: int = Field(512, ge=128)
    dt: Optional[float] = Field(None, gt=0)


class DiagnosticsConfig(_Section):
    every: int = Field(0, ge=0)
    which: List[Literal["ntk", "grads", "temporal"]] = Field(default_factory=list)
    batch: int = Field(64, ge=1, le=200)


class RunConfig(_Section):
    problem: ProblemConfig = Field(default_factory=ProblemConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    weighting: WeightingConfig = Field(default_factory=WeightingConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch: BatchConfig = Field(default_factory=BatchConfig)
    curriculum: CurriculumConfig = Field(default_factory=CurriculumConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    log_every: int = Field(100, ge=1)
    checkpoint_every: int = Field(0, ge=0)

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"Config file {path} must contain a mapping at the top level")
        return cls.model_validate(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def load_run_config(
    path: Union[str, Path], seed: Optional[int] = None, out: Optional[str] = None
) -> RunConfig:
    """Read a run config and apply command-line overrides"""
    config = RunConfig.from_yaml(path)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["output_dir"] = out
    return config.model_copy(update=updates) if updates else config


def _get_env_int(name: str, default: int) -> int:
    """Integer from the environment, falling back to ``default`` on bad values"""
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Invalid integer for {name}: {raw!r}, using default: {default}")
        return default


def _get_env_flag(name: str, default: bool = False) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


def cache_directory() -> Path:
    return Path(os.getenv("PINN_CACHE_DIR", str(Path.home() / ".cache" / "pinn-pipeline"))).expanduser()


def runs_directory() -> Path:
    return Path(os.getenv("PINN_RUNS_DIR", "runs")).expanduser()


def load_environment(*directories: Path) -> Dict[str, str]:
    """
    Load ``.env`` then ``.env.local`` from each directory (cwd first).

    Values never override variables already set in the environment.
    """
    values: Dict[str, str] = {}
    for directory in (Path("."),) + directories:
        for filename in (".env", ".env.local"):
            path = directory / filename
            if path.exists():
                values.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    for key, value in values.items():
        os.environ.setdefault(key, value)
    return values


def configure_logging() -> None:
    logging.basicConfig(
        level=logging.DEBUG if _get_env_flag("DEBUG") else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def ablation_workers() -> int:
    """Process-pool size for parallel ablations (PINN_ABLATION_WORKERS)"""
    workers = _get_env_int("PINN_ABLATION_WORKERS", os.cpu_count() or 1)
    if workers < 1:
        logger.warning(f"Invalid PINN_ABLATION_WORKERS={workers}, using 1")
        return 1
    return workers
