"""
Network architectures and coordinate embeddings.

Parameter segments are named ``<layer>/<tensor>``: hidden and output layers
are ``dense_0`` .. ``dense_L`` (``dense_L`` being the output layer), the
modified-MLP encoders are ``encoder_u`` and ``encoder_v``, and a trainable
time period is stored as ``embed/log_period_t``. Dense layers hold either
``W`` or, once factorized, the pair ``s`` / ``V``, plus ``b``. Weights are
stored (fan_in, fan_out) so a batch maps as ``x @ W + b``.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import JetBundle, Node, ParamLayout, ParamVector, Tape, exp
from .config import NetworkConfig
from .errors import AlreadyFactorized, InvalidPeriod, ShapeError

logger = logging.getLogger(__name__)

LOG_PERIOD_SEGMENT = "embed/log_period_t"
_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Network:
    """
    Immutable network: config, parameters and the fixed Fourier matrix.

    ``fourier_matrix`` has shape (features, embedded_dim) and never enters
    the parameter vector.
    """

    config: NetworkConfig
    params: ParamVector
    fourier_matrix: Optional[np.ndarray] = None
    factorized: bool = False

    @property
    def layout(self) -> ParamLayout:
        return self.params.layout

    def with_params(self, params: ParamVector) -> "Network":
        if params.layout.fingerprint() != self.layout.fingerprint():
            raise ShapeError("Parameter layout does not match this network")
        return replace(self, params=params)

    def jets(self, nodes: Mapping[str, Node], coords, orders: Mapping[int, int]) -> JetBundle:
        return apply_network(self, nodes, coords, orders)


# ========== LAYOUT ==========


def periodic_dims(config: NetworkConfig) -> List[Optional[float]]:
    """Per-coordinate period, or None for a raw coordinate"""
    periods = config.periodic.periods if config.periodic else {}
    trainable = bool(config.periodic and config.periodic.trainable_time)
    out: List[Optional[float]] = []
    for name in config.coords:
        if name == "t" and trainable:
            out.append(periods.get("t", -1.0))
        else:
            out.append(periods.get(name))
    return out


def embedded_dim(config: NetworkConfig) -> int:
    return sum(1 if p is None else 2 for p in periodic_dims(config))


def feature_dim(config: NetworkConfig) -> int:
    if config.fourier is not None:
        return 2 * config.fourier.features
    return embedded_dim(config)


def dense_layers(config: NetworkConfig) -> List[Tuple[str, int, int]]:
    """(prefix, fan_in, fan_out) for every dense layer in segment order"""
    d_in = feature_dim(config)
    layers = []
    if config.arch == "modified":
        layers.append(("encoder_u", d_in, config.width))
        layers.append(("encoder_v", d_in, config.width))
    for l in range(config.depth):
        layers.append((f"dense_{l}", d_in if l == 0 else config.width, config.width))
    layers.append((f"dense_{config.depth}", config.width, config.output_dim))
    return layers


def _has_trainable_period(config: NetworkConfig) -> bool:
    return bool(config.periodic and config.periodic.trainable_time)


# ========== CONSTRUCTION ==========


def init_glorot(config: NetworkConfig, seed: int, time_length: Optional[float] = None) -> Network:
    """
    Glorot-normal weights with variance 2/(fan_in + fan_out) and zero biases.

    The Fourier matrix is drawn from its own stream as ``scale * N(0, 1)``,
    so ``B / scale`` does not depend on the scale at a fixed seed. A
    trainable time period starts at the configured period, else at
    ``time_length``.
    """
    weight_rng = np.random.default_rng([seed, 0])
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    tensors: Dict[str, np.ndarray] = {}

    time_period = None
    if _has_trainable_period(config):
        time_period = config.periodic.periods.get("t", time_length)
        if time_period is None or time_period <= 0:
            raise InvalidPeriod(
                f"Invalid initial time period: {time_period}.\n"
                "Set network.periodic.periods.t or pass the temporal domain length."
            )
        shapes.append((LOG_PERIOD_SEGMENT, (1,)))
        tensors[LOG_PERIOD_SEGMENT] = np.array([math.log(time_period)])

    for prefix, fan_in, fan_out in dense_layers(config):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        shapes.append((f"{prefix}/W", (fan_in, fan_out)))
        shapes.append((f"{prefix}/b", (fan_out,)))
        tensors[f"{prefix}/W"] = weight_rng.normal(0.0, std, size=(fan_in, fan_out))
        tensors[f"{prefix}/b"] = np.zeros(fan_out)

    fourier = None
    if config.fourier is not None:
        fourier_rng = np.random.default_rng([seed, 1])
        standard = fourier_rng.standard_normal((config.fourier.features, embedded_dim(config)))
        fourier = config.fourier.scale * standard

    layout = ParamLayout.build(shapes)
    params = ParamVector.from_structured(layout, tensors)
    logger.debug(f"Initialized {config.arch} network with {layout.size} parameters (seed={seed})")
    return Network(config=config, params=params, fourier_matrix=fourier)


def apply_rwf(net: Network, mu: float, sigma: float, seed: int) -> Network:
    """
    Factorize every dense weight as diag(exp(s)) V with s ~ N(mu, sigma).

    V is set to exp(-s) W so the effective weight is unchanged at the moment
    of factorization.
    """
    if net.factorized:
        raise AlreadyFactorized(
            "Network is already factorized.\n"
            "apply_rwf must run once, directly after init_glorot."
        )
    rng = np.random.default_rng([seed, 2])
    old = net.params.to_structured()
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    tensors: Dict[str, np.ndarray] = {}
    for seg in net.layout.segments:
        if seg.name.endswith("/W"):
            prefix = seg.name[: -len("/W")]
            fan_out = seg.shape[1]
            s = mu + sigma * rng.standard_normal(fan_out)
            shapes.append((f"{prefix}/s", (fan_out,)))
            shapes.append((f"{prefix}/V", seg.shape))
            tensors[f"{prefix}/s"] = s
            tensors[f"{prefix}/V"] = old[seg.name] * np.exp(-s)[None, :]
        else:
            shapes.append((seg.name, seg.shape))
            tensors[seg.name] = old[seg.name]
    layout = ParamLayout.build(shapes)
    params = ParamVector.from_structured(layout, tensors)
    return replace(net, params=params, factorized=True)


def build_network(config: NetworkConfig, seed: int, time_length: Optional[float] = None) -> Network:
    net = init_glorot(config, seed, time_length=time_length)
    if config.rwf is not None:
        net = apply_rwf(net, config.rwf.mu, config.rwf.sigma, seed)
    return net


def effective_weights(net: Network, params: Optional[ParamVector] = None) -> Dict[str, np.ndarray]:
    """Dense weights as the forward pass sees them, keyed by layer prefix"""
    tensors = (params if params is not None else net.params).to_structured()
    out = {}
    for prefix, _, _ in dense_layers(net.config):
        if f"{prefix}/s" in tensors:
            out[prefix] = tensors[f"{prefix}/V"] * np.exp(tensors[f"{prefix}/s"])[None, :]
        else:
            out[prefix] = tensors[f"{prefix}/W"]
    return out


# ========== EMBEDDINGS ==========


def embed_fourier(x: np.ndarray, B: np.ndarray) -> np.ndarray:
    """[cos(Bx), sin(Bx)] for a single point (d,) or a batch (n, d)"""
    x = np.asarray(x, dtype=np.float64)
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if B.shape[1] != x.shape[-1]:
        raise ShapeError(
            f"Fourier matrix has {B.shape[1]} columns but the input has {x.shape[-1]} entries"
        )
    z = x @ B.T
    return np.concatenate([np.cos(z), np.sin(z)], axis=-1)


def embed_periodic(
    coords: np.ndarray,
    periods: Sequence[Optional[float]],
    time_period: Optional[float] = None,
) -> np.ndarray:
    """
    Map each periodic axis to (cos ωx, sin ωx) with ω = 2π/P; other axes pass through raw.

    ``time_period`` overrides the period of axis 0.
    """
    coords = np.asarray(coords, dtype=np.float64)
    periods = list(periods)
    if time_period is not None:
        periods[0] = time_period
    if len(periods) != coords.shape[-1]:
        raise ShapeError(f"Got {len(periods)} periods for {coords.shape[-1]} coordinates")
    parts = []
    for axis, period in enumerate(periods):
        column = coords[..., axis : axis + 1]
        if period is None:
            parts.append(column)
            continue
        _check_period(period, axis)
        omega = _TWO_PI / period
        parts.extend([np.cos(omega * column), np.sin(omega * column)])
    return np.concatenate(parts, axis=-1)


def _check_period(period: float, axis: int) -> None:
    if not period > 0:
        raise InvalidPeriod(f"Invalid period for axis {axis}: {period}. Periods must be positive.")


def _embed(net: Network, nodes: Mapping[str, Node], inputs: JetBundle) -> JetBundle:
    config = net.config
    parts = []
    for axis, period in enumerate(periodic_dims(config)):
        column = inputs.columns(axis, axis + 1)
        if period is None:
            parts.append(column)
            continue
        if config.coords[axis] == "t" and LOG_PERIOD_SEGMENT in nodes:
            omega = _TWO_PI * exp(-nodes[LOG_PERIOD_SEGMENT])
        else:
            _check_period(period, axis)
            omega = _TWO_PI / period
        phase = column.scale(omega)
        parts.extend([phase.activate("cos"), phase.activate("sin")])
    embedded = parts[0] if len(parts) == 1 else JetBundle.concat(parts)
    if net.fourier_matrix is None:
        return embedded
    projected = embedded.linear(net.fourier_matrix.T)
    return JetBundle.concat([projected.activate("cos"), projected.activate("sin")])


# ========== FORWARD PASS ==========


def _dense(nodes: Mapping[str, Node], prefix: str, h: JetBundle) -> JetBundle:
    if f"{prefix}/s" in nodes:
        weight = nodes[f"{prefix}/V"] * exp(nodes[f"{prefix}/s"])
    else:
        weight = nodes[f"{prefix}/W"]
    return h.linear(weight, nodes[f"{prefix}/b"])


def _mlp(net: Network, nodes: Mapping[str, Node], features: JetBundle) -> JetBundle:
    config = net.config
    act = config.activation
    if features.primal.shape[1] != feature_dim(config):
        raise ShapeError(
            f"Feature length {features.primal.shape[1]} does not match the first layer "
            f"({feature_dim(config)})"
        )
    h = features
    if config.arch == "modified":
        u = _dense(nodes, "encoder_u", features).activate(act)
        v = _dense(nodes, "encoder_v", features).activate(act)
        gap = u - v
        for l in range(config.depth):
            gate = _dense(nodes, f"dense_{l}", h).activate(act)
            h = v + gate * gap
            h.check_finite(l)
    else:
        for l in range(config.depth):
            h = _dense(nodes, f"dense_{l}", h).activate(act)
            h.check_finite(l)
    out = _dense(nodes, f"dense_{config.depth}", h)
    out.check_finite(config.depth)
    return out


def apply_network(
    net: Network, nodes: Mapping[str, Node], coords, orders: Mapping[int, int]
) -> JetBundle:
    """Embedding plus MLP on a batch of coordinates, carrying jets along ``orders``"""
    tape = next(iter(nodes.values())).tape
    inputs = JetBundle.inputs(tape, coords, orders)
    if inputs.primal.shape[1] != net.config.input_dim:
        raise ShapeError(
            f"Coordinates have {inputs.primal.shape[1]} columns, network expects "
            f"{net.config.input_dim} ({', '.join(net.config.coords)})"
        )
    return _mlp(net, nodes, _embed(net, nodes, inputs))


def forward(net: Network, features: np.ndarray, params: Optional[ParamVector] = None) -> np.ndarray:
    """MLP on already-embedded features; (d,) -> (out,) or (n, d) -> (n, out)"""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    tape = Tape(grad_enabled=False)
    nodes = tape.bind_params(params if params is not None else net.params)
    bundle = JetBundle.inputs(tape, np.atleast_2d(features), {})
    out = _mlp(net, nodes, bundle).primal.value
    return out[0] if single else out


def predict(
    net: Network,
    coords: np.ndarray,
    params: Optional[ParamVector] = None,
    batch_size: int = 4096,
) -> np.ndarray:
    """Network output on raw coordinates, evaluated in chunks without recording gradients"""
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    params = params if params is not None else net.params
    outputs = []
    for start in range(0, coords.shape[0], batch_size):
        tape = Tape(grad_enabled=False)
        nodes = tape.bind_params(params)
        bundle = apply_network(net, nodes, coords[start : start + batch_size], {})
        outputs.append(bundle.primal.value)
    if not outputs:
        return np.zeros((0, net.config.output_dim))
    return np.concatenate(outputs, axis=0)


def time_period_of(net: Network, params: Optional[ParamVector] = None) -> Optional[float]:
    """Current value of the trainable time period, if the network has one"""
    params = params if params is not None else net.params
    if LOG_PERIOD_SEGMENT not in params.layout:
        return None
    return float(np.exp(params.view(LOG_PERIOD_SEGMENT)[0]))
