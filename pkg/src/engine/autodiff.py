"""
Mixed-mode differentiation engine.

Input-coordinate derivatives are carried forward as truncated Taylor jets,
parameter gradients are accumulated in reverse over a tape that records every
primitive, including the jet arithmetic. Tape values are float64 numpy arrays
batched over collocation points; rows never interact, so each row is an
independent per-sample computation.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import InvalidNode, NumericalOverflow, ShapeError

logger = logging.getLogger(__name__)

LAYOUT_VERSION = 1
MAX_ORDER = 4
SUPPORTED_ORDERS = (0, 1, 2, 4)

ArrayLike = Union[float, np.ndarray]


# ========== PRIMITIVES ==========


@dataclass(frozen=True)
class Primitive:
    """A differentiable operation: forward rule plus vector-Jacobian product"""

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Tuple[Optional[np.ndarray], ...]]


PRIMITIVES: Dict[str, Primitive] = {}


def defprim(name: str, forward: Callable, vjp: Callable) -> None:
    """Register a primitive. ``vjp(g, out, inputs, **params)`` returns one adjoint per input."""
    PRIMITIVES[name] = Primitive(name=name, forward=forward, vjp=vjp)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint back down to the shape of a broadcast operand"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _sum_vjp(g, out, inputs, axis=None, keepdims=False):
    (x,) = inputs
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _getitem_vjp(g, out, inputs, index):
    (x,) = inputs
    grad = np.zeros_like(x)
    grad[index] = g
    return (grad,)


def _segment_forward(flat, offset, shape):
    size = int(np.prod(shape)) if shape else 1
    return flat[offset : offset + size].reshape(shape)


def _segment_vjp(g, out, inputs, offset, shape):
    (flat,) = inputs
    grad = np.zeros_like(flat)
    grad[offset : offset + g.size] = g.reshape(-1)
    return (grad,)


def _concat_vjp(g, out, inputs, axis):
    splits = np.cumsum([x.shape[axis] for x in inputs])[:-1]
    return tuple(np.split(g, splits, axis=axis))


_SQRT_PI_INV2 = 2.0 / math.sqrt(math.pi)

defprim("leaf", lambda: None, lambda g, out, inputs: ())
defprim(
    "add",
    lambda a, b: a + b,
    lambda g, out, inputs: (_unbroadcast(g, inputs[0].shape), _unbroadcast(g, inputs[1].shape)),
)
defprim(
    "sub",
    lambda a, b: a - b,
    lambda g, out, inputs: (_unbroadcast(g, inputs[0].shape), _unbroadcast(-g, inputs[1].shape)),
)
defprim(
    "mul",
    lambda a, b: a * b,
    lambda g, out, inputs: (
        _unbroadcast(g * inputs[1], inputs[0].shape),
        _unbroadcast(g * inputs[0], inputs[1].shape),
    ),
)
defprim(
    "div",
    lambda a, b: a / b,
    lambda g, out, inputs: (
        _unbroadcast(g / inputs[1], inputs[0].shape),
        _unbroadcast(-g * out / inputs[1], inputs[1].shape),
    ),
)
defprim("neg", lambda a: -a, lambda g, out, inputs: (-g,))
defprim(
    "power",
    lambda a, p: a**p,
    lambda g, out, inputs, p: (g * p * inputs[0] ** (p - 1),),
)
defprim(
    "matmul",
    lambda a, b: a @ b,
    lambda g, out, inputs: (g @ inputs[1].T, inputs[0].T @ g),
)
defprim("transpose", lambda a: a.T, lambda g, out, inputs: (g.T,))
defprim(
    "sum",
    lambda a, axis=None, keepdims=False: np.asarray(a.sum(axis=axis, keepdims=keepdims)),
    _sum_vjp,
)
defprim(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda g, out, inputs, shape: (g.reshape(inputs[0].shape),),
)
defprim("getitem", lambda a, index: a[index], _getitem_vjp)
defprim("segment", _segment_forward, _segment_vjp)
defprim("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp)
defprim("tanh", np.tanh, lambda g, out, inputs: (g * (1.0 - out * out),))
defprim("sin", np.sin, lambda g, out, inputs: (g * np.cos(inputs[0]),))
defprim("cos", np.cos, lambda g, out, inputs: (-g * np.sin(inputs[0]),))
defprim("exp", np.exp, lambda g, out, inputs: (g * out,))
defprim(
    "erf",
    special.erf,
    lambda g, out, inputs: (g * _SQRT_PI_INV2 * np.exp(-inputs[0] ** 2),),
)
defprim("stop_gradient", lambda a: a.copy(), lambda g, out, inputs: (None,))


# ========== TAPE ==========


class Node:
    """Handle to a value recorded on a tape"""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # numpy defers to the reflected operators below

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Node(index={self.index}, op={self.tape.ops[self.index]!r}, shape={self.shape})"

    def _apply(self, name: str, *others, **params) -> "Node":
        return self.tape.apply(name, self, *others, **params)

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    def __radd__(self, other):
        return self.tape.apply("add", other, self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        return self.tape.apply("mul", self, other)

    def __rmul__(self, other):
        return self.tape.apply("mul", other, self)

    def __truediv__(self, other):
        return self.tape.apply("div", self, other)

    def __rtruediv__(self, other):
        return self.tape.apply("div", other, self)

    def __neg__(self):
        return self._apply("neg")

    def __pow__(self, p: int):
        if not isinstance(p, int):
            raise TypeError("Node powers are restricted to integer exponents")
        return self._apply("power", p=p)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", other, self)

    def __getitem__(self, index):
        return self._apply("getitem", index=index)

    @property
    def T(self) -> "Node":
        return self._apply("transpose")

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Node":
        return self._apply("sum", axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None) -> "Node":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    def reshape(self, *shape) -> "Node":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._apply("reshape", shape=tuple(shape))

    def tanh(self) -> "Node":
        return self._apply("tanh")

    def sin(self) -> "Node":
        return self._apply("sin")

    def cos(self) -> "Node":
        return self._apply("cos")

    def exp(self) -> "Node":
        return self._apply("exp")

    def erf(self) -> "Node":
        return self._apply("erf")


class Tape:
    """
    Append-only record of primitive applications.

    Every operand index precedes its node, so a reverse sweep over the index
    range visits nodes in reverse topological order. With ``grad_enabled``
    false the tape only evaluates: nodes are stored without parents, which
    keeps large prediction batches cheap but makes the tape non-replayable.
    """

    def __init__(self, grad_enabled: bool = True):
        self.grad_enabled = grad_enabled
        self.ops: List[str] = []
        self.parents: List[Tuple[int, ...]] = []
        self.params: List[Dict[str, Any]] = []
        self.values: List[np.ndarray] = []
        self.requires_grad: List[bool] = []
        self.param_leaf: Optional[int] = None
        self.layout: Optional["ParamLayout"] = None

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, op, parents, params, value, requires_grad) -> Node:
        self.ops.append(op)
        self.parents.append(parents)
        self.params.append(params)
        self.values.append(value)
        self.requires_grad.append(requires_grad)
        return Node(self, len(self.values) - 1)

    def leaf(self, value: ArrayLike, requires_grad: bool = True) -> Node:
        """Record an input value; gradients flow into it when ``requires_grad``"""
        value = np.array(value, dtype=np.float64)
        return self._push("leaf", (), {}, value, requires_grad and self.grad_enabled)

    def constant(self, value: ArrayLike) -> Node:
        return self.leaf(value, requires_grad=False)

    def lift(self, x: Any) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise InvalidNode("Cannot combine nodes recorded on different tapes")
            return x
        return self.constant(x)

    def apply(self, name: str, *inputs, **params) -> Node:
        """Evaluate primitive ``name`` on ``inputs`` and record it"""
        prim = PRIMITIVES[name]
        nodes = [self.lift(x) for x in inputs]
        value = np.asarray(prim.forward(*(n.value for n in nodes), **params), dtype=np.float64)
        if not self.grad_enabled:
            return self._push(name, (), params, value, False)
        requires_grad = name != "stop_gradient" and any(
            self.requires_grad[n.index] for n in nodes
        )
        return self._push(name, tuple(n.index for n in nodes), params, value, requires_grad)

    def bind_params(self, params: "ParamVector") -> Dict[str, Node]:
        """Record ``params`` as one flat leaf and return a node per named segment"""
        flat = self.leaf(params.flat, requires_grad=True)
        self.param_leaf = flat.index
        self.layout = params.layout
        return {
            seg.name: self.apply("segment", flat, offset=seg.offset, shape=seg.shape)
            for seg in params.layout.segments
        }

    def replay(self, leaves: Optional[Mapping[int, ArrayLike]] = None) -> List[np.ndarray]:
        """Recompute every value from the leaves, optionally substituting some of them"""
        values = list(self.values)
        for i, op in enumerate(self.ops):
            parents = self.parents[i]
            if not parents:
                if leaves and i in leaves:
                    values[i] = np.array(leaves[i], dtype=np.float64)
                continue
            prim = PRIMITIVES[op]
            values[i] = np.asarray(
                prim.forward(*(values[p] for p in parents), **self.params[i]),
                dtype=np.float64,
            )
        return values

    def _resolve(self, output: Union[Node, int]) -> int:
        index = output.index if isinstance(output, Node) else output
        if isinstance(output, Node) and output.tape is not self:
            raise InvalidNode("Node was recorded on a different tape")
        if not isinstance(index, (int, np.integer)) or not 0 <= index < len(self):
            raise InvalidNode(
                f"Invalid node index: {index!r}.\n"
                f"The tape holds {len(self)} nodes; pass a Node returned by this tape."
            )
        return int(index)

    def backward(
        self, output: Union[Node, int], seed: Optional[np.ndarray] = None
    ) -> List[Optional[np.ndarray]]:
        """
        Reverse sweep from ``output``.

        Returns adjoints indexed by node; interior adjoints are released once
        consumed, leaf adjoints are kept.
        """
        index = self._resolve(output)
        out_value = self.values[index]
        if seed is None:
            if out_value.size != 1:
                raise InvalidNode(
                    f"Node {index} is not a scalar (shape {out_value.shape}).\n"
                    "Reduce it to a scalar loss first, or pass an explicit seed."
                )
            seed = np.ones_like(out_value)
        elif np.shape(seed) != out_value.shape:
            raise ShapeError(f"Seed shape {np.shape(seed)} does not match node shape {out_value.shape}")

        adjoints: List[Optional[np.ndarray]] = [None] * (index + 1)
        adjoints[index] = np.asarray(seed, dtype=np.float64)
        for i in range(index, -1, -1):
            g = adjoints[i]
            parents = self.parents[i]
            if g is None or not parents or not self.requires_grad[i]:
                continue
            prim = PRIMITIVES[self.ops[i]]
            grads = prim.vjp(g, self.values[i], tuple(self.values[p] for p in parents), **self.params[i])
            for p, gp in zip(parents, grads):
                if gp is None or not self.requires_grad[p]:
                    continue
                adjoints[p] = gp if adjoints[p] is None else adjoints[p] + gp
            adjoints[i] = None
        return adjoints

    def param_gradient(self, output: Union[Node, int], seed: Optional[np.ndarray] = None) -> np.ndarray:
        """Flat adjoint of the bound parameter leaf (zeros where unreached)"""
        if self.param_leaf is None:
            raise InvalidNode("No parameters are bound to this tape; call bind_params first")
        adjoints = self.backward(output, seed)
        grad = adjoints[self.param_leaf] if self.param_leaf < len(adjoints) else None
        if grad is None:
            return np.zeros_like(self.values[self.param_leaf])
        return np.asarray(grad, dtype=np.float64)


def stop_gradient(x: Any) -> Any:
    """Pass the value through; the reverse sweep treats it as a constant"""
    if isinstance(x, Node):
        return x.tape.apply("stop_gradient", x)
    return x


def _dispatch(name: str, numeric: Callable) -> Callable:
    def op(x):
        if isinstance(x, Node):
            return x.tape.apply(name, x)
        return numeric(x)

    op.__name__ = name
    return op


tanh = _dispatch("tanh", np.tanh)
sin = _dispatch("sin", np.sin)
cos = _dispatch("cos", np.cos)
exp = _dispatch("exp", np.exp)
erf = _dispatch("erf", special.erf)


def concat(items: Sequence[Any], axis: int = -1) -> Any:
    nodes = [x for x in items if isinstance(x, Node)]
    if not nodes:
        return np.concatenate([np.asarray(x) for x in items], axis=axis)
    tape = nodes[0].tape
    values = [tape.lift(x) for x in items]
    axis = axis if axis >= 0 else values[0].value.ndim + axis
    return tape.apply("concat", *values, axis=axis)


def value_of(x: Any) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


# ========== PARAMETER VECTORS ==========


@dataclass(frozen=True)
class Segment:
    """A named slice of the flat parameter array"""

    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True)
class ParamLayout:
    """Ordered segment table; its fingerprint guards checkpoint compatibility"""

    segments: Tuple[Segment, ...]
    version: int = LAYOUT_VERSION

    @classmethod
    def build(cls, shapes: Sequence[Tuple[str, Tuple[int, ...]]]) -> "ParamLayout":
        segments, offset = [], 0
        for name, shape in shapes:
            seg = Segment(name=name, offset=offset, shape=tuple(int(s) for s in shape))
            segments.append(seg)
            offset += seg.size
        names = [s.name for s in segments]
        if len(set(names)) != len(names):
            raise ShapeError(f"Duplicate segment names in layout: {names}")
        return cls(segments=tuple(segments))

    @property
    def size(self) -> int:
        if not self.segments:
            return 0
        last = self.segments[-1]
        return last.offset + last.size

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.segments]

    def get(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(f"No segment named '{name}' (available: {', '.join(self.names)})")

    def __contains__(self, name: str) -> bool:
        return any(s.name == name for s in self.segments)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "segments": [
                {"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in self.segments
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ParamLayout":
        segments = tuple(
            Segment(name=s["name"], offset=int(s["offset"]), shape=tuple(s["shape"]))
            for s in data["segments"]
        )
        return cls(segments=segments, version=int(data.get("version", LAYOUT_VERSION)))

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


class ParamVector:
    """Contiguous float64 parameters addressed through a ParamLayout"""

    def __init__(self, layout: ParamLayout, flat: Optional[np.ndarray] = None):
        if flat is None:
            flat = np.zeros(layout.size)
        flat = np.array(flat, dtype=np.float64).reshape(-1)
        if flat.size != layout.size:
            raise ShapeError(f"Flat array has {flat.size} entries but layout needs {layout.size}")
        flat.flags.writeable = False
        self.layout = layout
        self.flat = flat

    def __len__(self) -> int:
        return self.flat.size

    def __repr__(self) -> str:
        return f"ParamVector(size={self.flat.size}, segments={len(self.layout.segments)})"

    def view(self, name: str) -> np.ndarray:
        seg = self.layout.get(name)
        return self.flat[seg.offset : seg.offset + seg.size].reshape(seg.shape)

    def to_structured(self) -> Dict[str, np.ndarray]:
        return {seg.name: self.view(seg.name).copy() for seg in self.layout.segments}

    @classmethod
    def from_structured(cls, layout: ParamLayout, tensors: Mapping[str, ArrayLike]) -> "ParamVector":
        flat = np.zeros(layout.size)
        for seg in layout.segments:
            value = np.asarray(tensors[seg.name], dtype=np.float64)
            if value.shape != seg.shape:
                raise ShapeError(f"Segment '{seg.name}' expects shape {seg.shape}, got {value.shape}")
            flat[seg.offset : seg.offset + seg.size] = value.reshape(-1)
        return cls(layout, flat)

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        return ParamVector(self.layout, flat)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


def loss_grad(tape: Tape, loss_index: Union[Node, int]) -> ParamVector:
    """Exact reverse-mode gradient of a recorded scalar w.r.t. the bound parameters"""
    grad = tape.param_gradient(loss_index)
    return ParamVector(tape.layout, grad)


def per_sample_gradients(tape: Tape, outputs: Node) -> np.ndarray:
    """Jacobian rows d outputs[i] / d params, one reverse sweep per sample"""
    if outputs.value.ndim != 1:
        raise ShapeError(f"Per-sample outputs must be a vector, got shape {outputs.shape}")
    rows = []
    for i in range(outputs.size):
        seed = np.zeros(outputs.shape)
        seed[i] = 1.0
        rows.append(tape.param_gradient(outputs, seed))
    if not rows:
        return np.zeros((0, tape.layout.size if tape.layout else 0))
    return np.stack(rows)


# ========== TAYLOR JETS ==========


def _truncated_product(a: Sequence[Any], b: Sequence[Any], order: int, start: int = 0) -> List[Any]:
    """Cauchy product of two series truncated at ``order``; ``None`` marks a zero coefficient"""
    out: List[Any] = []
    for k in range(start, order + 1):
        acc = None
        for i in range(k + 1):
            if a[i] is None or b[k - i] is None:
                continue
            term = a[i] * b[k - i]
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


def _compose(derivs: Sequence[Any], series: Sequence[Any], order: int) -> List[Any]:
    """
    Coefficients 1..order of f(a(h)) given f's derivatives at a(0).

    Sums d_n/n! times the n-th power of the non-constant part of ``series``.
    """
    delta = [None] + list(series[1:])
    out: List[Any] = [None] * (order + 1)
    power = delta
    for n in range(1, order + 1):
        scaled = derivs[n] * (1.0 / math.factorial(n))
        for k in range(n, order + 1):
            if power[k] is None:
                continue
            term = power[k] * scaled
            out[k] = term if out[k] is None else out[k] + term
        if n < order:
            power = [None] + _truncated_product(power, delta, order, start=1)
    return out[1:]


def derivative_table(activation: str, a0: Any, order: int) -> List[Any]:
    """Derivatives 0..order of ``activation`` at ``a0`` (floats or tape nodes)"""
    if activation == "tanh":
        y = tanh(a0)
        derivs = [y]
        if order >= 1:
            s = 1.0 - y * y
            derivs.append(s)
        if order >= 2:
            derivs.append(-2.0 * y * s)
        if order >= 3:
            y2 = y * y
            derivs.append(s * (6.0 * y2 - 2.0))
        if order >= 4:
            derivs.append(8.0 * y * s * (2.0 - 3.0 * y2))
        return derivs
    if activation in ("sin", "cos"):
        s = sin(a0)
        if order == 0 and activation == "sin":
            return [s]
        c = cos(a0)
        cycle = [s, c, -s, -c] if activation == "sin" else [c, -s, -c, s]
        return [cycle[j % 4] for j in range(order + 1)]
    if activation == "exp":
        e = exp(a0)
        return [e] * (order + 1)
    if activation == "gelu":
        cdf = 0.5 * (1.0 + erf(a0 * (1.0 / math.sqrt(2.0))))
        derivs = [a0 * cdf]
        if order == 0:
            return derivs
        pdf = exp(-0.5 * (a0 * a0)) * (1.0 / math.sqrt(2.0 * math.pi))
        derivs.append(cdf + a0 * pdf)
        if order >= 2:
            a2 = a0 * a0
            derivs.append(pdf * (2.0 - a2))
        if order >= 3:
            derivs.append(pdf * (a2 * a0 - 4.0 * a0))
        if order >= 4:
            derivs.append(pdf * (7.0 * a2 - a2 * a2 - 4.0))
        return derivs
    raise ValueError(f"No derivative table for activation '{activation}'")


class Jet:
    """
    Truncated Taylor series of a scalar along one direction.

    ``coeffs[j]`` is the j-th derivative divided by j!. Coefficients may be
    plain numbers, numpy arrays (one entry per sample) or tape nodes.
    """

    def __init__(self, coeffs: Sequence[Any]):
        coeffs = list(coeffs)
        if not coeffs:
            raise ShapeError("A jet needs at least the value coefficient")
        if len(coeffs) - 1 > MAX_ORDER:
            raise ShapeError(f"Jet order {len(coeffs) - 1} exceeds the supported maximum of {MAX_ORDER}")
        for j, c in enumerate(coeffs):
            if not isinstance(c, Node) and not np.all(np.isfinite(c)):
                raise NumericalOverflow(f"Jet coefficient {j} is not finite: {c!r}")
        self.coeffs = coeffs

    @classmethod
    def variable(cls, value: ArrayLike, order: int) -> "Jet":
        return cls([value, 1.0] + [0.0] * (order - 1) if order else [value])

    @classmethod
    def constant(cls, value: ArrayLike, order: int) -> "Jet":
        return cls([value] + [0.0] * order)

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    @property
    def value(self) -> Any:
        return self.coeffs[0]

    def derivative(self, j: int) -> Any:
        """Un-normalized j-th derivative"""
        if not 0 <= j <= self.order:
            raise ShapeError(f"Derivative order {j} outside jet order {self.order}")
        return self.coeffs[j] * float(math.factorial(j))

    def derivatives(self) -> List[Any]:
        return [self.derivative(j) for j in range(self.order + 1)]

    def _check(self, other: "Jet") -> None:
        if other.order != self.order:
            raise ShapeError(f"Jet orders differ: {self.order} vs {other.order}")

    def __add__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return Jet([a + b for a, b in zip(self.coeffs, other.coeffs)])
        return Jet([self.coeffs[0] + other] + self.coeffs[1:])

    __radd__ = __add__

    def __neg__(self):
        return Jet([-c for c in self.coeffs])

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return Jet(_truncated_product(self.coeffs, other.coeffs, self.order))
        return Jet([c * other for c in self.coeffs])

    __rmul__ = __mul__

    def apply(self, activation: str) -> "Jet":
        """Push the jet through an elementwise function"""
        derivs = derivative_table(activation, self.coeffs[0], self.order)
        rest = _compose(derivs, self.coeffs, self.order)
        return Jet([derivs[0]] + [0.0 * self.coeffs[0] if c is None else c for c in rest])

    def to_floats(self) -> List[float]:
        return [float(np.asarray(value_of(c)).reshape(-1)[0]) for c in self.coeffs]

    def __repr__(self) -> str:
        return f"Jet(order={self.order}, coeffs={self.coeffs!r})"


class JetBundle:
    """
    A batch of network activations with per-axis Taylor series.

    All axes share one primal; ``series[axis]`` holds coefficients 1..K for
    that input axis, ``None`` marking a coefficient that is identically zero.
    """

    def __init__(self, tape: Tape, primal: Node, series: Dict[int, List[Optional[Node]]]):
        self.tape = tape
        self.primal = primal
        self.series = series

    @classmethod
    def inputs(cls, tape: Tape, coords: Any, orders: Mapping[int, int]) -> "JetBundle":
        primal = coords if isinstance(coords, Node) else tape.constant(coords)
        if primal.value.ndim != 2:
            raise ShapeError(f"Coordinates must be a (batch, dim) array, got shape {primal.shape}")
        n, dim = primal.shape
        series: Dict[int, List[Optional[Node]]] = {}
        for axis, order in orders.items():
            if order == 0:
                continue
            if not 0 <= axis < dim:
                raise ShapeError(f"Direction {axis} does not index one of the {dim} network inputs")
            if order > MAX_ORDER:
                raise ShapeError(f"Derivative order {order} exceeds the supported maximum of {MAX_ORDER}")
            unit = np.zeros((n, dim))
            unit[:, axis] = 1.0
            series[axis] = [tape.constant(unit)] + [None] * (order - 1)
        return cls(tape, primal, series)

    @property
    def orders(self) -> Dict[int, int]:
        return {axis: len(coeffs) for axis, coeffs in self.series.items()}

    def _map_series(self, fn: Callable[[Node], Node]) -> Dict[int, List[Optional[Node]]]:
        return {
            axis: [None if c is None else fn(c) for c in coeffs] for axis, coeffs in self.series.items()
        }

    def linear(self, weight: Any, bias: Optional[Any] = None) -> "JetBundle":
        primal = self.primal @ weight
        if bias is not None:
            primal = primal + bias
        return JetBundle(self.tape, primal, self._map_series(lambda c: c @ weight))

    def scale(self, factor: Any) -> "JetBundle":
        return JetBundle(self.tape, self.primal * factor, self._map_series(lambda c: c * factor))

    def activate(self, activation: str) -> "JetBundle":
        max_order = max(self.orders.values(), default=0)
        derivs = derivative_table(activation, self.primal, max_order)
        series = {
            axis: _compose(derivs, [self.primal] + coeffs, len(coeffs))
            for axis, coeffs in self.series.items()
        }
        return JetBundle(self.tape, derivs[0], series)

    def __add__(self, other: "JetBundle") -> "JetBundle":
        series = {}
        for axis, coeffs in self.series.items():
            series[axis] = [
                a if b is None else (b if a is None else a + b)
                for a, b in zip(coeffs, other.series[axis])
            ]
        return JetBundle(self.tape, self.primal + other.primal, series)

    def __sub__(self, other: "JetBundle") -> "JetBundle":
        return self + other.scale(-1.0)

    def __mul__(self, other: "JetBundle") -> "JetBundle":
        series = {}
        for axis, coeffs in self.series.items():
            a = [self.primal] + coeffs
            b = [other.primal] + other.series[axis]
            series[axis] = _truncated_product(a, b, len(coeffs), start=1)
        return JetBundle(self.tape, self.primal * other.primal, series)

    def columns(self, start: int, stop: int) -> "JetBundle":
        index = (slice(None), slice(start, stop))
        return JetBundle(self.tape, self.primal[index], self._map_series(lambda c: c[index]))

    @staticmethod
    def concat(bundles: Sequence["JetBundle"]) -> "JetBundle":
        tape = bundles[0].tape
        primal = concat([b.primal for b in bundles], axis=1)
        series = {}
        for axis, coeffs in bundles[0].series.items():
            merged = []
            for k in range(len(coeffs)):
                parts = [b.series[axis][k] for b in bundles]
                if all(p is None for p in parts):
                    merged.append(None)
                    continue
                filled = [
                    tape.constant(np.zeros(b.primal.shape)) if p is None else p
                    for p, b in zip(parts, bundles)
                ]
                merged.append(concat(filled, axis=1))
            series[axis] = merged
        return JetBundle(tape, primal, series)

    def check_finite(self, layer: int) -> None:
        arrays = [self.primal] + [c for coeffs in self.series.values() for c in coeffs if c is not None]
        for node in arrays:
            if not np.all(np.isfinite(node.value)):
                raise NumericalOverflow(
                    f"Non-finite activation in layer {layer}.\n"
                    "Common causes:\n"
                    "  • learning rate too large for the current loss scale\n"
                    "  • inputs far outside the training domain\n"
                    "  • an unnormalized problem (consider nondimensionalizing)",
                    layer=layer,
                )

    def value(self, column: int = 0) -> Node:
        return self.primal[:, column]

    def coefficient(self, axis: int, j: int, column: int = 0) -> Node:
        if j == 0:
            return self.value(column)
        coeffs = self.series.get(axis)
        if coeffs is None or j > len(coeffs):
            raise ShapeError(f"Axis {axis} carries no coefficient of order {j}")
        c = coeffs[j - 1]
        if c is None:
            return self.tape.constant(np.zeros(self.primal.shape[0]))
        return c[:, column]

    def derivative(self, axis: int, j: int, column: int = 0) -> Node:
        """Un-normalized j-th derivative of output ``column`` along ``axis``"""
        coeff = self.coefficient(axis, j, column)
        return coeff if j <= 1 else coeff * float(math.factorial(j))

    def jet(self, axis: int, column: int = 0) -> Jet:
        order = len(self.series.get(axis, []))
        return Jet([self.coefficient(axis, j, column) for j in range(order + 1)])


def jet_eval(net, params: Optional[ParamVector], point: Sequence[float], direction: int, order: int) -> Jet:
    """
    Taylor jet of the scalar network output at ``point`` along input axis ``direction``.

    Coefficient j equals the j-th directional derivative divided by j!.
    """
    if order not in SUPPORTED_ORDERS:
        raise ShapeError(f"Unsupported jet order {order}; choose one of {SUPPORTED_ORDERS}")
    point = np.asarray(point, dtype=np.float64).reshape(1, -1)
    tape = Tape()
    nodes = tape.bind_params(params if params is not None else net.params)
    orders = {direction: order} if order else {}
    if not 0 <= direction < point.shape[1]:
        raise ShapeError(f"Direction {direction} does not index one of the {point.shape[1]} inputs")
    bundle = net.jets(nodes, point, orders)
    return Jet(bundle.jet(direction).to_floats())
