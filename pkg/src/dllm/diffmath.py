"""Minimal reverse-mode autodiff on numpy arrays.

Just enough machinery to train the small dense/recurrent networks used by
the rest of the package: a Wengert-list tape, float64 tensors, the handful
of primitive ops the models need, an adaptive-moment optimizer, and a
binary checkpoint format. Single-threaded per tape; tensors are plain data.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit as _sigmoid_data

DTYPE = np.float64

# Floor mixed into every categorical before log/KL so probabilities never
# underflow to zero.
EPS_PROB = 1e-8


class DiffMathError(Exception):
    pass


class ShapeMismatchError(DiffMathError):
    pass


class NonFiniteError(DiffMathError):
    pass


class MissingGradientError(DiffMathError):
    pass


# ---------------------------------------------------------------------------
# Tape and tensors
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of op output nodes, in creation (topological) order."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A numpy array plus an optional gradient accumulator.

    Leaf tensors with ``requires_grad`` collect gradients across backward
    calls; op outputs carry a vjp closure and live on the tape that was
    active when they were created.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        out._parents = parents
        out._vjp = vjp
        out._tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the shape of its source."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matmul that gives batch-size-independent rows.

    BLAS routes single-row products through a different kernel than
    multi-row ones, which breaks bit-equality between a batched forward
    pass and the same rows computed one at a time. Padding one-row inputs
    to two rows keeps every product on the row-parallel kernel.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.shape[0] == 1:
        padded = np.concatenate([a, a], axis=0)
        return (padded @ b)[:1]
    return a @ b


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = matmul_data(a.data, b.data)

    def vjp(g):
        return matmul_data(g, b.data.T), matmul_data(a.data.T, g)

    return _node(out, (a, b), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_data(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    """x * sigmoid(x), the smooth hidden activation used throughout."""
    a = _as_tensor(a)
    s = _sigmoid_data(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _node(out, (a,), vjp)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def maximum_const(a, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient flows only above the floor."""
    a = _as_tensor(a)
    out = np.maximum(a.data, floor)
    mask = (a.data > floor).astype(DTYPE)
    return _node(out, (a,), lambda g: (g * mask,))


def clip_const(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = ((a.data > lo) & (a.data < hi)).astype(DTYPE)
    return _node(out, (a,), lambda g: (g * mask,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _node(out, tuple(ts), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    a = _as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.data.shape),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (a,), vjp)


def xlogy_const(target: np.ndarray, p) -> Tensor:
    """target * log(p) with the 0*log(0) = 0 convention; target is constant."""
    p = _as_tensor(p)
    target = np.asarray(target, dtype=DTYPE)
    out = np.zeros(np.broadcast_shapes(target.shape, p.data.shape), dtype=DTYPE)
    mask = np.broadcast_to(target, out.shape) != 0
    tb = np.broadcast_to(target, out.shape)
    pb = np.broadcast_to(p.data, out.shape)
    out[mask] = tb[mask] * np.log(pb[mask])

    def vjp(g):
        grad = np.zeros(out.shape, dtype=DTYPE)
        grad[mask] = g[mask] * tb[mask] / pb[mask]
        return (_unbroadcast(grad, p.data.shape),)

    return _node(out, (p,), vjp)


def plogp(p) -> Tensor:
    """p * log(p) with both factors differentiable; requires p > 0."""
    p = _as_tensor(p)
    out = p.data * np.log(p.data)

    def vjp(g):
        return (g * (np.log(p.data) + 1.0),)

    return _node(out, (p,), vjp)


def stop_gradient(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.data.copy())


def straight_through(probs, sample: np.ndarray) -> Tensor:
    """Forward the hard sample, route gradients to the distribution."""
    probs = _as_tensor(probs)
    sample = np.asarray(sample, dtype=DTYPE)
    if sample.shape != probs.data.shape:
        raise ShapeMismatchError("sample and distribution shapes differ")
    return _node(sample.copy(), (probs,), lambda g: (g.copy(),))


def floor_probs(p, n_classes: int, eps: float = EPS_PROB) -> Tensor:
    """Mix a uniform floor into a categorical so every entry is >= eps."""
    scale = 1.0 - n_classes * eps
    return add(mul(p, scale), eps)


def floor_probs_data(p: np.ndarray, n_classes: int, eps: float = EPS_PROB) -> np.ndarray:
    return p * (1.0 - n_classes * eps) + eps


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into every reachable leaf's ``grad``.

    Repeated calls without zeroing keep accumulating. Intermediate node
    gradients live in a per-call buffer, so calling backward twice on the
    same tape doubles leaf gradients exactly.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss is not finite")
    tape = loss._tape
    if tape is None:
        raise DiffMathError("loss was not recorded on a tape")

    buffer: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: list[Tensor] = []
    for node in reversed(tape.nodes):
        g = buffer.pop(id(node), None)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if parent._tape is tape:
                prev = buffer.get(id(parent))
                # vjps may hand back the upstream grad itself, so stored
                # buffers are never mutated in place
                buffer[id(parent)] = pg if prev is None else prev + pg
            elif parent.requires_grad:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                    touched.append(parent)
                parent.grad += pg
    for leaf in touched:
        if not np.all(np.isfinite(leaf.grad)):
            raise NonFiniteError("NaN or Inf gradient produced during backward")


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------

class _AdamSlot:
    __slots__ = ("m", "v", "step")

    def __init__(self, shape):
        self.m = np.zeros(shape, dtype=DTYPE)
        self.v = np.zeros(shape, dtype=DTYPE)
        self.step = 0


class ParameterSet:
    """Named trainable tensors with per-parameter adaptive-moment state."""

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self._slots: dict[str, _AdamSlot] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise DiffMathError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        self._slots[name] = _AdamSlot(t.data.shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def step_count(self, name: str) -> int:
        return self._slots[name].step

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            src = np.asarray(arrays[name], dtype=DTYPE)
            if src.shape != p.data.shape:
                raise ShapeMismatchError(f"checkpoint shape mismatch for {name}")
            p.data = src.copy()


def optimizer_step(
    params: ParameterSet,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected adaptive-moment update; zeroes gradients after."""
    for name, p in params:
        if p.grad is None:
            raise MissingGradientError(f"parameter {name} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    for name, p in params:
        slot = params._slots[name]
        g = p.grad
        slot.step += 1
        slot.m = beta1 * slot.m + (1.0 - beta1) * g
        slot.v = beta2 * slot.v + (1.0 - beta2) * g * g
        mhat = slot.m / (1.0 - beta1**slot.step)
        vhat = slot.v / (1.0 - beta2**slot.step)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "linear": lambda t: t,
    "silu": silu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


class Dense:
    """y = activation(x W + b)."""

    def __init__(self, params: ParameterSet, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator, activation: str = "linear"):
        self.w = params.add(f"{name}.w", uniform_init(rng, in_dim, (in_dim, out_dim)))
        self.b = params.add(f"{name}.b", uniform_init(rng, in_dim, (out_dim,)))
        if activation not in ACTIVATIONS:
            raise DiffMathError(f"unknown activation: {activation}")
        self.activation = activation

    def __call__(self, x) -> Tensor:
        y = add(matmul(x, self.w), self.b)
        return ACTIVATIONS[self.activation](y)


class MLP:
    """Stack of dense layers, silu hidden activations by default.

    ``zero_output`` starts the final layer at exactly zero so heads begin
    with neutral predictions (uniform distributions, zero values).
    """

    def __init__(self, params: ParameterSet, name: str, in_dim: int,
                 hidden: Sequence[int], out_dim: int, rng: np.random.Generator,
                 hidden_activation: str = "silu", out_activation: str = "linear",
                 zero_output: bool = False):
        self.layers: list[Dense] = []
        prev = in_dim
        for i, width in enumerate(hidden):
            self.layers.append(Dense(params, f"{name}.h{i}", prev, width, rng, hidden_activation))
            prev = width
        out = Dense(params, f"{name}.out", prev, out_dim, rng, out_activation)
        if zero_output:
            out.w.data[:] = 0.0
            out.b.data[:] = 0.0
        self.layers.append(out)

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class GRUCell:
    """Gated recurrent cell; the update gate carries the previous state.

    h' = u * h + (1 - u) * cand, so a saturated update gate (large bias)
    freezes the state.
    """

    def __init__(self, params: ParameterSet, name: str, in_dim: int, width: int,
                 rng: np.random.Generator):
        self.width = width
        self.w_x = params.add(f"{name}.w_x", uniform_init(rng, in_dim, (in_dim, 3 * width)))
        self.w_h = params.add(f"{name}.w_h", uniform_init(rng, width, (width, 2 * width)))
        self.w_hc = params.add(f"{name}.w_hc", uniform_init(rng, width, (width, width)))
        self.b = params.add(f"{name}.b", np.zeros(3 * width, dtype=DTYPE))

    def __call__(self, h_prev, x) -> Tensor:
        h_prev, x = _as_tensor(h_prev), _as_tensor(x)
        if h_prev.data.shape[-1] != self.width:
            raise ShapeMismatchError(
                f"recurrent state width {h_prev.data.shape[-1]} != {self.width}")
        gx = add(matmul(x, self.w_x), self.b)
        gh = matmul(h_prev, self.w_h)
        w = self.width
        reset = sigmoid(add(narrow(gx, 1, 0, w), narrow(gh, 1, 0, w)))
        update = sigmoid(add(narrow(gx, 1, w, w), narrow(gh, 1, w, w)))
        cand = tanh(add(narrow(gx, 1, 2 * w, w), matmul(mul(reset, h_prev), self.w_hc)))
        keep = mul(update, h_prev)
        new = mul(add(1.0, neg(update)), cand)
        return add(keep, new)


# ---------------------------------------------------------------------------
# Divergence
# ---------------------------------------------------------------------------

def categorical_kl(p, q, axis: int = -1) -> Tensor:
    """KL(p || q) reduced over the class axis.

    Both arguments must be normalized within 1e-6 and floored at EPS_PROB;
    gradients flow into both sides.
    """
    p_t, q_t = _as_tensor(p), _as_tensor(q)
    for side, t in (("p", p_t), ("q", q_t)):
        sums = t.data.sum(axis=axis)
        if not np.all(np.abs(sums - 1.0) <= 1e-6):
            raise DiffMathError(f"{side} is not normalized along the class axis")
        if t.data.min() < EPS_PROB * (1.0 - 1e-9):
            raise DiffMathError(f"{side} has entries below the probability floor")
    return tsum(sub(plogp(p_t), mul(p_t, log(q_t))), axis=axis)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DLLMCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays: magic, u32 version, then one record per
    array as (u32 name length, name, u32 rank, u32 dims..., f64 values),
    all little-endian."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=DTYPE)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DiffMathError("not a checkpoint file (bad magic)")
        version = struct.unpack("<I", f.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise DiffMathError(f"unsupported checkpoint version {version}")
        while True:
            raw = f.read(4)
            if not raw:
                break
            name_len = struct.unpack("<I", raw)[0]
            name = f.read(name_len).decode("utf-8")
            rank = struct.unpack("<I", f.read(4))[0]
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            arrays[name] = values.astype(DTYPE)
    return arrays
