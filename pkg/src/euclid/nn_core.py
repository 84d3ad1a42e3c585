"""Dense networks, reverse-mode gradients, Adam and target tracking.

Everything runs in float64 on numpy arrays.  Gradients come from a small
tape of :class:`Tensor` nodes whose operations are drawn from a closed
registry (``OPS``); anything outside it raises :class:`UnsupportedOpError`.

The same arithmetic serves both the gradient path and the plain numpy
inference path: the helpers :func:`affine`, :func:`elu`, :func:`tanh` accept
either arrays or tensors, so a network evaluated with raw parameter arrays
is bitwise identical to one evaluated with tensor leaves.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64
MAGIC = b"EUCLID1"


class ShapeError(ValueError):
    """Input of the wrong dimension for a network or operation."""


class UnsupportedOpError(TypeError):
    pass


class GradientKeyError(KeyError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# reverse-mode tape
# --------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _elu_value(x):
    # expm1(x) >= x everywhere, so the max picks x on the positive side exactly
    out = np.expm1(np.minimum(x, 0.0))
    return np.maximum(out, x, out=out)


def _log_softmax_value(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# Each entry: forward(*values, **kw) -> value, backward(grad, out, *values, **kw) -> grads
def _matmul_bwd(g, out, a, b):
    ga = g @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return ga, gb


def _affine_bwd(g, out, x, W, b):
    g2 = g.reshape(-1, g.shape[-1])
    gx = g @ W.T
    gW = x.reshape(-1, x.shape[-1]).T @ g2
    return gx, gW, g2.sum(axis=0)


def _sum_bwd(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean_bwd(g, out, a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    (ga,) = _sum_bwd(g, out, a, axis, keepdims)
    return (ga / n,)


def _concat_bwd(g, out, *xs, axis=-1):
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _getitem_bwd(g, out, a, index=None):
    ga = np.zeros_like(a)
    np.add.at(ga, index, g)
    return (ga,)


def _log_softmax_bwd(g, out, a):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (np.add, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": (np.subtract, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "mul": (
        np.multiply,
        lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    ),
    "neg": (np.negative, lambda g, out, a: (-g,)),
    "matmul": (np.matmul, _matmul_bwd),
    "affine": (lambda x, W, b: np.add(np.matmul(x, W), b), _affine_bwd),
    "elu": (_elu_value, lambda g, out, a: (g * np.where(a > 0, 1.0, out + 1.0),)),
    "tanh": (np.tanh, lambda g, out, a: (g * (1.0 - out * out),)),
    "square": (np.square, lambda g, out, a: (2.0 * a * g,)),
    "clip": (
        lambda a, lo=None, hi=None: np.clip(a, lo, hi),
        lambda g, out, a, lo=None, hi=None: (g * (out == a),),
    ),
    "sum": (lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_bwd),
    "mean": (lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims), _mean_bwd),
    "concat": (lambda *xs, axis=-1: np.concatenate(xs, axis=axis), _concat_bwd),
    "getitem": (lambda a, index=None: a[index], _getitem_bwd),
    "reshape": (
        lambda a, shape=None: a.reshape(shape),
        lambda g, out, a, shape=None: (g.reshape(a.shape),),
    ),
    "log_softmax": (_log_softmax_value, _log_softmax_bwd),
}


class Tensor:
    """A node on the gradient tape.

    Leaves with ``requires_grad`` collect gradients; constants do not, and
    nothing flows into them.
    """

    __slots__ = ("value", "parents", "op", "kwargs", "requires_grad", "name")
    __array_ufunc__ = None  # make ``ndarray op Tensor`` defer to the reflected operator

    def __init__(self, value, parents=(), op=None, kwargs=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = parents
        self.op = op
        self.kwargs = kwargs or {}
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return apply("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedOpError("division by a tensor is not in the primitive set")
        return apply("mul", self, 1.0 / other)

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __getitem__(self, index):
        return apply("getitem", self, index=index)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return apply("reshape", self, shape=shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op: str, *inputs, **kwargs) -> Tensor:
    if op not in OPS:
        raise UnsupportedOpError(f"operation {op!r} is not supported")
    parents = tuple(as_tensor(x) for x in inputs)
    fwd, _ = OPS[op]
    value = fwd(*(p.value for p in parents), **kwargs)
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, parents if needs else (), op, kwargs, requires_grad=needs)


def leaf(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to the leaves in ``params``.

    Leaves that the loss does not depend on are absent from the result, so
    an optimizer step driven by it leaves them untouched.
    """
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.parents:
            if g is not None:
                grads[id(node)] = g
            continue
        if node.op not in OPS:
            raise UnsupportedOpError(f"operation {node.op!r} is not supported")
        _, bwd = OPS[node.op]
        pgrads = bwd(g, node.value, *(p.value for p in node.parents), **node.kwargs)
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    return {name: grads[id(t)] for name, t in params.items() if id(t) in grads}


# --------------------------------------------------------------------------
# array/tensor polymorphic building blocks
# --------------------------------------------------------------------------


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def affine(x, W, b):
    if _any_tensor(x, W, b):
        return apply("affine", x, W, b)
    return np.add(np.matmul(x, W), b)


def elu(x):
    return apply("elu", x) if isinstance(x, Tensor) else _elu_value(x)


def tanh(x):
    return apply("tanh", x) if isinstance(x, Tensor) else np.tanh(x)


def concat(xs, axis=-1):
    if _any_tensor(*xs):
        return apply("concat", *xs, axis=axis)
    return np.concatenate(xs, axis=axis)


def square(x):
    return apply("square", x) if isinstance(x, Tensor) else np.square(x)


def clip(x, lo=None, hi=None):
    return apply("clip", x, lo=lo, hi=hi) if isinstance(x, Tensor) else np.clip(x, lo, hi)


def log_softmax(x):
    return apply("log_softmax", x) if isinstance(x, Tensor) else _log_softmax_value(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x)


# --------------------------------------------------------------------------
# networks and parameters
# --------------------------------------------------------------------------

OUTPUT_ACTIVATIONS = {None: None, "identity": None, "tanh": tanh, "elu": elu}


@dataclass(frozen=True)
class DenseNet:
    """Affine layers with ELU between them.

    The net is only an architecture; its parameters live in a mapping keyed
    ``{name}.W{i}`` / ``{name}.b{i}`` (a :class:`ParamStore`, a dict of
    arrays, or a dict of tape leaves).
    """

    name: str
    layer_dims: tuple[int, ...]
    out_act: str | None = None

    def __post_init__(self):
        if len(self.layer_dims) < 2 or any(d <= 0 for d in self.layer_dims):
            raise ValueError(f"bad layer_dims {self.layer_dims}")
        if self.out_act not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.out_act!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.num_layers):
            names += [f"{self.name}.W{i}", f"{self.name}.b{i}"]
        return names

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        out = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            bound = np.sqrt(1.0 / fan_in)
            out[f"{self.name}.W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            out[f"{self.name}.b{i}"] = rng.uniform(-bound, bound, size=(fan_out,))
        return out

    def forward(self, params: Mapping, x):
        if value_of(x).shape[-1] != self.in_dim:
            raise ShapeError(
                f"{self.name}: expected input dim {self.in_dim}, got {value_of(x).shape[-1]}"
            )
        h = x
        for i in range(self.num_layers):
            h = affine(h, params[f"{self.name}.W{i}"], params[f"{self.name}.b{i}"])
            if i < self.num_layers - 1:
                h = elu(h)
        act = OUTPUT_ACTIVATIONS[self.out_act]
        return act(h) if act is not None else h

    __call__ = forward


def mlp(name: str, in_dim: int, hidden: int, out_dim: int, depth: int = 2, out_act=None) -> DenseNet:
    """``depth`` affine layers with ``hidden`` units in between."""
    dims = (in_dim,) + (hidden,) * (depth - 1) + (out_dim,)
    return DenseNet(name, dims, out_act)


class ParamStore:
    """Named float64 parameters with Adam moments and a step counter."""

    def __init__(self, values: Mapping[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for k, val in (values or {}).items():
            self.set(k, val)

    def set(self, name: str, value) -> None:
        value = np.array(value, dtype=DTYPE)
        self.values[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def add_net(self, net: DenseNet, rng: np.random.Generator) -> DenseNet:
        for k, val in net.init_params(rng).items():
            self.set(k, val)
        return net

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def keys(self):
        return self.values.keys()

    def leaves(self, names: Iterable[str] | None = None) -> dict[str, Tensor]:
        names = self.values.keys() if names is None else names
        return {k: leaf(self.values[k], name=k) for k in names}

    def snapshot(self, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        names = self.values.keys() if names is None else names
        return {k: self.values[k].copy() for k in names}

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        for k, val in values.items():
            if k not in self.values:
                raise KeyError(k)
            if self.values[k].shape != np.shape(val):
                raise ShapeError(f"{k}: shape {np.shape(val)} != {self.values[k].shape}")
            self.values[k] = np.array(val, dtype=DTYPE)

    def adam_step(self, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        adam_step(self, grads, lr, beta1, beta2, eps)

    # checkpoint plumbing
    def to_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k in self.values:
            out[f"{prefix}/{k}"] = self.values[k]
            out[f"{prefix}/{k}@adam_m"] = self.m[k]
            out[f"{prefix}/{k}@adam_v"] = self.v[k]
        out[f"{prefix}/@step"] = np.array(float(self.step))
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], prefix: str) -> "ParamStore":
        store = cls()
        head = f"{prefix}/"
        for k, val in tensors.items():
            if not k.startswith(head) or "@" in k:
                continue
            name = k[len(head):]
            store.set(name, val)
            store.m[name] = np.array(tensors[f"{k}@adam_m"], dtype=DTYPE)
            store.v[name] = np.array(tensors[f"{k}@adam_v"], dtype=DTYPE)
        if f"{head}@step" not in tensors:
            raise CheckpointError(f"no parameter group {prefix!r} in checkpoint")
        store.step = int(tensors[f"{head}@step"])
        return store


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update of the parameters named in ``grads``.

    Parameters without an entry keep their values and moments; the step
    counter advances once per call.
    """
    unknown = [k for k in grads if k not in store.values]
    if unknown:
        raise GradientKeyError(f"gradients for unknown parameters: {unknown}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        if g.shape != store.values[k].shape:
            raise ShapeError(f"{k}: gradient shape {g.shape} != {store.values[k].shape}")
        m = store.m[k] = beta1 * store.m[k] + (1.0 - beta1) * g
        v = store.v[k] = beta2 * store.v[k] + (1.0 - beta2) * g * g
        store.values[k] = store.values[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TargetTracker:
    """Lagged copy of some parameters, blended toward the source every ``period`` updates."""

    shadow: dict[str, np.ndarray]
    period: int = 2
    blend: float = 0.01
    count: int = field(default=0)

    @classmethod
    def of(cls, source: ParamStore, names: Iterable[str], period=2, blend=0.01) -> "TargetTracker":
        if period < 1 or not 0.0 <= blend <= 1.0:
            raise ValueError("period must be >= 1 and blend in [0, 1]")
        return cls({k: source[k].copy() for k in names}, period, blend)

    def __getitem__(self, name):
        return self.shadow[name]

    def __contains__(self, name):
        return name in self.shadow

    def update(self, source: Mapping) -> bool:
        """Count one source update; blend when the period elapses. Returns True on a blend."""
        self.count += 1
        if self.count % self.period:
            return False
        for k, s in self.shadow.items():
            src = source[k]
            if np.shape(src) != s.shape:
                raise ShapeError(f"{k}: source shape {np.shape(src)} != shadow {s.shape}")
            if self.blend == 1.0:
                self.shadow[k] = np.array(src, dtype=DTYPE)
            elif self.blend != 0.0:
                self.shadow[k] = (1.0 - self.blend) * s + self.blend * src
        return True


def track_target(tracker: TargetTracker, source: Mapping) -> bool:
    return tracker.update(source)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Binary layout: magic, JSON metadata block, then named row-major float64 tensors."""
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")  # tobytes() is row-major; keeps 0-d shapes
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic/version {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (mlen,) = take("<I")
        meta = json.loads(data[pos : pos + mlen])
        pos += mlen
        (count,) = take("<I")
        tensors = {}
        for _ in range(count):
            (nlen,) = take("<I")
            name = data[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = take("<I")
            shape = take(f"<{ndim}Q") if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
            tensors[name] = arr.astype(DTYPE)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return tensors, meta
