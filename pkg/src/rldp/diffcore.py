"""Dense reverse-mode autodiff on numpy arrays.

A ``Tensor`` wraps a float64 array and, when it depends on a trainable
leaf, the closure that pushes gradients back to its parents.  Graphs are
rebuilt on every forward pass; ``Tensor.backward`` walks them in reverse
topological order.  Gradients are *overwritten* by each backward call,
never accumulated across calls.

On top of the tensor sit the MLP helpers, hypersphere projection, Adam,
target-copy utilities and the checkpoint format (JSON manifest + float32
blob).
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from rldp._io import atomic_write_bytes

ACTIVATIONS = ("relu", "tanh", "none")
OUTPUT_TRANSFORMS = ("none", "tanh", "sphere")
SPHERE_EPS = 1e-12
SPHERE_NUDGE = 1e-8


class DimensionError(ValueError):
    """Raised when an input or parameter has the wrong shape."""


class NumericError(FloatingPointError):
    """Raised when NaN/inf shows up where a finite number is required."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that were added or stretched by numpy broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data, parents: tuple, op: str, backward) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=needs, _parents=parents if needs else (), op=op)
        if needs:
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), "add", back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), "neg", lambda g: self._accum(-g))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)

        def back(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), "mul", back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __pow__(self, exponent: float):
        exponent = float(exponent)

        def back(g):
            self._accum(g * exponent * self.data ** (exponent - 1.0))

        return Tensor._make(self.data ** exponent, (self,), "pow", back)

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul of {self.shape} and {other.shape}")

        def back(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), "matmul", back)

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), "transpose", lambda g: self._accum(g.T))

    # -- elementwise -----------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), "relu", lambda g: self._accum(g * mask))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), "tanh", lambda g: self._accum(g * (1.0 - y * y)))

    def square(self) -> "Tensor":
        return Tensor._make(self.data ** 2, (self,), "square", lambda g: self._accum(2.0 * g * self.data))

    # -- reductions ------------------------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        def back(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.shape).copy())

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", back)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- indexing / reshaping -------------------------------------------
    def take_rows(self, index) -> "Tensor":
        index = np.asarray(index, dtype=np.int64)

        def back(g):
            full = np.zeros_like(self.data)
            np.add.at(full, index, g)
            self._accum(full)

        return Tensor._make(self.data[index], (self,), "take_rows", back)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), "reshape", lambda g: self._accum(g.reshape(old)))

    # -- autodiff --------------------------------------------------------
    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def _topo(self) -> list:
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = self._topo()
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", back)


def rowdot(a: Tensor, b) -> Tensor:
    """Row-wise inner product of two ``[batch, d]`` tensors -> ``[batch]``."""
    return (a * _as_tensor(b)).sum(axis=1)


def sphere_project(v: Tensor, d: int | None = None) -> Tensor:
    """Scale each row of ``v`` onto the sphere of radius ``sqrt(d)``.

    Rows with norm below 1e-12 get 1e-8 added to their first coordinate
    first, so a freshly initialised network never divides by zero.
    """
    v = _as_tensor(v)
    if v.data.ndim != 2:
        raise DimensionError(f"sphere_project expects [batch, d], got {v.shape}")
    d = v.shape[1] if d is None else d
    x = v.data
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    small = norms[:, 0] < SPHERE_EPS
    if small.any():
        x = x.copy()
        x[small, 0] += SPHERE_NUDGE
        norms = np.linalg.norm(x, axis=1, keepdims=True)
    radius = math.sqrt(d)
    u = x / norms

    def back(g):
        # d(r u)/dx = (r / |x|) (I - u u^T)
        proj = g - u * np.sum(g * u, axis=1, keepdims=True)
        v._accum(proj * (radius / norms))

    return Tensor._make(u * radius, (v,), "sphere", back)


# ---------------------------------------------------------------------------
# parameter stores
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered name -> Tensor mapping; names use dotted paths like ``phi.0.weight``."""

    def __init__(self, entries: dict | None = None):
        self._entries: dict[str, Tensor] = {}
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=requires_grad)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def update(self, other: "ParamStore") -> None:
        for name, t in other.items():
            self.add(name, t)

    def subset(self, prefix: str) -> "ParamStore":
        out = ParamStore()
        for name, t in self._entries.items():
            if name.startswith(prefix + "."):
                out.add(name, t)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._entries.items()}

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def grads(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._entries.items():
            g = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            out.add(name, Tensor(g))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            self._entries[name].data = np.array(arr, dtype=np.float64)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._entries.values())


def backward(loss: Tensor, params: ParamStore) -> ParamStore:
    """Run reverse mode from ``loss`` and return gradients for ``params``.

    Parameters that do not influence the loss get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    params.zero_grad()
    loss.backward()
    return params.grads()


def hard_copy_targets(params: ParamStore) -> ParamStore:
    """Deep copy whose tensors are frozen (``requires_grad=False``)."""
    out = ParamStore()
    for name, t in params.items():
        out.add(name, Tensor(t.data.copy(), requires_grad=False))
    return out


def copy_into(target: ParamStore, source: ParamStore) -> None:
    """Overwrite target values with source values in place (same names)."""
    for name, t in source.items():
        target[name].data = t.data.copy()


# ---------------------------------------------------------------------------
# MLPs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple  # input width first, output width last
    activations: tuple  # one entry per affine layer
    output_transform: str = "none"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"need at least one layer with positive widths, got {widths}")
        if len(self.activations) != len(widths) - 1:
            raise ValueError("one activation per layer required")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activation(s) {bad}")
        if self.output_transform not in OUTPUT_TRANSFORMS:
            raise ValueError(f"unknown output transform {self.output_transform!r}")

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


def mlp_spec(in_width: int, hidden: Sequence[int], out_width: int, output_transform: str = "none",
             hidden_activation: str = "relu", output_activation: str = "none") -> MlpSpec:
    widths = (in_width, *hidden, out_width)
    acts = (hidden_activation,) * len(hidden) + (output_activation,)
    return MlpSpec(widths, acts, output_transform)


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str) -> ParamStore:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    params = ParamStore()
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        bound = 1.0 / math.sqrt(fan_in)
        params.add(f"{prefix}.{i}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.add(f"{prefix}.{i}.bias", rng.uniform(-bound, bound, size=(fan_out,)))
    return params


def forward_mlp(spec: MlpSpec, params: ParamStore, x, prefix: str) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != spec.in_width:
        raise DimensionError(f"{prefix}: layer 0 expects input width {spec.in_width}, got shape {x.shape}")
    h = x
    for i, act in enumerate(spec.activations):
        w = params[f"{prefix}.{i}.weight"]
        b = params[f"{prefix}.{i}.bias"]
        if w.shape != (spec.layer_widths[i], spec.layer_widths[i + 1]) or b.shape != (spec.layer_widths[i + 1],):
            raise DimensionError(f"{prefix}: layer {i} parameters have shapes {w.shape}/{b.shape}, "
                                 f"spec wants ({spec.layer_widths[i]}, {spec.layer_widths[i + 1]})")
        h = h @ w + b
        if act == "relu":
            h = h.relu()
        elif act == "tanh":
            h = h.tanh()
    if spec.output_transform == "tanh":
        h = h.tanh()
    elif spec.output_transform == "sphere":
        h = sphere_project(h)
    return h


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamStore, grads: ParamStore) -> None:
    """In-place Adam update with bias correction.

    All gradients are checked before anything is touched, so a NaN leaves
    both ``params`` and ``state`` exactly as they were.
    """
    for name in params:
        g = grads[name].data
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} "
                               f"(nan={int(np.isnan(g).sum())}, inf={int(np.isinf(g).sum())})")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name].data
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def gradient_check(loss_fn: Callable[[], Tensor], params: ParamStore, eps: float = 1e-5,
                   max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    With ``max_entries`` only that many randomly chosen coordinates per
    tensor are perturbed.
    """
    grads = backward(loss_fn(), params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        g_auto = grads[name].data.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            g_num = (up - down) / (2 * eps)
            denom = max(abs(g_num), abs(g_auto[i]), 1e-6)
            worst = max(worst, abs(g_num - g_auto[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "rldp-checkpoint"


def save_checkpoint(path, params: ParamStore, metadata: dict | None = None) -> Path:
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (float32 LE blob)."""
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    entries, chunks, offset = [], [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "dtype": "float32-le",
        "blob": blob_path.name,
        "tensors": entries,
        "metadata": metadata or {},
    }
    atomic_write_bytes(blob_path, b"".join(chunks))
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=False) + "\n").encode())
    return path


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint manifest")
    blob = (path.parent / manifest["blob"]).read_bytes()
    store = ParamStore()
    for e in manifest["tensors"]:
        start, n = e["offset"], e["nbytes"]
        if start + n > len(blob):
            raise ValueError(f"{path}: tensor {e['name']} runs past end of blob at byte {start}")
        arr = np.frombuffer(blob[start:start + n], dtype="<f4").astype(np.float64)
        store.add(e["name"], arr.reshape(e["shape"]))
    return store, manifest.get("metadata", {})


def clone_store(params: ParamStore, requires_grad: bool = True) -> ParamStore:
    out = ParamStore()
    for name, t in params.items():
        out.add(name, Tensor(t.data.copy(), requires_grad=requires_grad))
    return out


def deepcopy_state(state: AdamState) -> AdamState:
    return copy.deepcopy(state)
