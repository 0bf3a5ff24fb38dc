"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op records a closure that pushes the upstream gradient into its
parents; ``Tensor.backward`` walks the graph in reverse topological order.
Ops skip recording when no input requires a gradient, so frozen modules
(the key encoder) run at plain numpy speed.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.value)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, -_unbroadcast(g, b.shape))))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: ((a, _unbroadcast(g * b.value, a.shape)),
                            (b, _unbroadcast(g * a.value, b.shape))))


def reciprocal(a: Tensor) -> Tensor:
    v = 1.0 / a.value
    return _node(v, (a,), lambda g: ((a, -g * v * v),))


def square(a: Tensor) -> Tensor:
    return _node(a.value * a.value, (a,), lambda g: ((a, 2.0 * g * a.value),))


def exp(a: Tensor) -> Tensor:
    v = np.exp(a.value)
    return _node(v, (a,), lambda g: ((a, g * v),))


def expm1(a: Tensor) -> Tensor:
    """exp(a) - 1 without cancellation near zero."""
    return _node(np.expm1(a.value), (a,), lambda g: ((a, g * np.exp(a.value)),))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.value), (a,), lambda g: ((a, g / a.value),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form: exact, and cannot overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    v = _sigmoid_np(a.value)
    return _node(v, (a,), lambda g: ((a, g * v * (1.0 - v)),))


def tanh(a: Tensor) -> Tensor:
    v = np.tanh(a.value)
    return _node(v, (a,), lambda g: ((a, g * (1.0 - v * v)),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: ((a, g * mask),))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.value.ndim == 1 and b.value.ndim == 2:
            return ((a, b.value @ g), (b, np.outer(a.value, g)))
        if a.value.ndim == 2 and b.value.ndim == 1:
            return ((a, np.outer(g, b.value)), (b, a.value.T @ g))
        return ((a, g @ np.swapaxes(b.value, -1, -2)),
                (b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)))

    return _node(a.value @ b.value, (a, b), back)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def index(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)
    rows = isinstance(idx, np.ndarray) and idx.dtype.kind in "iu"

    def back(g):
        if rows:
            return ((a, _scatter_rows(a.shape, idx, g)),)
        full = np.zeros_like(a.value)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return ((a, full),)

    return _node(a.value[idx], (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.value.reshape(shape), (a,), lambda g: ((a, g.reshape(a.shape)),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = np.cumsum([p.value.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(zip(parts, np.split(g, sizes, axis=axis)))

    return _node(value, parts, back)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    value = np.stack([p.value for p in parts], axis=axis)

    def back(g):
        return tuple((p, np.take(g, i, axis=axis)) for i, p in enumerate(parts))

    return _node(value, parts, back)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    v = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape)),)

    return _node(v, (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- layers

def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = W x + b for a vector x, or row-wise for a (batch, n) matrix."""
    x = as_tensor(x)
    n = x.shape[-1]
    if W.value.ndim != 2 or W.shape[1] != n or b.shape != (W.shape[0],):
        raise ValueError(f"linear: shape mismatch x{x.shape} W{W.shape} b{b.shape}")
    xv, Wv = x.value, W.value
    out = xv @ Wv.T + b.value

    def back(g):
        if xv.ndim == 1:
            return ((x, Wv.T @ g), (W, np.outer(g, xv)), (b, g))
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, n)
        return ((x, g @ Wv), (W, g2.T @ x2), (b, g2.sum(axis=0)))

    return _node(out, (x, W, b), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table``; ``ids`` may be a single int or an integer array."""
    vocab = table.shape[0]
    arr = np.asarray(ids)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")
    if arr.ndim == 0:
        ids = int(arr)
    else:
        ids = arr.astype(np.int64)

    def back(g):
        return ((table, _scatter_rows(table.shape, ids, g)),)

    return _node(table.value[ids], (table,), back)


def _scatter_rows(shape, ids, g: np.ndarray) -> np.ndarray:
    """Sum rows of ``g`` into a zero table at ``ids`` (repeated ids accumulate)."""
    full = np.zeros(shape)
    if np.ndim(ids) == 0:
        full[ids] += g
        return full
    flat = np.asarray(ids).reshape(-1)
    g2 = g.reshape(flat.size, -1)
    order = np.argsort(flat, kind="stable")
    sorted_ids = flat[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    full[sorted_ids[starts]] = np.add.reduceat(g2[order], starts, axis=0).reshape(
        (len(starts),) + tuple(shape[1:]))
    return full


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    z = v.value - v.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return ((v, s * (g - (g * s).sum(axis=axis, keepdims=True))),)

    return _node(s, (v,), back)


def softmax_np(v: np.ndarray, axis: int = -1) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return ((logits, g * d / n),)

    return _node(np.asarray(loss), (logits,), back)


@dataclass
class LSTMParams:
    W_ih: Tensor  # (4h, d), gate order i, f, g, o
    W_hh: Tensor  # (4h, h)
    b: Tensor  # (4h,)

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[1]


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: LSTMParams) -> tuple[Tensor, Tensor]:
    """One fused LSTM step; returns (h_new, c_new) as two graph nodes sharing one backward."""
    n = p.hidden
    xv, hv, cv = x.value, h.value, c.value
    z = xv @ p.W_ih.value.T + hv @ p.W_hh.value.T + p.b.value
    i = _sigmoid_np(z[..., :n])
    f = _sigmoid_np(z[..., n:2 * n])
    g = np.tanh(z[..., 2 * n:3 * n])
    o = _sigmoid_np(z[..., 3 * n:])
    c_new = f * cv + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    parents = (x, h, c, p.W_ih, p.W_hh, p.b)
    stash = {"dh": None}

    def back_c(dc):
        # runs after back_h, since h_out is a child of c_state
        dh = stash["dh"] if stash["dh"] is not None else np.zeros_like(h_new)
        dz = np.concatenate([dc * g * i * (1.0 - i),
                             dc * cv * f * (1.0 - f),
                             dc * i * (1.0 - g * g),
                             dh * tc * o * (1.0 - o)], axis=-1)
        dz2 = dz.reshape(-1, 4 * n)
        return ((x, dz @ p.W_ih.value), (h, dz @ p.W_hh.value), (c, dc * f),
                (p.W_ih, dz2.T @ xv.reshape(-1, xv.shape[-1])),
                (p.W_hh, dz2.T @ hv.reshape(-1, n)),
                (p.b, dz2.sum(axis=0)))

    def back_h(dh):
        stash["dh"] = dh
        return ((c_state, dh * o * (1.0 - tc * tc)),)

    c_state = _node(c_new, parents, back_c)
    h_out = _node(h_new, (c_state,), back_h)
    return h_out, c_state


def _transpose(a: Tensor) -> Tensor:
    return _node(a.value.T, (a,), lambda g: ((a, g.T),))


def recurrent_states(inputs: Sequence[Tensor], p: LSTMParams) -> list[Tensor]:
    """Hidden state after every step; inputs are (d,) vectors or (batch, d)."""
    if len(inputs) == 0:
        raise ValueError("recurrent_encode needs a nonempty sequence")
    lead = inputs[0].shape[:-1]
    h = Tensor(np.zeros(lead + (p.hidden,)))
    c = Tensor(np.zeros(lead + (p.hidden,)))
    states = []
    for x in inputs:
        h, c = lstm_cell(as_tensor(x), h, c, p)
        states.append(h)
    return states


def recurrent_encode(inputs: Sequence[Tensor], p: LSTMParams) -> Tensor:
    return recurrent_states(inputs, p)[-1]


# ---------------------------------------------------------------- parameters

class ParameterSet:
    """Ordered name -> Tensor map with seeded initialization."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._tensors: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def matrix(self, name: str, rows: int, cols: int) -> Tensor:
        bound = 1.0 / np.sqrt(cols)
        return self.add(name, self.rng.uniform(-bound, bound, size=(rows, cols)))

    def bias(self, name: str, n: int) -> Tensor:
        return self.add(name, np.zeros(n))

    def table(self, name: str, rows: int, cols: int) -> Tensor:
        # embeddings: same bound rule, fan_in taken as the embedding width
        return self.matrix(name, rows, cols)

    def lstm(self, prefix: str, d_in: int, hidden: int) -> LSTMParams:
        return LSTMParams(
            W_ih=self.matrix(f"{prefix}.W_ih", 4 * hidden, d_in),
            W_hh=self.matrix(f"{prefix}.W_hh", 4 * hidden, hidden),
            b=self.bias(f"{prefix}.b", 4 * hidden),
        )

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self._tensors.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self._tensors[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self._tensors[k].shape}")
            self._tensors[k].value = np.array(v, dtype=DTYPE, copy=True)


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    """Write a name -> array map as an .npz archive (exact float64 round trip)."""
    with open(path, "wb") as fh:
        np.savez(fh, **state)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as data:
            return {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError) as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc


def checkpoint_bytes(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **state)
    return buf.getvalue()


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterSet, grads: dict[str, np.ndarray], state: AdamState,
              frozen: Iterable[str] = ()) -> None:
    """In-place Adam update of every parameter with an entry in ``grads``."""
    frozen = set(frozen)
    for name, g in grads.items():
        if name in frozen or g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if name in frozen or g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p = params[name]
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def collect_grads(params: ParameterSet) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in params.items() if t.grad is not None}


# ---------------------------------------------------------------- testing aid

def grad_check(f: Callable[[ParameterSet], Tensor], params: ParameterSet,
               eps: float = 1e-4, names: Iterable[str] | None = None) -> float:
    """Max relative error between backprop and central differences.

    Per coordinate the error is |a - n| / max(|a|, |n|, 1e-7).
    """
    names = list(params) if names is None else list(names)
    params.zero_grad()
    out = f(params)
    if not np.isfinite(out.value).all():
        raise FloatingPointError("grad_check: objective is not finite")
    out.backward()
    worst = 0.0
    for name in names:
        t = params[name]
        analytic = np.zeros_like(t.value) if t.grad is None else t.grad.copy()
        flat = t.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).value)
            flat[i] = orig - eps
            fm = float(f(params).value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("grad_check: objective is not finite")
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-7)
            worst = max(worst, err)
    params.zero_grad()
    return worst
