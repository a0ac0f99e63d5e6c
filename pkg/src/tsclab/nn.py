"""Dense-tensor numeric core with reverse-mode gradients.

Implements exactly the blocks the agents need: a single affine embedding,
single-head scaled dot-product attention, small MLPs, a dueling action-value
head, and an Adam optimizer.  Everything runs on float64 numpy arrays wrapped
in a lightweight tape (:class:`Tensor`), which keeps analytic gradients easy
to check against central finite differences.

Conventions: vectors are row vectors, weights are stored (in, out), and the
tape only records nodes while gradients are enabled (see :func:`no_grad`).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus an optional backward edge on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def reshape(self, shape):
        return reshape(self, shape)

    def item(self) -> float:
        return float(self.data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitive ops ------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    # subgradient 0 at the origin so zero-distance terms stay finite
    return _node(out, (a,), lambda g: (np.where(out > 0, g * 0.5 / np.where(out > 0, out, 1.0), 0.0),))


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), vjp)


def repeat_rows(a: Tensor, repeats: int) -> Tensor:
    """Repeat each row of a 2-D tensor `repeats` times (inverse of sum_groups)."""
    def vjp(g):
        return (g.reshape(a.data.shape[0], repeats, -1).sum(axis=1).reshape(a.data.shape),)

    return _node(np.repeat(a.data, repeats, axis=0), (a,), vjp)


def sum_groups(a: Tensor, group_size: int) -> Tensor:
    """Sum consecutive blocks of `group_size` rows of a 2-D tensor."""
    n = a.data.shape[0] // group_size

    def vjp(g):
        return (np.repeat(g, group_size, axis=0),)

    return _node(a.data.reshape(n, group_size, -1).sum(axis=1), (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), vjp)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss into `.grad` fields."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise RuntimeError("backward called without a recorded forward pass")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# -- parameter initialization -------------------------------------------

def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    """Affine map y = x W + b with W stored (in, out)."""

    def __init__(self, weight: Tensor, bias: Tensor | None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True) -> "Linear":
        w = Tensor(uniform_init(rng, n_in, (n_in, n_out)), requires_grad=True)
        b = Tensor(uniform_init(rng, n_in, (n_out,)), requires_grad=True) if bias else None
        return cls(w, b)

    @property
    def n_in(self) -> int:
        return self.weight.data.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.data.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.n_in:
            raise ValueError(f"expected input (*, {self.n_in}), got {x.data.shape}")
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


ACTIVATIONS = ("relu", "identity")


class MLPBlock:
    """Chain of affine layers, each followed by ReLU or identity."""

    def __init__(self, layers: list[tuple[Linear, str]]):
        for _, act in layers:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for (a, _), (b, _) in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError("consecutive layer dimensions do not chain")
        self.layers = layers

    @classmethod
    def create(cls, rng: np.random.Generator, sizes: Sequence[int],
               activations: Sequence[str] | None = None) -> "MLPBlock":
        if activations is None:
            activations = ["relu"] * (len(sizes) - 2) + ["identity"]
        layers = [(Linear.create(rng, sizes[i], sizes[i + 1]), activations[i])
                  for i in range(len(sizes) - 1)]
        return cls(layers)

    @property
    def n_in(self) -> int:
        return self.layers[0][0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1][0].n_out

    def __call__(self, x: Tensor) -> Tensor:
        for lin, act in self.layers:
            x = lin(x)
            if act == "relu":
                x = relu(x)
        return x

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (lin, _) in enumerate(self.layers):
            out.update(lin.parameters(f"{prefix}.l{i}"))
        return out


def mlp_forward(block: MLPBlock, x) -> np.ndarray:
    """Apply an MLP to a single vector (forward only)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != block.n_in:
        raise ValueError(f"expected vector of length {block.n_in}, got shape {x.shape}")
    with no_grad():
        return block(Tensor(x.reshape(1, -1))).data[0]


class AttentionBlock:
    """Single-head scaled dot-product attention with square projections."""

    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor):
        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.d_model = wq.data.shape[0]

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int) -> "AttentionBlock":
        make = lambda: Tensor(uniform_init(rng, d_model, (d_model, d_model)), requires_grad=True)
        return cls(make(), make(), make())

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv}

    def attend_single(self, query: Tensor, keys: Tensor) -> Tensor:
        """query (1,d), keys (k,d) -> (1,d); also returns via .data the weights path."""
        if keys.data.shape[0] == 0:
            raise ValueError("attention requires at least one key")
        q = matmul(query, self.wq)
        k = matmul(keys, self.wk)
        v = matmul(keys, self.wv)
        scores = matmul(k, reshape(q, (self.d_model, 1)))          # (k,1)
        scores = reshape(scores, (1, -1)) * (1.0 / math.sqrt(self.d_model))
        weights = softmax(scores, axis=1)                          # (1,k)
        return matmul(weights, v)

    def attend_uniform(self, queries: Tensor, keys: Tensor, keys_per_query: int) -> Tensor:
        """Batched attention where every query has `keys_per_query` keys.

        queries (n,d); keys (n*keys_per_query, d) grouped row-blocks per query.
        """
        k = keys_per_query
        q = matmul(queries, self.wq)
        kk = matmul(keys, self.wk)
        vv = matmul(keys, self.wv)
        scores = tensor_sum(mul(repeat_rows(q, k), kk), axis=1)    # (n*k,)
        scores = reshape(scores, (-1, k)) * (1.0 / math.sqrt(self.d_model))
        weights = softmax(scores, axis=1)                          # (n,k)
        contrib = mul(reshape(weights, (-1, 1)), vv)               # (n*k,d)
        return sum_groups(contrib, k)


def attention_forward(block: AttentionBlock, query, keys_values: Iterable) -> np.ndarray:
    """Scaled dot-product attention over a list of key/value vectors (forward only)."""
    kv = [np.asarray(v, dtype=np.float64) for v in keys_values]
    if not kv:
        raise ValueError("attention requires a non-empty key set")
    q = np.asarray(query, dtype=np.float64)
    with no_grad():
        out = block.attend_single(Tensor(q.reshape(1, -1)), Tensor(np.stack(kv)))
    return out.data[0]


def attention_weights(block: AttentionBlock, query, keys_values: Iterable) -> np.ndarray:
    """The softmax attention weights for a single query (forward only)."""
    kv = np.stack([np.asarray(v, dtype=np.float64) for v in keys_values])
    q = np.asarray(query, dtype=np.float64)
    scores = (kv @ block.wk.data) @ (q @ block.wq.data) / math.sqrt(block.d_model)
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


class DuelingHead:
    """Dueling action-value head: q = V + A - mean(A)."""

    def __init__(self, value: MLPBlock, advantage: MLPBlock):
        if value.n_out != 1:
            raise ValueError("value branch must output a scalar")
        self.value = value
        self.advantage = advantage
        self.n_actions = advantage.n_out

    @classmethod
    def create(cls, rng: np.random.Generator, d_model: int, hidden: int, n_actions: int = 4) -> "DuelingHead":
        value = MLPBlock.create(rng, [d_model, hidden, 1])
        advantage = MLPBlock.create(rng, [d_model, hidden, n_actions])
        return cls(value, advantage)

    def __call__(self, h: Tensor) -> Tensor:
        v = self.value(h)                                          # (n,1)
        a = self.advantage(h)                                      # (n,A)
        mean_a = tensor_sum(a, axis=1, keepdims=True) * (1.0 / self.n_actions)
        return sub(add(v, a), mean_a)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.value.parameters(f"{prefix}.value")
        out.update(self.advantage.parameters(f"{prefix}.advantage"))
        return out


def dueling_forward(head: DuelingHead, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    with no_grad():
        return head(Tensor(h.reshape(1, -1))).data[0]


class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite gradient; update rejected")
            grads.append(g)
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(state: Adam, grads: Sequence[np.ndarray] | None = None) -> None:
    """Apply one optimizer step; with explicit grads, they override the tape's."""
    if grads is not None:
        for p, g in zip(state.params, grads):
            p.grad = np.asarray(g, dtype=np.float64)
    state.step()


# -- checkpoint I/O ------------------------------------------------------

CHECKPOINT_MAGIC = "tsclab-checkpoint"
CHECKPOINT_VERSION = "v1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict[str, object]) -> None:
    """Versioned text checkpoint; float repr guarantees bit-exact round-trip."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for key in sorted(meta):
        lines.append(f"meta {key} {meta[key]}")
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.ndim} {dims}")
        rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)
        for row in rows:
            lines.append(" ".join(repr(float(x)) for x in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    version = lines[0].split()[1]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            i += 1
        elif parts[0] == "tensor":
            name = parts[1]
            ndim = int(parts[2])
            shape = tuple(int(d) for d in parts[3:3 + ndim])
            n_rows = 1 if ndim == 1 else int(np.prod(shape[:-1]))
            i += 1
            rows = [np.array([float(x) for x in lines[i + r].split()]) for r in range(n_rows)]
            i += n_rows
            tensors[name] = np.stack(rows).reshape(shape)
        else:
            raise ValueError(f"{path}: unexpected line {lines[i]!r}")
    return tensors, meta
