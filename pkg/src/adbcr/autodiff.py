"""Reverse-mode automatic differentiation over dense 2-d float64 tensors.

The engine is define-by-run: each operation computes its value eagerly and
appends the result to a tape, so creation order is already a topological
order and the backward sweep is a single reverse iteration. Every node
carries a vector-Jacobian closure that accumulates into its parents'
gradient buffers; nodes with several consumers therefore sum contributions
instead of overwriting them, and nodes the root never reaches keep the zero
gradient they were initialized with.

The op set is exactly what fully-connected networks with ELU activations,
inverted dropout, mean losses, and row slicing need. Everything is float64:
the data here is desk scale and gradient-check fidelity matters more than
speed.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, TrainingError


def _as_matrix(value) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d tensor, got shape {arr.shape}")
    return arr


class Tensor:
    """One tape node: a value, its parents, and the vjp that feeds them."""

    __slots__ = ("data", "grad", "parents", "vjp", "index")

    def __init__(self, data: np.ndarray, parents: tuple = (), vjp: Callable | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.vjp = vjp
        self.index = -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


class Tape:
    """Records tensors in creation order; backward() walks them in reverse."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def _record(self, tensor: Tensor) -> Tensor:
        tensor.index = len(self._nodes)
        self._nodes.append(tensor)
        return tensor

    def constant(self, value) -> Tensor:
        """Leaf node for data the loss is not differentiated against."""
        return self._record(Tensor(_as_matrix(value)))

    def param(self, name: str, value: np.ndarray) -> Tensor:
        """Leaf node for a named parameter; memoized so every use shares one node."""
        node = self.params.get(name)
        if node is None:
            node = self._record(Tensor(_as_matrix(value)))
            self.params[name] = node
        return node

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(node) into every node's grad buffer.

        The root must be scalar (1x1). Unreached nodes end with zero grads.
        """
        if root.shape != (1, 1):
            raise DimensionError(f"backward root must be 1x1, got {root.shape}")
        for node in self._nodes:
            node.grad = np.zeros_like(node.data)
        root.grad[0, 0] = 1.0
        for node in reversed(self._nodes):
            if node.vjp is not None and node.grad.any():
                node.vjp(node.grad)


def matmul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data

    def vjp(g: np.ndarray) -> None:
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    return tape._record(Tensor(out, (a, b), vjp))


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1xC bias broadcast over the rows of a."""
    if a.shape == b.shape:
        out = a.data + b.data

        def vjp(g: np.ndarray) -> None:
            a.grad += g
            b.grad += g

    elif b.shape == (1, a.shape[1]):
        out = a.data + b.data

        def vjp(g: np.ndarray) -> None:
            a.grad += g
            b.grad += g.sum(axis=0, keepdims=True)

    else:
        raise DimensionError(f"add shapes {a.shape} and {b.shape} do not align")
    return tape._record(Tensor(out, (a, b), vjp))


def sub(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes {a.shape} and {b.shape} differ")
    out = a.data - b.data

    def vjp(g: np.ndarray) -> None:
        a.grad += g
        b.grad -= g

    return tape._record(Tensor(out, (a, b), vjp))


def scale(tape: Tape, a: Tensor, factor: float) -> Tensor:
    """Multiply by a python-float constant."""
    c = float(factor)
    out = a.data * c

    def vjp(g: np.ndarray) -> None:
        a.grad += g * c

    return tape._record(Tensor(out, (a,), vjp))


def elu(tape: Tape, x: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise; C1 at the joint."""
    neg = np.minimum(x.data, 0.0)
    out = np.where(x.data > 0.0, x.data, np.expm1(neg))
    deriv = np.where(x.data > 0.0, 1.0, np.exp(neg))

    def vjp(g: np.ndarray) -> None:
        x.grad += g * deriv

    return tape._record(Tensor(out, (x,), vjp))


def dropout(tape: Tape, x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode and p == 0 are the exact identity and consume no randomness.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * keep

    def vjp(g: np.ndarray) -> None:
        x.grad += g * keep

    return tape._record(Tensor(out, (x,), vjp))


def take_rows(tape: Tape, x: Tensor, rows) -> Tensor:
    """Select rows by index; backward scatter-adds into the source."""
    idx = np.asarray(rows, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"row index must be 1-d, got shape {idx.shape}")
    out = x.data[idx]

    def vjp(g: np.ndarray) -> None:
        np.add.at(x.grad, idx, g)

    return tape._record(Tensor(out, (x,), vjp))


def mse_loss(tape: Tape, pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared residuals, as a 1x1 tensor."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes {pred.shape} and {target.shape} differ")
    n = pred.data.size
    if n == 0:
        raise DomainError("mse_loss of an empty tensor")
    diff = pred.data - target.data
    out = np.array([[float(np.mean(diff * diff))]])

    def vjp(g: np.ndarray) -> None:
        d = (2.0 * g[0, 0] / n) * diff
        pred.grad += d
        target.grad -= d

    return tape._record(Tensor(out, (pred, target), vjp))


def l1_mean(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute gap, as a 1x1 tensor; subgradient at exact ties is 0."""
    if a.shape != b.shape:
        raise DimensionError(f"l1 shapes {a.shape} and {b.shape} differ")
    n = a.data.size
    if n == 0:
        raise DomainError("l1_mean of an empty tensor")
    diff = a.data - b.data
    out = np.array([[float(np.mean(np.abs(diff)))]])
    sign = np.sign(diff)

    def vjp(g: np.ndarray) -> None:
        d = (g[0, 0] / n) * sign
        a.grad += d
        b.grad -= d

    return tape._record(Tensor(out, (a, b), vjp))


def softmax_cross_entropy(tape: Tape, logits: Tensor, labels) -> Tensor:
    """Mean cross entropy of row-wise softmax against integer labels."""
    y = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if y.shape != (n,):
        raise DimensionError(f"labels shape {y.shape} does not match {n} logit rows")
    if n == 0:
        raise DomainError("cross entropy of an empty batch")
    if y.min() < 0 or y.max() >= c:
        raise DomainError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    prob = ez / ez.sum(axis=1, keepdims=True)
    logprob = (z - zmax) - np.log(ez.sum(axis=1, keepdims=True))
    out = np.array([[float(-np.mean(logprob[np.arange(n), y]))]])

    def vjp(g: np.ndarray) -> None:
        d = prob.copy()
        d[np.arange(n), y] -= 1.0
        logits.grad += (g[0, 0] / n) * d

    return tape._record(Tensor(out, (logits,), vjp))


class ParamSet:
    """Ordered, named collection of parameter arrays (weights and biases).

    Holds plain float64 matrices that optimizers update in place; it carries
    no optimizer state itself, so several optimizers can own disjoint or
    overlapping views of the same parameters.
    """

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self._arrays:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._arrays[name] = _as_matrix(array)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self._arrays.items()

    def subset(self, *prefixes: str) -> dict[str, np.ndarray]:
        """Insertion-ordered view of the parameters whose names match a prefix."""
        return {k: v for k, v in self._arrays.items() if k.startswith(prefixes)}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._arrays.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            self._arrays[name][...] = value

    def count(self) -> int:
        return sum(v.size for v in self._arrays.values())


class Adam:
    """Adam with bias correction; weight decay enters as an l2 term in the gradient.

    beta1 = 0.9, beta2 = 0.999, eps = 1e-8. One instance owns the first and
    second moments (and shared step count) for exactly the parameters it was
    constructed with and updates those arrays in place.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        self._params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m = {k: np.zeros_like(v) for k, v in self._params.items()}
        self._v = {k: np.zeros_like(v) for k, v in self._params.items()}
        self.step_count = 0

    def names(self) -> list[str]:
        return list(self._params)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """One update from a full set of gradients for this optimizer's parameters."""
        for name in self._params:
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self._params.items():
            g = grads[name]
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grads_for(tape: Tape, names: Iterable[str]) -> dict[str, np.ndarray]:
    """Gradient buffers for named parameters after a backward pass."""
    return {name: tape.params[name].grad for name in names}
