"""
Reverse-mode automatic differentiation engine
Tensors record the operation that produced them; backward() walks the graph in
reverse topological order and accumulates gradients into every tensor that
requires them.
"""
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from app.errors import ShapeError


class Tensor:
    """
    N-dimensional float64 array with an optional gradient buffer.

    Image-shaped tensors use the channels x height x width layout.
    """

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _children: tuple["Tensor", ...] = (),
        _op: str = "",
    ):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        # graph bookkeeping
        self._backward: Callable[[], None] = lambda: None
        self._prev = _children
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("size", 1, self.data.size, op="item")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        """True when no entry of data (or grad, if present) is NaN or infinite"""
        ok = bool(np.isfinite(self.data).all())
        if self.grad is not None:
            ok = ok and bool(np.isfinite(self.grad).all())
        return ok

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # --- elementwise arithmetic ---

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.shape, "add")
        out = op_output(self.data + other.data, (self, other), "+")

        def _backward():
            self._accumulate(out.grad)
            other._accumulate(out.grad)

        out._backward = _backward
        return out

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.shape, "mul")
        out = op_output(self.data * other.data, (self, other), "*")

        def _backward():
            self._accumulate(other.data * out.grad)
            other._accumulate(self.data * out.grad)

        out._backward = _backward
        return out

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other, self.shape, "sub"))

    def __radd__(self, other) -> "Tensor":
        return self + other

    def __rmul__(self, other) -> "Tensor":
        return self * other

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.shape, "sub") - self

    def sum(self) -> "Tensor":
        out = op_output(self.data.sum(), (self,), "sum")

        def _backward():
            self._accumulate(np.broadcast_to(out.grad, self.shape))

        out._backward = _backward
        return out

    def backward(self) -> None:
        """
        Back-propagate from this scalar through the recorded graph.

        Gradients accumulate: calling backward twice without zero_grad() adds
        the second gradient to the first.
        """
        if self.data.size != 1:
            raise ShapeError("loss size", 1, self.data.size, op="backward")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        # intermediate gradients are rebuilt per call; only leaves accumulate
        for node in topo:
            if node._prev:
                node.grad = None
        if self._prev:
            self.grad = np.ones_like(self.data)
        else:
            self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op='{self._op}', requires_grad={self.requires_grad})"


def _as_tensor(value, shape: tuple[int, ...], op: str) -> Tensor:
    if isinstance(value, Tensor):
        if value.shape != shape:
            raise ShapeError("shape", shape, value.shape, op=op)
        return value
    return Tensor(np.full(shape, float(value)))


def op_output(data: np.ndarray, children: tuple[Tensor, ...], op: str) -> Tensor:
    """Create an op output that tracks gradients iff any input does"""
    requires_grad = any(c.requires_grad for c in children)
    return Tensor(data, requires_grad=requires_grad, _children=children if requires_grad else (), _op=op)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    n_samples: int = 10,
    seed: int = 0,
    min_magnitude: float = 0.0,
) -> float:
    """
    Compare analytic gradients against central finite differences.

    Args:
        f: Zero-argument function recomputing the scalar from the current
            contents of ``inputs``
        inputs: Tensors whose entries are perturbed (must require grad)
        eps: Finite-difference step
        n_samples: Number of coordinates sampled across all inputs
        seed: Sampling seed
        min_magnitude: Only sample coordinates whose analytic gradient
            magnitude exceeds this value

    Returns:
        Max over sampled coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    zero_grads(inputs)
    f().backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs
    ]

    candidates = []
    for i, g in enumerate(analytic):
        eligible = np.abs(g).ravel() > min_magnitude if min_magnitude > 0 else np.ones(g.size, bool)
        candidates.extend((i, int(flat)) for flat in np.flatnonzero(eligible))
    if not candidates:
        return 0.0
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n_samples, len(candidates)), replace=False)

    worst = 0.0
    for p in picks:
        i, flat = candidates[p]
        view = inputs[i].data.reshape(-1)
        original = view[flat]
        view[flat] = original + eps
        plus = f().item()
        view[flat] = original - eps
        minus = f().item()
        view[flat] = original
        numeric = (plus - minus) / (2.0 * eps)
        a = float(analytic[i].reshape(-1)[flat])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    zero_grads(inputs)
    return worst
