"""
Reverse-mode gradient tape over a fixed op vocabulary

Values are numpy arrays. Every op creates a Node; nodes that depend on a
trainable variable are recorded on the tape in creation order, so walking the
record backwards is a reverse topological order and each node is visited once.
"""

import logging
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp as _logsumexp

from src import config
from src.errors import NumericalError, ShapeError, TapeError


logger = logging.getLogger(__name__)

ArrayLike = Union["Node", np.ndarray, float, int]


class Node:
    """A value on the tape plus its adjoint buffer"""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False,
                 parents: Tuple["Node", ...] = (), backward_fn: Optional[Callable] = None,
                 name: Optional[str] = None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


class Tape:
    """
    Records differentiable ops and runs the backward pass once.

    Usage:
        tape = Tape()
        x = tape.variable(np.array([1.0, 2.0, 3.0]), name="x")
        y = tape.sum(tape.mul(x, x))
        tape.backward(y)
        x.grad  # -> [2, 4, 6]
    """

    def __init__(self):
        self.nodes = []
        self.parameters: Dict[str, Node] = {}
        self.loss: Optional[Node] = None
        self.consumed = False

    # ------------------------------------------------------------------
    # Leaves and bookkeeping
    # ------------------------------------------------------------------

    def variable(self, value, name: Optional[str] = None) -> Node:
        """Trainable leaf; registered under name when given"""
        node = Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.nodes.append(node)
        if name is not None:
            self.parameters[name] = node
        return node

    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64))

    def _as_node(self, x: ArrayLike) -> Node:
        return x if isinstance(x, Node) else self.constant(x)

    def _record(self, value: np.ndarray, parents: Sequence[Node],
                backward_fn: Callable[[np.ndarray], None]) -> Node:
        requires = any(p.requires_grad for p in parents)
        if not requires:
            return Node(value)
        node = Node(value, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn)
        self.nodes.append(node)
        return node

    @staticmethod
    def _accumulate(node: Node, grad: np.ndarray) -> None:
        if not node.requires_grad:
            return
        grad = _unbroadcast(grad, node.value.shape)
        node.grad = grad if node.grad is None else node.grad + grad

    def backward(self, out: Node) -> None:
        """
        Propagate adjoints from a scalar output.

        Raises:
            TapeError: tape already consumed or output not scalar
        """
        if self.consumed:
            raise TapeError("Tape has already been consumed by a backward pass")
        if out.value.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {out.value.shape}")
        self.consumed = True
        if not out.requires_grad:
            return
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node.backward_fn is not None:
                node.backward_fn(node.grad)
        logger.debug(f"Backward pass over {len(self.nodes)} nodes")

    # ------------------------------------------------------------------
    # Linear ops
    # ------------------------------------------------------------------

    def add(self, a: ArrayLike, b: ArrayLike) -> Node:
        a, b = self._as_node(a), self._as_node(b)

        def backward(g):
            self._accumulate(a, g)
            self._accumulate(b, g)
        return self._record(a.value + b.value, (a, b), backward)

    def sub(self, a: ArrayLike, b: ArrayLike) -> Node:
        a, b = self._as_node(a), self._as_node(b)

        def backward(g):
            self._accumulate(a, g)
            self._accumulate(b, -g)
        return self._record(a.value - b.value, (a, b), backward)

    def mul(self, a: ArrayLike, b: ArrayLike) -> Node:
        a, b = self._as_node(a), self._as_node(b)

        def backward(g):
            self._accumulate(a, g * b.value)
            self._accumulate(b, g * a.value)
        return self._record(a.value * b.value, (a, b), backward)

    def scale(self, a: ArrayLike, c: float) -> Node:
        a = self._as_node(a)

        def backward(g):
            self._accumulate(a, g * c)
        return self._record(a.value * c, (a,), backward)

    def matmul(self, a: ArrayLike, b: ArrayLike) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        if a.value.ndim < 2 or b.value.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-D")

        def backward(g):
            self._accumulate(a, g @ _swap_last(b.value))
            self._accumulate(b, _swap_last(a.value) @ g)
        return self._record(a.value @ b.value, (a, b), backward)

    def sum(self, a: ArrayLike, axis=None, keepdims: bool = False) -> Node:
        a = self._as_node(a)
        value = np.sum(a.value, axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(a, np.broadcast_to(g, a.value.shape))
        return self._record(np.asarray(value), (a,), backward)

    def weighted_sum(self, w: ArrayLike, e: ArrayLike) -> Node:
        """(..., S) weights against (..., S, D) rows -> (..., D)"""
        w, e = self._as_node(w), self._as_node(e)
        if w.value.shape[-1] != e.value.shape[-2]:
            raise ShapeError(f"weights {w.value.shape} do not match rows {e.value.shape}")
        value = np.einsum("...s,...sd->...d", w.value, e.value)

        def backward(g):
            self._accumulate(w, np.einsum("...d,...sd->...s", g, e.value))
            self._accumulate(e, w.value[..., :, None] * g[..., None, :])
        return self._record(value, (w, e), backward)

    # ------------------------------------------------------------------
    # Shape ops
    # ------------------------------------------------------------------

    def reshape(self, a: ArrayLike, shape: Tuple[int, ...]) -> Node:
        a = self._as_node(a)
        original = a.value.shape

        def backward(g):
            self._accumulate(a, g.reshape(original))
        return self._record(a.value.reshape(shape), (a,), backward)

    def transpose(self, a: ArrayLike, axes: Tuple[int, ...]) -> Node:
        a = self._as_node(a)
        inverse = tuple(np.argsort(axes))

        def backward(g):
            self._accumulate(a, np.transpose(g, inverse))
        return self._record(np.transpose(a.value, axes), (a,), backward)

    def concat(self, nodes: Iterable[ArrayLike], axis: int = 0) -> Node:
        nodes = [self._as_node(n) for n in nodes]
        sizes = [n.value.shape[axis] for n in nodes]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            for node, part in zip(nodes, np.split(g, splits, axis=axis)):
                self._accumulate(node, part)
        return self._record(np.concatenate([n.value for n in nodes], axis=axis), nodes, backward)

    def embed(self, table: ArrayLike, ids: np.ndarray) -> Node:
        """Row lookup table[ids]"""
        table = self._as_node(table)
        ids = np.asarray(ids, dtype=np.int64)

        def backward(g):
            grad = np.zeros_like(table.value)
            np.add.at(grad, ids, g)
            self._accumulate(table, grad)
        return self._record(table.value[ids], (table,), backward)

    def take_along(self, a: ArrayLike, index: np.ndarray) -> Node:
        """Pick a[..., index[...]] along the last axis"""
        a = self._as_node(a)
        index = np.asarray(index, dtype=np.int64)[..., None]
        value = np.take_along_axis(a.value, index, axis=-1)[..., 0]

        def backward(g):
            grad = np.zeros_like(a.value)
            np.put_along_axis(grad, index, g[..., None], axis=-1)
            self._accumulate(a, grad)
        return self._record(value, (a,), backward)

    # ------------------------------------------------------------------
    # Nonlinear ops
    # ------------------------------------------------------------------

    def exp(self, a: ArrayLike) -> Node:
        a = self._as_node(a)
        value = np.exp(a.value)

        def backward(g):
            self._accumulate(a, g * value)
        return self._record(value, (a,), backward)

    def relu(self, a: ArrayLike) -> Node:
        a = self._as_node(a)
        active = a.value > 0

        def backward(g):
            self._accumulate(a, g * active)
        return self._record(np.where(active, a.value, 0.0), (a,), backward)

    def softmax(self, a: ArrayLike, axis: int = -1) -> Node:
        a = self._as_node(a)
        shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
        ex = np.exp(shifted)
        y = ex / np.sum(ex, axis=axis, keepdims=True)

        def backward(g):
            self._accumulate(a, y * (g - np.sum(g * y, axis=axis, keepdims=True)))
        return self._record(y, (a,), backward)

    def logsumexp(self, a: ArrayLike, axis: int = -1, keepdims: bool = False) -> Node:
        a = self._as_node(a)
        kept = _logsumexp(a.value, axis=axis, keepdims=True)
        value = kept if keepdims else np.squeeze(kept, axis=axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(a, g * np.exp(a.value - kept))
        return self._record(np.asarray(value), (a,), backward)

    def masked_log(self, a: ArrayLike, mask: np.ndarray, floor: float = config.LOG_ZERO) -> Node:
        """log(a) where mask holds, a finite floor elsewhere"""
        a = self._as_node(a)
        mask = np.asarray(mask, dtype=bool)
        safe = np.where(mask, a.value, 1.0)
        if np.any(safe <= 0):
            raise NumericalError("masked_log of a nonpositive retained entry")

        def backward(g):
            self._accumulate(a, np.where(mask, g / safe, 0.0))
        return self._record(np.where(mask, np.log(safe), floor), (a,), backward)

    def renormalize(self, a: ArrayLike, axis: int = -1) -> Node:
        """a / sum(a) along axis"""
        a = self._as_node(a)
        total = np.sum(a.value, axis=axis, keepdims=True)
        if np.any(total <= 0):
            raise NumericalError("cannot renormalize a vector with no mass")
        y = a.value / total

        def backward(g):
            self._accumulate(a, (g - np.sum(g * y, axis=axis, keepdims=True)) / total)
        return self._record(y, (a,), backward)

    def normalize(self, a: ArrayLike, axis: int = -1) -> Node:
        """L2-normalize along axis; norms below the floor are an error"""
        a = self._as_node(a)
        norm = np.linalg.norm(a.value, axis=axis, keepdims=True)
        if np.any(norm < config.NORM_FLOOR):
            raise NumericalError("normalize of a zero-norm vector")
        y = a.value / norm

        def backward(g):
            self._accumulate(a, (g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm)
        return self._record(y, (a,), backward)

    def cosine(self, a: ArrayLike, b: ArrayLike, axis: int = -1) -> Node:
        """Cosine similarity along axis (broadcasting over the rest)"""
        a, b = self._as_node(a), self._as_node(b)
        na = np.linalg.norm(a.value, axis=axis, keepdims=True)
        nb = np.linalg.norm(b.value, axis=axis, keepdims=True)
        if np.any(na < config.NORM_FLOOR) or np.any(nb < config.NORM_FLOOR):
            raise NumericalError("cosine of a zero-norm vector")
        ua, ub = a.value / na, b.value / nb
        cos = np.sum(ua * ub, axis=axis, keepdims=True)

        def backward(g):
            g = np.expand_dims(g, axis)
            self._accumulate(a, g * (ub - cos * ua) / na)
            self._accumulate(b, g * (ua - cos * ub) / nb)
        return self._record(np.squeeze(cos, axis=axis), (a, b), backward)

    def layer_norm(self, x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Node:
        """Normalize the last axis, then scale and shift"""
        x, gamma, beta = self._as_node(x), self._as_node(gamma), self._as_node(beta)
        mu = np.mean(x.value, axis=-1, keepdims=True)
        centered = x.value - mu
        inv_std = 1.0 / np.sqrt(np.mean(centered ** 2, axis=-1, keepdims=True) + eps)
        xhat = centered * inv_std
        width = x.value.shape[-1]

        def backward(g):
            self._accumulate(gamma, g * xhat)
            self._accumulate(beta, g)
            gx = g * gamma.value
            self._accumulate(x, inv_std / width * (
                width * gx
                - np.sum(gx, axis=-1, keepdims=True)
                - xhat * np.sum(gx * xhat, axis=-1, keepdims=True)
            ))
        return self._record(xhat * gamma.value + beta.value, (x, gamma, beta), backward)

    # ------------------------------------------------------------------
    # Composite: unrolled log-domain Sinkhorn
    # ------------------------------------------------------------------

    def sinkhorn(self, cost: ArrayLike, a: ArrayLike, b: ArrayLike,
                 eps: float, iters: int) -> Tuple[Node, Node]:
        """
        Unrolled log-domain Sinkhorn on (..., Sa, Sb) costs.

        Each iteration updates the column potential, then the row potential,
        so the returned plan matches the row marginal exactly. Zero-mass
        entries of a or b get a finite log floor, which makes their plan rows
        or columns vanish.

        Returns:
            (plan node, transport cost node <P, C> per instance)
        """
        cost, a, b = self._as_node(cost), self._as_node(a), self._as_node(b)
        log_a = self.scale(self.masked_log(a, a.value > 0), eps)
        log_b = self.scale(self.masked_log(b, b.value > 0), eps)
        neg_cost = self.scale(cost, -1.0 / eps)
        rows, cols = cost.value.shape[-2], cost.value.shape[-1]
        lead = cost.value.shape[:-2]

        # zero-mass rows start at the log floor so they never enter the first column update
        f = self.constant(np.broadcast_to(np.where(a.value > 0, 0.0, config.LOG_ZERO * eps), lead + (rows,)))
        for _ in range(iters):
            fc = self.add(neg_cost, self.scale(self.reshape(f, lead + (rows, 1)), 1.0 / eps))
            g = self.sub(log_b, self.scale(self.logsumexp(fc, axis=-2), eps))
            gc = self.add(neg_cost, self.scale(self.reshape(g, lead + (1, cols)), 1.0 / eps))
            f = self.sub(log_a, self.scale(self.logsumexp(gc, axis=-1), eps))

        potentials = self.add(self.reshape(f, lead + (rows, 1)), self.reshape(g, lead + (1, cols)))
        plan = self.exp(self.add(neg_cost, self.scale(potentials, 1.0 / eps)))
        transport = self.sum(self.mul(plan, cost), axis=(-2, -1))
        return plan, transport
