"""Tensor node and reverse-mode sweep."""
import numpy as np

from ..errors import RejectedInputError


class Tensor:
    """A numpy array plus the bookkeeping needed to backpropagate through it.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` buffer of
    the same shape that :meth:`backward` accumulates into. Interior nodes keep
    a reference to their parents and a closure that maps the output gradient
    to parent gradients; their own gradients are not retained.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # ---- array-like surface ----
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def set_requires_grad(self, flag):
        if not self.is_leaf:
            raise RejectedInputError("requires_grad can only be toggled on leaf tensors")
        self.requires_grad = bool(flag)
        if flag and self.grad is None:
            self.grad = np.zeros_like(self.data)
        elif not flag:
            self.grad = None
        return self

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # ---- operators (implemented in ops) ----
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum_all(self)

    def mean(self):
        from . import ops
        return ops.mean_all(self)

    def backward(self):
        backward(self)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_node(data, parents, backward_fn):
    """Wrap an op result; the closure is kept only if some parent needs grad.

    ``backward_fn(g)`` returns one gradient per parent, in order; entries for
    parents that do not require grad may be None.
    """
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Traversal order depends only on graph structure, so accumulation order,
    and hence the floating-point result, is reproducible.
    """
    if not isinstance(loss, Tensor):
        raise RejectedInputError("backward expects a Tensor")
    if loss.size != 1:
        raise RejectedInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad += np.ones_like(loss.data)
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
