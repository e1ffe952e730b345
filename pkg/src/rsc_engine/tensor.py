"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records a node (inputs, output, local-derivative closure)
stamped with a global sequence number. ``backward`` collects the nodes
reachable from a scalar root into a :class:`Graph`, orders them by sequence
number and visits them in exact reverse of recording order.

Tensors are immutable: the underlying array is marked read-only and every
operation returns a new tensor.
"""
import itertools
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np


logger = logging.getLogger('rsc_engine')

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_sequence = itertools.count()


class TensorError(Exception):
    """Exception raised for invalid tensor operations."""
    pass


class GradientError(Exception):
    """Exception raised when backward meets a non-finite gradient."""
    pass


class Node:
    """One recorded primitive application."""

    __slots__ = ('seq', 'op', 'inputs', 'output', 'backward_fn')

    def __init__(self, op: str, inputs: Tuple['Tensor', ...], backward_fn: BackwardFn):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.output: Optional['Tensor'] = None
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node(#{self.seq} {self.op})"


class Tensor:
    """Dense float64 array participating in a differentiation graph."""

    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, node: Optional[Node] = None) -> 'Tensor':
        """Wrap an op result without copying."""
        out = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        if array.flags.writeable:
            array.flags.writeable = False
        out.data = array
        out.requires_grad = node is not None
        out.grad = None
        out.node = node
        out.name = None
        if node is not None:
            node.output = out
        return out

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the data."""
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    # --- operators ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, key): return getitem(self, key)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    """Return value as a Tensor (constants do not require grad)."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(op: str, array: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Create the output tensor, recording a node only if some input needs grad."""
    if any(t.requires_grad for t in inputs):
        return Tensor._wrap(array, Node(op, tuple(inputs), backward_fn))
    return Tensor._wrap(array)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast the gradient of a reduction back to the input shape."""
    if axis is None:
        return np.broadcast_to(np.reshape(grad, (1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape)


# ---------------------------------------------------------------------------
# Graph and backward
# ---------------------------------------------------------------------------

class Graph:
    """Ordered record of the primitive operations reachable from a root."""

    def __init__(self, nodes: List[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> 'Graph':
        """Collect reachable nodes in recording order."""
        seen = set()
        nodes: List[Node] = []
        stack = [root]
        while stack:
            tensor = stack.pop()
            node = tensor.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> List[str]:
        return [node.op for node in self.nodes]


def backward(root: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Graph:
    """Populate ``.grad`` of every reachable tensor that requires grad.

    Args:
        root: Scalar tensor produced by recorded primitives
        wrt: Optional tensors that must receive a gradient; unreachable
            ones get zeros

    Returns:
        The traversed graph

    Raises:
        TensorError: If root is not a scalar
        GradientError: If a non-finite gradient is produced by some node
    """
    if root.data.size != 1:
        raise TensorError(f"backward needs a scalar root, got shape {root.shape}")

    graph = Graph.from_root(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owners: Dict[int, Tensor] = {id(root): root}

    for node in reversed(graph.nodes):
        out = node.output
        grad = grads.pop(id(out), None)
        if grad is None:
            continue
        out.grad = np.array(grad)
        input_grads = node.backward_fn(grad)
        for tensor, input_grad in zip(node.inputs, input_grads):
            if input_grad is None or not tensor.requires_grad:
                continue
            if not np.all(np.isfinite(input_grad)):
                raise GradientError(
                    f"Non-finite gradient produced by node #{node.seq} ({node.op}) "
                    f"for input of shape {tensor.shape}"
                )
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + input_grad
            else:
                grads[key] = input_grad
                owners[key] = tensor

    # What is left belongs to leaves.
    for key, grad in grads.items():
        owners[key].grad = np.array(grad, dtype=np.float64).reshape(owners[key].shape)

    if wrt is not None:
        for tensor in wrt:
            if tensor.grad is None or not _reached(tensor, owners):
                tensor.grad = np.zeros_like(tensor.data)

    return graph


def _reached(tensor: Tensor, owners: Dict[int, Tensor]) -> bool:
    return owners.get(id(tensor)) is tensor


def stop_gradient(t: ArrayLike) -> Tensor:
    """Forward identity that blocks every gradient path through it."""
    t = as_tensor(t)
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.requires_grad = False
    out.grad = None
    out.node = None
    out.name = None
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _record('add', out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _record('sub', out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record('neg', -a.data, (a,), lambda g: (-g,))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _record('mul', out, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def grad_fn(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record('div', out, (a, b), grad_fn)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record('exp', out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return _record('log', out, (a,), lambda g: (g / a.data,))


def relu(a: ArrayLike) -> Tensor:
    """Rectifier; the subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)
    return _record('relu', out, (a,), lambda g: (g * mask,))


def elementwise(a: ArrayLike, fn: Callable[[np.ndarray], np.ndarray],
                dfn: Callable[[np.ndarray], np.ndarray], name: str) -> Tensor:
    """Differentiable elementwise map given its value and derivative functions."""
    a = as_tensor(a)
    out = fn(a.data)
    return _record(name, out, (a,), lambda g: (g * dfn(a.data),))


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record('matmul', out, (a, b), grad_fn)


def conv2d(x: ArrayLike, w: ArrayLike, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: Input of shape (N, C, H, W)
        w: Kernel of shape (O, C, kh, kw)
        stride: 1 or 2
        padding: Zero padding on every spatial side

    Returns:
        Output of shape (N, O, Ho, Wo)
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise TensorError(f"conv2d needs 4-D input and kernel, got {x.shape} and {w.shape}")
    if stride not in (1, 2):
        raise TensorError(f"Unsupported stride: {stride}")
    n, c, h, wid = x.shape
    o, c_w, kh, kw = w.shape
    if c != c_w:
        raise TensorError(f"conv2d channel mismatch: input {c}, kernel {c_w}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d output would be empty for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1

    # (O, N, Ho, Wo) accumulator; one tensordot per kernel tap.
    acc = np.zeros((o, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + h_span:stride, j:j + w_span:stride]
            acc += np.tensordot(w.data[:, :, i, j], patch, axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3)

    def grad_fn(g):
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + h_span:stride, j:j + w_span:stride]
                gw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                contrib = np.tensordot(w.data[:, :, i, j], g, axes=([0], [1]))
                gxp[:, :, i:i + h_span:stride, j:j + w_span:stride] += contrib.transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding:padding + h, padding:padding + wid]
        return gx, gw

    return _record('conv2d', out, (x, w), grad_fn)


def global_avg_pool(x: ArrayLike) -> Tensor:
    """Average over the spatial axes: (N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise TensorError(f"global_avg_pool needs a 4-D input, got {x.shape}")
    area = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape),)

    return _record('global_avg_pool', out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# Reductions and similarity
# ---------------------------------------------------------------------------

def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _record('sum', out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return _record('mean', out, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def squared_l2(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """Sum of squares over ``axis`` (all axes by default)."""
    a = as_tensor(a)
    out = np.sum(a.data * a.data, axis=axis, keepdims=keepdims)
    return _record('squared_l2', out, (a,),
                   lambda g: (2.0 * a.data * _expand_reduced(g, a.shape, axis, keepdims),))


def cosine_similarity(a: ArrayLike, b: ArrayLike, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis`` with broadcasting over the other axes.

    Raises:
        TensorError: If any operand vector has zero norm
    """
    a, b = as_tensor(a), as_tensor(b)
    na = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    nb = np.sqrt(np.sum(b.data * b.data, axis=axis, keepdims=True))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise TensorError("Cosine similarity is undefined for a zero-norm vector")
    dot = np.sum(a.data * b.data, axis=axis, keepdims=True)
    sim = dot / (na * nb)
    out = np.squeeze(sim, axis=axis)

    def grad_fn(g):
        ge = np.expand_dims(g, axis)
        ga = ge * (b.data / (na * nb) - sim * a.data / (na * na))
        gb = ge * (a.data / (na * nb) - sim * b.data / (nb * nb))
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _record('cosine_similarity', out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# Structural operations
# ---------------------------------------------------------------------------

def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _record('reshape', out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))
    return _record('transpose', out, (a,), lambda g: (g.transpose(inverse),))


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis for k in items)


def getitem(a: ArrayLike, key) -> Tensor:
    """Indexing; basic keys (ints, slices, Ellipsis) and integer arrays."""
    a = as_tensor(a)
    out = a.data[key]
    basic = _is_basic_index(key)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[key] += g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return _record('getitem', np.array(out), (a,), grad_fn)


def take(a: ArrayLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)
    axis = axis % a.ndim

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        index = (slice(None),) * axis + (indices,)
        np.add.at(ga, index, g)
        return (ga,)

    return _record('take', out, (a,), grad_fn)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record('concat', out, tensors, grad_fn)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[k] for k in range(len(tensors)))

    return _record('stack', out, tensors, grad_fn)


def zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape))
