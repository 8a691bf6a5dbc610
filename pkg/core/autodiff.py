"""
Reverse-Mode Automatic Differentiation
======================================

A ``Graph`` is a tape: every op appends a ``Node`` whose id is its position,
so ids are topologically ordered by construction and ``backward`` simply walks
the tape in reverse. Gradient rules are looked up by op kind in a registry,
which lets other modules (the losses in ``trainer``) add differentiable ops.

Nodes hold only a weak reference to their graph, so a tape is freed as soon
as the caller drops it. Intermediate gradients are released once they have
been passed to the inputs; only leaf nodes (parameters and constants) keep
``grad`` after ``backward``.

Only the op set the DWAN model needs is provided: dilated "same" conv2d,
ReLU, residual add, channel concat and constant scaling, plus the scalar
reductions used by the training harnesses and receptive-field measurements.
"""

import logging
import weakref
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import GradientError, InvalidArgumentError, ShapeMismatchError
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

BackwardRule = Callable[["Node", np.ndarray], Sequence[Optional[np.ndarray]]]

BACKWARD_RULES: Dict[str, BackwardRule] = {}


def register_backward(op: str) -> Callable[[BackwardRule], BackwardRule]:
    """Decorator registering the gradient rule of an op kind."""

    def decorator(rule: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[op] = rule
        return rule

    return decorator


class Node:
    """One recorded value: op kind, input nodes, output tensor, gradient."""

    __slots__ = ("_graph", "id", "op", "inputs", "value", "grad", "attrs", "name")

    def __init__(self, graph: "Graph", node_id: int, op: str, inputs: Tuple["Node", ...],
                 value: Tensor, attrs: Dict, name: Optional[str] = None):
        self._graph = weakref.ref(graph)
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.attrs = attrs
        self.name = name

    @property
    def graph(self) -> Optional["Graph"]:
        return self._graph()

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def gradient(self) -> Optional[Tensor]:
        return None if self.grad is None else Tensor(self.grad, dtype=self.grad.dtype)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node(#{self.id} {self.op}{label} shape={self.shape})"


class Graph:
    """Single-writer tape of nodes."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.parameters: Dict[str, Node] = {}

    def record(self, op: str, inputs: Sequence[Node], value: np.ndarray, **attrs) -> Node:
        for node in inputs:
            if node.graph is not self:
                raise InvalidArgumentError(f"{op}: input {node!r} belongs to another graph")
        node = Node(self, len(self.nodes), op, tuple(inputs), Tensor._wrap(value), attrs)
        self.nodes.append(node)
        return node

    def constant(self, tensor, name: Optional[str] = None) -> Node:
        tensor = as_tensor(tensor)
        node = Node(self, len(self.nodes), "const", (), tensor, {}, name)
        self.nodes.append(node)
        return node

    def parameter(self, name: str, tensor) -> Node:
        if name in self.parameters:
            raise InvalidArgumentError(f"parameter {name!r} registered twice")
        node = Node(self, len(self.nodes), "param", (), as_tensor(tensor), {}, name)
        self.nodes.append(node)
        self.parameters[name] = node
        return node

    def count(self, op: str) -> int:
        return sum(1 for node in self.nodes if node.op == op)

    def parameter_grads(self) -> Dict[str, np.ndarray]:
        """Gradients of every registered parameter (zeros if unreachable)."""
        grads = {}
        for name, node in self.parameters.items():
            grads[name] = node.grad if node.grad is not None else np.zeros(node.shape, node.value.dtype)
        return grads


def backward(graph: Graph, loss: Node) -> None:
    """
    Populate ``grad`` on the leaves (parameters and constants) the scalar
    ``loss`` depends on. Interior gradients are dropped once propagated.
    """
    if loss.graph is not graph:
        raise GradientError("loss node does not belong to this graph")
    if loss.shape not in ((), (1,)):
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")

    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones(loss.shape, dtype=loss.value.dtype)

    for node in reversed(graph.nodes[:loss.id + 1]):
        if node.grad is None or not node.inputs:
            continue
        rule = BACKWARD_RULES.get(node.op)
        if rule is None:
            raise GradientError(f"no gradient rule registered for op {node.op!r}")
        input_grads = rule(node, node.grad)
        for parent, grad in zip(node.inputs, input_grads):
            if grad is None:
                continue
            if grad.shape != parent.shape:
                raise GradientError(
                    f"{node.op}: gradient shape {grad.shape} does not match input shape {parent.shape}"
                )
            if parent.grad is None:
                parent.grad = np.array(grad, dtype=parent.value.dtype, copy=True)
            else:
                parent.grad += grad
        node.grad = None


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def _same_padding(kernel: int, dilation: int) -> Tuple[int, int]:
    before = dilation * (kernel // 2)
    after = dilation * (kernel - 1 - kernel // 2)
    return before, after


def _im2col(padded: np.ndarray, kh: int, kw: int, dilation: int, height: int, width: int) -> np.ndarray:
    """[C, Hp, Wp] -> [C*kh*kw, H*W], rows ordered (c, i, j)."""
    channels = padded.shape[0]
    cols = np.empty((channels, kh, kw, height, width), dtype=padded.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            cols[:, i, j] = padded[:, y0:y0 + height, x0:x0 + width]
    return cols.reshape(channels * kh * kw, height * width)


def _col2im(cols: np.ndarray, channels: int, kh: int, kw: int, dilation: int,
            height: int, width: int, pad_y: Tuple[int, int], pad_x: Tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_im2col`` followed by cropping away the zero padding."""
    cols = cols.reshape(channels, kh, kw, height, width)
    padded = np.zeros((channels, height + sum(pad_y), width + sum(pad_x)), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            padded[:, y0:y0 + height, x0:x0 + width] += cols[:, i, j]
    return padded[:, pad_y[0]:pad_y[0] + height, pad_x[0]:pad_x[0] + width]


def _pad(sample: np.ndarray, pad_y: Tuple[int, int], pad_x: Tuple[int, int]) -> np.ndarray:
    return np.pad(sample, ((0, 0), pad_y, pad_x), mode="constant")


def conv2d(x: Node, weight: Node, bias: Node, dilation: int = 1) -> Node:
    """
    Dilated 2-D convolution with "same" zero padding.

    out[n,f,y,x] = bias[f] + sum_{c,i,j} x[n,c, y+d(i-kh//2), x+d(j-kw//2)] * weight[f,c,i,j]
    """
    if int(dilation) != dilation or dilation < 1:
        raise InvalidArgumentError(f"conv2d: dilation must be an integer >= 1, got {dilation}")
    dilation = int(dilation)
    if x.value.ndim != 4:
        raise ShapeMismatchError("conv2d", "input [N,C,H,W]", x.shape)
    if weight.value.ndim != 4:
        raise ShapeMismatchError("conv2d", "weight [F,C,kh,kw]", weight.shape)
    n, c, height, width = x.shape
    filters, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeMismatchError("conv2d", f"weight with {c} input channels", weight.shape,
                                 "weight C must equal input C")
    if bias.shape != (filters,):
        raise ShapeMismatchError("conv2d", f"bias [{filters}]", bias.shape)

    pad_y, pad_x = _same_padding(kh, dilation), _same_padding(kw, dilation)
    inputs = x.value.numpy()
    w2 = weight.value.numpy().reshape(filters, c * kh * kw)
    b = bias.value.numpy().reshape(filters, 1)
    out = np.empty((n, filters, height, width), dtype=weight.value.dtype)
    for index in range(n):
        cols = _im2col(_pad(inputs[index], pad_y, pad_x), kh, kw, dilation, height, width)
        out[index] = (w2 @ cols + b).reshape(filters, height, width)
    return x.graph.record("conv2d", (x, weight, bias), out,
                          dilation=dilation, pad_y=pad_y, pad_x=pad_x)


def conv2d_backward(node: Node, upstream_grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients (grad_input, grad_weight, grad_bias) of a conv2d node."""
    if upstream_grad.shape != node.shape:
        raise ShapeMismatchError("conv2d_backward", node.shape, upstream_grad.shape)
    x, weight, _ = node.inputs
    dilation, pad_y, pad_x = node.attrs["dilation"], node.attrs["pad_y"], node.attrs["pad_x"]
    n, c, height, width = x.shape
    filters, _, kh, kw = weight.shape

    inputs = x.value.numpy()
    w2 = weight.value.numpy().reshape(filters, c * kh * kw)
    grad_input = np.empty_like(inputs)
    grad_w2 = np.zeros_like(w2)
    for index in range(n):
        up = upstream_grad[index].reshape(filters, height * width)
        cols = _im2col(_pad(inputs[index], pad_y, pad_x), kh, kw, dilation, height, width)
        grad_w2 += up @ cols.T
        grad_input[index] = _col2im(w2.T @ up, c, kh, kw, dilation, height, width, pad_y, pad_x)
    grad_bias = upstream_grad.sum(axis=(0, 2, 3))
    return grad_input, grad_w2.reshape(weight.shape), grad_bias


register_backward("conv2d")(conv2d_backward)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def relu(x: Node) -> Node:
    return x.graph.record("relu", (x,), np.maximum(x.value.numpy(), 0))


@register_backward("relu")
def _relu_backward(node: Node, upstream: np.ndarray):
    # subgradient 0 at exactly 0
    return (upstream * (node.inputs[0].value.numpy() > 0),)


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeMismatchError("add", a.shape, b.shape)
    return a.graph.record("add", (a, b), a.value.numpy() + b.value.numpy())


@register_backward("add")
def _add_backward(node: Node, upstream: np.ndarray):
    return upstream, upstream


def scale(x: Node, factor: float) -> Node:
    """Multiply by a fixed constant (not learned)."""
    factor = float(factor)
    if not np.isfinite(factor) or factor == 0.0:
        raise InvalidArgumentError(f"scale: factor must be finite and non-zero, got {factor}")
    value = x.value.numpy() * np.asarray(factor, dtype=x.value.dtype)
    return x.graph.record("scale", (x,), value, factor=factor)


@register_backward("scale")
def _scale_backward(node: Node, upstream: np.ndarray):
    return (upstream * np.asarray(node.attrs["factor"], dtype=upstream.dtype),)


def concat_channels(a: Node, b: Node) -> Node:
    if a.value.ndim != 4 or b.value.ndim != 4:
        raise ShapeMismatchError("concat_channels", "two [N,C,H,W] tensors", (a.shape, b.shape))
    if (a.shape[0],) + a.shape[2:] != (b.shape[0],) + b.shape[2:]:
        raise ShapeMismatchError("concat_channels", f"matching N,H,W of {a.shape}", b.shape)
    value = np.concatenate([a.value.numpy(), b.value.numpy()], axis=1)
    return a.graph.record("concat", (a, b), value, split=a.shape[1])


@register_backward("concat")
def _concat_backward(node: Node, upstream: np.ndarray):
    split = node.attrs["split"]
    return upstream[:, :split], upstream[:, split:]


def tile_batch(x: Node, batch: int) -> Node:
    """Repeat a single-sample tensor [1,...] ``batch`` times along axis 0."""
    if x.value.ndim < 1 or x.shape[0] != 1:
        raise ShapeMismatchError("tile_batch", "leading dimension 1", x.shape)
    if batch < 1:
        raise InvalidArgumentError(f"tile_batch: batch must be >= 1, got {batch}")
    value = np.repeat(x.value.numpy(), batch, axis=0)
    return x.graph.record("tile_batch", (x,), value, batch=batch)


@register_backward("tile_batch")
def _tile_batch_backward(node: Node, upstream: np.ndarray):
    return (upstream.sum(axis=0, keepdims=True),)


def sum_all(x: Node) -> Node:
    value = np.asarray(x.value.numpy().sum(), dtype=x.value.dtype)
    return x.graph.record("sum_all", (x,), value)


@register_backward("sum_all")
def _sum_all_backward(node: Node, upstream: np.ndarray):
    parent = node.inputs[0]
    return (np.full(parent.shape, upstream.reshape(()), dtype=parent.value.dtype),)


def pixel_sum(x: Node, y: int, x_pos: int) -> Node:
    """Scalar sum over batch and channels of one spatial position of [N,C,H,W]."""
    if x.value.ndim != 4:
        raise ShapeMismatchError("pixel_sum", "[N,C,H,W]", x.shape)
    height, width = x.shape[2:]
    if not (0 <= y < height and 0 <= x_pos < width):
        raise InvalidArgumentError(f"pixel_sum: ({y}, {x_pos}) outside {height}x{width}")
    value = np.asarray(x.value.numpy()[:, :, y, x_pos].sum(), dtype=x.value.dtype)
    return x.graph.record("pixel_sum", (x,), value, y=y, x=x_pos)


@register_backward("pixel_sum")
def _pixel_sum_backward(node: Node, upstream: np.ndarray):
    parent = node.inputs[0]
    grad = np.zeros(parent.shape, dtype=parent.value.dtype)
    grad[:, :, node.attrs["y"], node.attrs["x"]] = upstream.reshape(())
    return (grad,)


# ---------------------------------------------------------------------------
# finite-difference helpers for gradient verification
# ---------------------------------------------------------------------------

def numerical_gradient(loss_fn: Callable[[np.ndarray], float], values: np.ndarray,
                       index: Tuple[int, ...], step: float = 1e-5) -> float:
    """Central difference of ``loss_fn`` w.r.t. one coordinate of ``values``."""
    shifted = np.array(values, dtype=np.float64, copy=True)
    original = shifted[index]
    shifted[index] = original + step
    upper = loss_fn(shifted)
    shifted[index] = original - step
    lower = loss_fn(shifted)
    return (upper - lower) / (2.0 * step)


def gradient_relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
