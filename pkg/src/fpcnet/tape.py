"""Reverse-mode tape over the functional kernels in ops.py.

A ``Node`` pairs a value with a gradient slot. Traced wrappers compute the
forward result with the pure kernels and, when a ``GradTape`` is supplied,
register a closure that routes the output gradient to the inputs. The tape
replays closures in exact reverse execution order, which is a valid
topological order because every op's inputs were created before it ran.

Passing ``tape=None`` gives a record-free forward (inference path).
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError


class Node:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad: np.ndarray | None = None


def _accumulate(node: Node, grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = grad
    else:
        node.grad = node.grad + grad


class GradTape:
    """Ordered record of executed ops, replayed backward."""

    def __init__(self):
        self._records: list[tuple[Node, object]] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Node, backward) -> None:
        self._records.append((out, backward))

    def backward(self, out: Node, seed_grad: np.ndarray | None = None) -> None:
        """Seed d(out)/d(out) and propagate to every recorded input."""
        if seed_grad is None:
            seed_grad = np.ones_like(out.value)
        out.grad = seed_grad
        for node, backward in reversed(self._records):
            if node.grad is not None:
                backward(node.grad)


def constant(value: np.ndarray) -> Node:
    return Node(value)


def conv2d(tape, x: Node, weight: Node, bias: Node, *, dilation=1, padding=0, stride=1) -> Node:
    params = ops.ConvParams(weight.value, bias.value, dilation, padding, stride)
    out = Node(ops.conv2d(x.value, params))
    if tape is not None:
        def backward(g):
            gx, gw, gb = ops.conv2d_backward(g, x.value, params)
            _accumulate(x, gx)
            _accumulate(weight, gw)
            _accumulate(bias, gb)
        tape.record(out, backward)
    return out


def transposed_conv2d(tape, x: Node, weight: Node, bias: Node | None) -> Node:
    out = Node(ops.transposed_conv2d(x.value, weight.value,
                                     bias.value if bias is not None else None))
    if tape is not None:
        def backward(g):
            gx, gw, gb = ops.transposed_conv2d_backward(
                g, x.value, weight.value, has_bias=bias is not None
            )
            _accumulate(x, gx)
            _accumulate(weight, gw)
            if bias is not None:
                _accumulate(bias, gb)
        tape.record(out, backward)
    return out


def maxpool2x2(tape, x: Node) -> Node:
    y, idx = ops.maxpool2x2(x.value)
    out = Node(y)
    if tape is not None:
        hw = x.value.shape[2:]
        def backward(g):
            _accumulate(x, ops.maxpool2x2_backward(g, idx, hw))
        tape.record(out, backward)
    return out


def global_avg_pool(tape, x: Node) -> Node:
    out = Node(ops.global_avg_pool(x.value))
    if tape is not None:
        hw = x.value.shape[2:]
        def backward(g):
            _accumulate(x, ops.global_avg_pool_backward(g, hw))
        tape.record(out, backward)
    return out


def broadcast_hw(tape, x: Node, hw) -> Node:
    out = Node(ops.broadcast_hw(x.value, hw))
    if tape is not None:
        def backward(g):
            _accumulate(x, ops.broadcast_hw_backward(g))
        tape.record(out, backward)
    return out


def relu(tape, x: Node) -> Node:
    out = Node(ops.relu(x.value))
    if tape is not None:
        def backward(g):
            _accumulate(x, ops.relu_backward(g, x.value))
        tape.record(out, backward)
    return out


def sigmoid(tape, x: Node) -> Node:
    out = Node(ops.sigmoid(x.value))
    if tape is not None:
        def backward(g):
            _accumulate(x, ops.sigmoid_backward(g, out.value))
        tape.record(out, backward)
    return out


def fully_connected(tape, x: Node, weight: Node, bias: Node) -> Node:
    out = Node(ops.fully_connected(x.value, weight.value, bias.value))
    if tape is not None:
        def backward(g):
            gx, gw, gb = ops.fully_connected_backward(g, x.value, weight.value)
            _accumulate(x, gx)
            _accumulate(weight, gw)
            _accumulate(bias, gb)
        tape.record(out, backward)
    return out


def concat_channels(tape, xs: list[Node]) -> Node:
    out = Node(ops.concat_channels([x.value for x in xs]))
    if tape is not None:
        counts = [x.value.shape[1] for x in xs]
        def backward(g):
            for x, gx in zip(xs, ops.concat_channels_backward(g, counts)):
                _accumulate(x, gx)
        tape.record(out, backward)
    return out


def add(tape, a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add requires equal shapes, got {a.value.shape} and {b.value.shape}")
    out = Node(a.value + b.value)
    if tape is not None:
        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g)
        tape.record(out, backward)
    return out


def scale_channels(tape, x: Node, w: Node) -> Node:
    """Multiply [N, C, H, W] by per-channel weights [N or 1, C, 1, 1]."""
    xv, wv = x.value, w.value
    if wv.ndim != 4 or wv.shape[2:] != (1, 1) or wv.shape[1] != xv.shape[1] \
            or wv.shape[0] not in (1, xv.shape[0]):
        raise ShapeError(f"weights {wv.shape} not broadcastable over {xv.shape}")
    out = Node(xv * wv)
    if tape is not None:
        def backward(g):
            _accumulate(x, g * wv)
            gw = (g * xv).sum(axis=(2, 3), keepdims=True)
            if wv.shape[0] == 1 and xv.shape[0] != 1:
                gw = gw.sum(axis=0, keepdims=True)
            _accumulate(w, gw)
        tape.record(out, backward)
    return out


def reshape(tape, x: Node, shape) -> Node:
    out = Node(x.value.reshape(shape))
    if tape is not None:
        orig = x.value.shape
        def backward(g):
            _accumulate(x, g.reshape(orig))
        tape.record(out, backward)
    return out


def bce_dice_loss(tape, pred: Node, target: np.ndarray) -> Node:
    out = Node(np.asarray(ops.bce_dice_loss(pred.value, target), dtype=pred.value.dtype))
    if tape is not None:
        def backward(g):
            _accumulate(pred, g * ops.bce_dice_loss_backward(pred.value, target))
        tape.record(out, backward)
    return out
