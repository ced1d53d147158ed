"""Tape-based reverse-mode differentiation with surrogate spike derivatives."""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_SOFT_FORWARD = contextvars.ContextVar("cmlsnn_soft_forward", default=False)


@dataclass(frozen=True)
class SurrogateConfig:
    """Sigmoid surrogate for the Heaviside spike function.

    ``membrane_arg`` evaluates the surrogate at ``H - V`` (post-reset
    membrane) instead of ``H - V_th``; only meaningful with a hard forward.
    """

    kind: str = "sigmoid"
    alpha: float = 4.0
    membrane_arg: bool = False

    def __post_init__(self):
        if self.kind != "sigmoid":
            raise ValueError(f"unsupported surrogate kind {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError(f"surrogate alpha must be positive, got {self.alpha}")


def surrogate_derivative(v, cfg: SurrogateConfig = SurrogateConfig()):
    """``alpha * sig(alpha v) * (1 - sig(alpha v))``; accepts scalars or arrays."""
    a = cfg.alpha
    # written via e = exp(-|alpha v|) so the tails do not cancel to zero
    if np.ndim(v) == 0 and not isinstance(v, np.ndarray):
        e = math.exp(-abs(a * float(v)))
        return a * e / ((1.0 + e) * (1.0 + e))
    e = np.exp(-np.abs(a * np.asarray(v)))
    return a * e / ((1.0 + e) * (1.0 + e))


@contextlib.contextmanager
def soft_forward_mode(enabled: bool = True):
    """Use the sigmoid instead of the Heaviside step in spike forwards.

    Forward and backward then describe the same smooth function, which makes
    finite-difference checks meaningful for graphs containing spike nodes.
    """
    token = _SOFT_FORWARD.set(bool(enabled))
    try:
        yield
    finally:
        _SOFT_FORWARD.reset(token)


def soft_forward_enabled() -> bool:
    return _SOFT_FORWARD.get()


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "data", "requires_grad", "grad", "name")

    def __init__(self, tape, index, data, requires_grad, name=None):
        self.tape = tape
        self.index = index
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = self.name or self.tape.nodes[self.index].op
        return f"Var({tag}, shape={self.data.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple
    backward: Callable | None
    ctx: dict


class Tape:
    """Ordered record of a computation; nodes are appended in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.vars: list[Var] = []
        self._params: dict[int, Var] = {}

    def leaf(self, data, requires_grad=True, name=None) -> Var:
        return self._append("leaf", (), np.asarray(data), None, {}, requires_grad, name)

    def constant(self, data, name=None) -> Var:
        return self.leaf(data, requires_grad=False, name=name)

    def param(self, array: np.ndarray, name=None) -> Var:
        """Leaf bound to a parameter array; one leaf per array per tape."""
        key = id(array)
        if key not in self._params:
            self._params[key] = self.leaf(array, name=name)
        return self._params[key]

    def grad_of(self, array: np.ndarray):
        var = self._params.get(id(array))
        if var is None or var.grad is None:
            return np.zeros_like(array)
        return var.grad

    def record(self, op, inputs: Sequence[Var], data, backward, ctx=None) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"op {op!r} mixes vars from different tapes")
        requires = any(v.requires_grad for v in inputs)
        return self._append(op, tuple(inputs), data, backward, ctx or {}, requires, None)

    def _append(self, op, inputs, data, backward, ctx, requires_grad, name):
        idx = len(self.nodes)
        self.nodes.append(Node(op, inputs, backward, ctx))
        var = Var(self, idx, data, requires_grad, name)
        self.vars.append(var)
        return var

    def release(self):
        """Drop every recorded node and var.

        Vars point at their tape and the tape points back at them, so a
        finished tape is otherwise only freed by the cycle collector, which
        runs too rarely to keep up with a training loop's activations.
        Gradient arrays already handed out stay valid.
        """
        self.nodes.clear()
        self.vars.clear()
        self._params.clear()

    def backward(self, output: Var | None = None, seed=None, wrt: Sequence[Var] = ()):
        """Reverse sweep from ``output`` (default: the last recorded node).

        Returns a dict mapping every grad-requiring leaf, plus each var in
        ``wrt``, to its gradient; unreachable ones get zeros.  Leaf gradients
        are also stored on ``var.grad``.
        """
        if output is None:
            if not self.vars:
                raise ValueError("backward on an empty tape")
            output = self.vars[-1]
        if seed is None:
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=output.data.dtype)
        if seed.shape != output.data.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {output.data.shape}")
        grads: dict[int, np.ndarray] = {output.index: seed}
        for idx in range(output.index, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.backward is None:
                continue
            in_grads = node.backward(g, node.ctx)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.index in grads:
                    grads[inp.index] = grads[inp.index] + gi
                else:
                    grads[inp.index] = gi
        result = {}
        for var in self.vars:
            if self.nodes[var.index].op == "leaf" and var.requires_grad:
                var.grad = grads.get(var.index, np.zeros_like(var.data))
                result[var] = var.grad
        for var in wrt:
            result[var] = grads.get(var.index, np.zeros_like(var.data))
        return result


def backward(tape: Tape, seed=None, output: Var | None = None, wrt: Sequence[Var] = ()):
    """Functional alias for :meth:`Tape.backward`."""
    return tape.backward(output, seed, wrt)
