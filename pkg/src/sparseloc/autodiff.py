"""Minimal reverse-mode tape for the array ops the network needs.

Layers record backward closures on a :class:`Tape` during the forward pass.
``Tape.backward`` seeds the output gradient and replays the closures in
reverse order, accumulating into each :class:`Var`'s ``grad`` slot.  Running
a forward pass with ``tape=None`` records nothing (eval / frozen mode).
"""

from __future__ import annotations

import numpy as np

from .errors import TapeConsumed


class Var:
    """An ndarray value with a gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def add_grad(self, g):
        if self.grad is None:
            # copy: g may be a broadcast view or aliased buffer
            self.grad = np.array(np.broadcast_to(g, self.value.shape), dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self):
        self._ops = []
        self._consumed = False

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def __len__(self):
        return len(self._ops)

    def backward(self, out: Var, seed=1.0):
        """Seed ``out.grad`` and replay recorded ops in reverse order."""
        if self._consumed:
            raise TapeConsumed("backward() already ran on this tape")
        self._consumed = True
        out.add_grad(np.asarray(seed, dtype=np.float64))
        for fn in reversed(self._ops):
            fn()
