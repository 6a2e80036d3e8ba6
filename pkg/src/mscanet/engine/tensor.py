"""Dense tensors plus a gradient tape for reverse-mode differentiation.

Values live in plain numpy arrays, float32 for training throughput or
float64 for verification (finite-difference checks are unreliable at
32 bit).  Ops in :mod:`mscanet.engine.ops` record a backward closure on
the active :class:`Tape`; ``Tape.backward`` replays the closures in
exact reverse execution order and accumulates gradients into the
``grad`` buffer of every tensor that requires them.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import NumericsError, TapeError

# Debug switch: verify every op output is finite. Costs a full pass over
# each activation, so it is off by default; MSCA_DEBUG=1 enables it.
CHECK_FINITE = os.environ.get("MSCA_DEBUG", "0") not in ("", "0")

_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-d array with an optional same-shape gradient buffer.

    Network activations are N x C x H x W; conv weights are 4-d, biases
    and batch-norm affine parameters 1-d, and reduced losses 0-d.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g):
        """Add ``g`` into the gradient buffer (allocating it on first use)."""
        if self.grad is None:
            # Copy so the buffer never aliases an upstream gradient.
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    @classmethod
    def zeros(cls, shape, dtype=np.float32, requires_grad=False):
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flags})"


class Tape:
    """Ordered record of executed ops.

    Use as a context manager around a forward pass; ``backward(loss)``
    seeds the scalar loss gradient and walks the record in reverse.  A
    tape is single-use: replaying it twice without a fresh forward pass
    is an error.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self._records = []
        self._spent = False
        self._prev = None

    @classmethod
    def active(cls):
        return cls._active

    @property
    def spent(self):
        return self._spent

    def __enter__(self):
        self._prev = Tape._active
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = self._prev
        self._prev = None
        return False

    def record(self, out, backward_fn):
        self._records.append((out, backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Backpropagate from a scalar loss through every recorded op."""
        if self._spent:
            raise TapeError("tape already consumed; run a new forward pass")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._records):
            if out.grad is not None:
                backward_fn(out.grad)
        # Release saved intermediates; the tape cannot be replayed anyway.
        self._records.clear()


def record_op(inputs, out, backward_fn):
    """Register ``out = op(inputs)`` on the active tape, if any.

    The op is recorded only when a tape is active and at least one input
    participates in differentiation; otherwise the forward value passes
    through untracked (eval mode).
    """
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NumericsError("non-finite values in op output")
    tape = Tape._active
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out
