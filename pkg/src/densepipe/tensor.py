"""A small reverse-mode autodiff tensor over float64 numpy arrays.

Every layer primitive in :mod:`densepipe.ops` takes and returns
:class:`Tensor` objects.  An output remembers its parents and a closure
that pushes its gradient back to them; :meth:`Tensor.backward` walks the
graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import zlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g, owned=False):
        """Add ``g`` into ``self.grad``.

        ``owned=True`` lets a freshly computed array become the buffer
        without a copy.
        """
        if self.grad is None:
            if owned and g.dtype == np.float64 and g.flags.c_contiguous and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor.

        ``grad`` defaults to ones (so a scalar loss needs no argument).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            from .errors import ShapeError

            raise ShapeError(f"upstream gradient shape {grad.shape} != {self.data.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def make_output(data, parents, backward):
    """Wrap ``data`` as an op result, wiring ``backward`` when tracking."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Rng:
    """Seeded PCG64 generator with named, independent sub-streams.

    ``Rng(7).stream("dropout", 3)`` always yields the same generator, and
    it is statistically independent of ``Rng(7).stream("shuffle", 3)``.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    @property
    def generator(self):
        return self._gen

    def stream(self, purpose, *index):
        key = [zlib.crc32(purpose.encode("utf-8"))] + [int(i) for i in index]
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(key))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, purpose, *index):
        """Like :meth:`stream` but returns an :class:`Rng`."""
        seed = int(self.stream(purpose, *index).integers(0, 2**63 - 1))
        return Rng(seed)

    def normal(self, *args, **kw):
        return self._gen.normal(*args, **kw)

    def random(self, *args, **kw):
        return self._gen.random(*args, **kw)

    def permutation(self, n):
        return self._gen.permutation(n)
