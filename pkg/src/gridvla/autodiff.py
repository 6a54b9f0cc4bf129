"""Dense float64 tensor algebra with a reverse-mode tape and a finite-difference oracle."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class DegenerateBatchError(ValueError):
    """A reduction was asked for over an empty selection."""


class TargetRangeError(IndexError):
    """A target token id falls outside the logit vocabulary."""


class NonScalarLossError(ValueError):
    """backward() was called on a non-scalar root."""


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape.

    Data is stored row-major. Gradients accumulate additively across uses;
    call zero_grad() before each optimization step.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Records operations in execution order; backward replays them once, reversed.

    Recording order is a topological order by construction, so the reverse
    sweep visits every node exactly once. A tape is single-writer: build a
    fresh one per forward/backward pass.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()

    def _record(self, out: Tensor, inputs, backward_fn) -> Tensor:
        self._nodes.append(_Node(out, inputs, backward_fn))
        self._produced.add(id(out))
        return out

    def _needs_grad(self, t: Tensor) -> bool:
        # Frozen or constant leaves get no gradient at all; tape-produced
        # intermediates always propagate.
        return t.requires_grad or id(t) in self._produced

    # ---- primitives ------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
        out = Tensor(a.data @ b.data)
        need_a, need_b = self._needs_grad(a), self._needs_grad(b)

        def backward(g):
            grads = []
            if need_a:
                grads.append((a, g @ b.data.T))
            if need_b:
                grads.append((b, a.data.T @ g))
            return grads

        return self._record(out, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"add expects equal shapes, got {a.shape} and {b.shape}")
        out = Tensor(a.data + b.data)
        need_a, need_b = self._needs_grad(a), self._needs_grad(b)

        def backward(g):
            grads = []
            if need_a:
                grads.append((a, g))
            if need_b:
                grads.append((b, g))
            return grads

        return self._record(out, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"mul expects equal shapes, got {a.shape} and {b.shape}")
        out = Tensor(a.data * b.data)
        need_a, need_b = self._needs_grad(a), self._needs_grad(b)

        def backward(g):
            grads = []
            if need_a:
                grads.append((a, g * b.data))
            if need_b:
                grads.append((b, g * a.data))
            return grads

        return self._record(out, (a, b), backward)

    def scale(self, a: Tensor, s: float) -> Tensor:
        s = float(s)
        out = Tensor(a.data * s)

        def backward(g):
            return ((a, g * s),)

        return self._record(out, (a,), backward)

    def transpose(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise DimensionError(f"transpose expects a 2-D operand, got {a.shape}")
        out = Tensor(a.data.T.copy())

        def backward(g):
            return ((a, g.T),)

        return self._record(out, (a,), backward)

    def reshape(self, a: Tensor, shape) -> Tensor:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != a.size:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}")
        out = Tensor(a.data.reshape(shape))
        old_shape = a.shape

        def backward(g):
            return ((a, g.reshape(old_shape)),)

        return self._record(out, (a,), backward)

    def softmax_rows(self, a: Tensor) -> Tensor:
        # Max subtraction keeps exp() in range for any finite input.
        m = np.max(a.data, axis=-1, keepdims=True)
        e = np.subtract(a.data, m)
        np.exp(e, out=e)
        y = e / np.sum(e, axis=-1, keepdims=True)
        out = Tensor(y)

        def backward(g):
            dot = np.sum(g * y, axis=-1, keepdims=True)
            return ((a, y * (g - dot)),)

        return self._record(out, (a,), backward)

    def layer_norm(self, a: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
        if gain.shape != (a.shape[-1],) or offset.shape != (a.shape[-1],):
            raise DimensionError("layer_norm gain/offset must match the trailing extent")
        mu = np.mean(a.data, axis=-1, keepdims=True)
        var = np.mean((a.data - mu) ** 2, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (a.data - mu) * inv
        out = Tensor(xhat * gain.data + offset.data)
        need_a = self._needs_grad(a)
        need_gain, need_offset = self._needs_grad(gain), self._needs_grad(offset)

        def backward(g):
            grads = []
            if need_a:
                dxhat = g * gain.data
                dx = inv * (
                    dxhat
                    - np.mean(dxhat, axis=-1, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
                )
                grads.append((a, dx))
            axes = tuple(range(a.data.ndim - 1))
            if need_gain:
                grads.append((gain, np.sum(g * xhat, axis=axes) if axes else g * xhat))
            if need_offset:
                grads.append((offset, np.sum(g, axis=axes) if axes else g))
            return grads

        return self._record(out, (a, gain, offset), backward)

    def gelu(self, a: Tensor) -> Tensor:
        x = a.data
        cdf = x * _INV_SQRT2
        erf(cdf, out=cdf)
        cdf += 1.0
        cdf *= 0.5
        out = Tensor(x * cdf)

        def backward(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            return ((a, g * (cdf + x * pdf)),)

        return self._record(out, (a,), backward)

    def gather_rows(self, table: Tensor, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.intp)
        if table.data.ndim != 2:
            raise DimensionError("gather_rows expects a 2-D table")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise TargetRangeError(f"gather ids outside [0, {table.shape[0]})")
        out = Tensor(table.data[ids])
        # Positional gathers use 0..n-1; scatter-add reduces to a block copy there.
        is_arange = bool(ids.size) and ids[0] == 0 and np.array_equal(ids, np.arange(ids.size))
        need_table = self._needs_grad(table)

        def backward(g):
            if not need_table:
                return ()
            gt = np.zeros_like(table.data)
            if is_arange:
                gt[: ids.size] = g
            else:
                np.add.at(gt, ids, g)
            return ((table, gt),)

        return self._record(out, (table,), backward)

    def slice_rows(self, a: Tensor, start: int, stop: int) -> Tensor:
        if not (0 <= start <= stop <= a.shape[0]):
            raise DimensionError(f"row slice [{start}:{stop}] outside shape {a.shape}")
        out = Tensor(a.data[start:stop].copy())

        def backward(g):
            ga = np.zeros_like(a.data)
            ga[start:stop] = g
            return ((a, ga),)

        return self._record(out, (a,), backward)

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        if not (0 <= start <= stop <= a.shape[-1]):
            raise DimensionError(f"col slice [{start}:{stop}] outside shape {a.shape}")
        out = Tensor(a.data[..., start:stop].copy())

        def backward(g):
            ga = np.zeros_like(a.data)
            ga[..., start:stop] = g
            return ((a, ga),)

        return self._record(out, (a,), backward)

    def concat_rows(self, tensors) -> Tensor:
        tensors = list(tensors)
        out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
        sizes = [t.shape[0] for t in tensors]

        def backward(g):
            grads = []
            off = 0
            for t, n in zip(tensors, sizes):
                grads.append((t, g[off : off + n]))
                off += n
            return tuple(grads)

        return self._record(out, tuple(tensors), backward)

    def concat_cols(self, tensors) -> Tensor:
        tensors = list(tensors)
        out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
        sizes = [t.shape[-1] for t in tensors]

        def backward(g):
            grads = []
            off = 0
            for t, n in zip(tensors, sizes):
                grads.append((t, g[..., off : off + n]))
                off += n
            return tuple(grads)

        return self._record(out, tuple(tensors), backward)

    def mean(self, a: Tensor) -> Tensor:
        if a.size == 0:
            raise DegenerateBatchError("mean over an empty tensor")
        out = Tensor(np.float64(a.data.mean()))
        inv_n = 1.0 / a.size

        def backward(g):
            return ((a, np.full_like(a.data, float(g) * inv_n)),)

        return self._record(out, (a,), backward)

    def nll_loss(self, logits: Tensor, targets, mask) -> Tensor:
        """Mean negative log-likelihood over the masked-in positions of a T x V logit matrix."""
        if logits.data.ndim != 2:
            raise DimensionError("nll_loss expects 2-D logits")
        targets = np.asarray(targets, dtype=np.intp)
        mask = np.asarray(mask, dtype=bool)
        t_len, vocab = logits.shape
        if targets.shape != (t_len,) or mask.shape != (t_len,):
            raise DimensionError("targets and mask must have one entry per logit row")
        n = int(mask.sum())
        if n == 0:
            raise DegenerateBatchError("nll_loss: mask selects no positions")
        sel = targets[mask]
        if sel.size and (sel.min() < 0 or sel.max() >= vocab):
            raise TargetRangeError(f"target id outside [0, {vocab})")

        m = np.max(logits.data, axis=-1, keepdims=True)
        e = np.exp(logits.data - m)
        z = np.sum(e, axis=-1, keepdims=True)
        log_probs = logits.data - m - np.log(z)
        picked = log_probs[np.arange(t_len), targets]
        out = Tensor(np.float64(-(picked[mask].sum()) / n))
        probs = e / z

        def backward(g):
            gl = probs.copy()
            gl[np.arange(t_len), targets] -= 1.0
            gl *= (mask.astype(np.float64) / n)[:, None]
            return ((logits, gl * float(g)),)

        return self._record(out, (logits,), backward)

    # ---- reverse sweep ---------------------------------------------------

    def backward(self, loss: Tensor, grad_sink: list | None = None) -> None:
        """Populate .grad on every requires_grad leaf reachable from loss.

        With `grad_sink`, leaf gradients are appended to it as (tensor, grad)
        pairs instead of touching .grad; callers running tapes in parallel
        merge sinks in a fixed order to keep accumulation deterministic.
        """
        if loss.data.ndim != 0:
            raise NonScalarLossError(f"backward root must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.float64(1.0)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        # Contributions are stored borrowed until a second one arrives; only
        # then is a fresh accumulator allocated. Borrowed arrays are never
        # mutated, so aliasing (e.g. add passing one grad to both inputs) is safe.
        owned: set[int] = set()
        for node in reversed(self._nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            owned.discard(id(node.output))
            for tensor, contrib in node.backward_fn(g):
                tid = id(tensor)
                prev = grads.get(tid)
                if prev is None:
                    tensors[tid] = tensor
                    grads[tid] = contrib
                elif tid in owned:
                    prev += contrib
                else:
                    grads[tid] = prev + contrib
                    owned.add(tid)
        for tid, g in grads.items():
            t = tensors[tid]
            if tid not in self._produced and t.requires_grad:
                if grad_sink is not None:
                    grad_sink.append((t, g))
                elif t.grad is None:
                    t.grad = np.zeros_like(t.data)
                    t.grad += g
                else:
                    t.grad += g


def fd_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time.

    ``f`` takes no arguments and must read the current contents of ``x``;
    the array is perturbed in place and restored after each evaluation. This
    route never touches the tape, so it serves as an independent oracle.
    """
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
