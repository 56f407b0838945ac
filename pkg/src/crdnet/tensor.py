"""Minimal NCHW tensors with tape-based reverse-mode differentiation.

Only the operations the network needs are provided. Every operation computes
its forward result with numpy and, when a :class:`Tape` is active, records a
closure mapping the output gradient to input gradients.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class Tensor:
    """A dense array plus an identity that the tape can key gradients on."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """A learnable tensor with an accumulated gradient and a stable name."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str):
        super().__init__(np.array(data, copy=True))
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class TapeError(RuntimeError):
    pass


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward = backward


_state = threading.local()


def current_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block are
    recorded. Tapes are per-thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._grads: dict[int, np.ndarray] = {}
        self._seen: dict[int, Tensor] = {}
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = current_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); record a new one")
        self.nodes.append(_Node(output, inputs, backward))

    def gradient(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward root with respect to ``tensor``."""
        if not self.consumed:
            raise TapeError("backward() has not been run on this tape")
        g = self._grads.get(id(tensor))
        if g is None or self._seen.get(id(tensor)) is not tensor:
            return np.zeros_like(tensor.data)
        return g


def record(output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register ``output`` on the active tape, if any, and return it.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    tape = current_tape()
    if tape is not None:
        tape.record(output, inputs, backward)
    return output


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every Parameter reached on ``tape``."""
    if tape.consumed:
        raise TapeError("backward() called twice on the same tape")
    if loss.data.size != 1:
        raise ValueError(f"backward root must be a scalar, got shape {loss.shape}")
    tape.consumed = True
    grads = tape._grads
    seen = tape._seen
    grads[id(loss)] = np.ones_like(loss.data)
    seen[id(loss)] = loss
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for inp, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                seen[key] = inp
    for key, t in seen.items():
        if isinstance(t, Parameter):
            t.grad += grads[key]


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_nchw(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{op} expects an NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int):
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            yield i, j, xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of an NCHW input with an (out, in, kh, kw) kernel."""
    _check_nchw(x, "conv2d")
    w = weight.data
    if w.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-D, got shape {w.shape}")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ic}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1, dilation >= 1, padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output size {ho}x{wo} < 1")
    if bias is not None and bias.data.shape != (oc,):
        raise ValueError(f"conv2d bias must have shape ({oc},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((n, ic, kh, kw, ho, wo), dtype=np.result_type(x.data, w))
    for i, j, win in _windows(xp, kh, kw, ho, wo, stride, dilation):
        cols[:, :, i, j] = win
    cols = cols.reshape(n, ic * kh * kw, ho * wo)
    wmat = w.reshape(oc, ic * kh * kw)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = Tensor(out.reshape(n, oc, ho, wo))

    def _backward(g):
        g2 = g.reshape(n, oc, ho * wo)
        gw = np.einsum("nop,nkp->ok", g2, cols).reshape(w.shape)
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        gcols = np.matmul(wmat.T, g2).reshape(n, ic, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i, j, win in _windows(gxp, kh, kw, ho, wo, stride, dilation):
            win += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, (lambda g: _backward(g)[:2]) if bias is None else _backward)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False))
    return record(out, (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return record(Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties route gradient to the first max."""
    _check_nchw(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0])

    def _backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record(out, (x,), _backward)


def upsample_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(size*factor, size) linear interpolation matrix, half-pixel centres, edge clamp."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    out_size = size * factor
    pos = (np.arange(out_size) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, size - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = pos - lo
    m = np.zeros((out_size, size), dtype=dtype)
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    _check_nchw(x, "bilinear_upsample")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return record(Tensor(x.data.copy()), (x,), lambda g: (g,))
    _, _, h, w = x.shape
    uh = upsample_matrix(h, factor, x.dtype)
    uw = upsample_matrix(w, factor, x.dtype)
    out = Tensor(uh @ x.data @ uw.T)
    return record(out, (x,), lambda g: (uh.T @ g @ uw,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_nchw(a, "concat_channels")
    _check_nchw(b, "concat_channels")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(f"concat_channels mismatch: {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return record(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def total_sum(x: Tensor) -> Tensor:
    return record(Tensor(np.asarray(x.data.sum())), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def scale(x: Tensor, c: float) -> Tensor:
    return record(Tensor(x.data * c), (x,), lambda g: (g * c,))
