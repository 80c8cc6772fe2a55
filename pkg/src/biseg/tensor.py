"""Dense float tensors, differentiable primitives and the ``.ten`` file format.

Tensors are plain numpy arrays. Every primitive accumulates in float64 and
returns its result in the dtype of its first input, so training runs in
float32 while gradient checks can run end-to-end in float64. Backward passes
are hand-written, one function per op, and return gradients instead of
mutating anything.
"""
from __future__ import annotations

import struct
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

TEN_MAGIC = b"BTEN"
TEN_VERSION = 1
TEN_DTYPE_F32 = 1


class ShapeError(ValueError):
    """Raised when operand shapes disagree. No implicit broadcasting is done."""


class TensorFormatError(ValueError):
    """Raised for malformed ``.ten`` files."""


@dataclass
class Param:
    """A value together with a zero-initialised gradient buffer of equal shape."""

    value: Tensor
    grad: Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0


def _store(a: np.ndarray, like: np.ndarray) -> np.ndarray:
    dtype = like.dtype if np.issubdtype(like.dtype, np.floating) else np.float32
    return np.ascontiguousarray(a, dtype=dtype)


def _require_ndim(name: str, t: Tensor, ndim: int):
    if t.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dims, got shape {tuple(t.shape)}")


def require_same_shape(name: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        return 0
    return span // stride + 1


def _conv_check(x, w, b, stride, pad):
    _require_ndim("conv2d input", x, 3)
    _require_ndim("conv2d weight", w, 4)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d: pad must be >= 0, got {pad}")
    cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} != weight in-channels {wcin}")
    if b is not None and tuple(np.shape(b)) != (cout,):
        raise ShapeError(f"conv2d: bias length {np.shape(b)} != out-channels {cout}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho <= 0:
        raise ShapeError(f"conv2d: output height non-positive (H={h}, kh={kh}, pad={pad})")
    if wo <= 0:
        raise ShapeError(f"conv2d: output width non-positive (W={wd}, kw={kw}, pad={pad})")
    return ho, wo


def _im2col(x64: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int):
    cin = x64.shape[0]
    xp = np.pad(x64, ((0, 0), (pad, pad), (pad, pad))) if pad else x64
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # [Ho*Wo, Cin*kh*kw]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a [Cin,H,W] input with [Cout,Cin,kh,kw] filters."""
    ho, wo = _conv_check(x, w, b, stride, pad)
    cout, cin, kh, kw = w.shape
    cols = _im2col(np.asarray(x, np.float64), kh, kw, stride, pad, ho, wo)
    out = cols @ np.asarray(w, np.float64).reshape(cout, -1).T
    if b is not None:
        out += np.asarray(b, np.float64)
    return _store(out.T.reshape(cout, ho, wo), x)


def conv2d_backward(dout: Tensor, x: Tensor, w: Tensor, stride: int = 1, pad: int = 0):
    """Return ``(dx, dw, db)`` for :func:`conv2d`."""
    ho, wo = _conv_check(x, w, None, stride, pad)
    cout, cin, kh, kw = w.shape
    if dout.shape != (cout, ho, wo):
        raise ShapeError(f"conv2d_backward: dout shape {dout.shape} != {(cout, ho, wo)}")
    g = np.asarray(dout, np.float64).reshape(cout, ho * wo)
    cols = _im2col(np.asarray(x, np.float64), kh, kw, stride, pad, ho, wo)
    dw = (g @ cols).reshape(w.shape)
    db = g.sum(axis=1)
    dcols = (g.T @ np.asarray(w, np.float64).reshape(cout, -1)).reshape(ho, wo, cin, kh, kw)
    h, wd = x.shape[1:]
    dxp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                dcols[:, :, :, i, j].transpose(2, 0, 1)
            )
    dx = dxp[:, pad : pad + h, pad : pad + wd]
    return _store(dx, x), _store(dw, w), _store(db, w)


# --------------------------------------------------------------------------
# pointwise / channel ops
# --------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return _store(np.maximum(x, 0), x)


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    require_same_shape("relu_backward", dout, x)
    # subgradient at exactly 0 is 0
    return _store(np.where(x > 0, dout, 0), dout)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 0 of a [C,H,W] (or [C]) tensor, max-subtracted."""
    if x.ndim < 1 or x.shape[0] < 1:
        raise ShapeError(f"softmax_channels: need at least one channel, got {x.shape}")
    z = np.asarray(x, np.float64)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return _store(e / e.sum(axis=0, keepdims=True), x)


def softmax_channels_backward(dout: Tensor, y: Tensor) -> Tensor:
    """Gradient of softmax given its output ``y``."""
    require_same_shape("softmax_channels_backward", dout, y)
    g = np.asarray(dout, np.float64)
    p = np.asarray(y, np.float64)
    return _store(p * (g - (g * p).sum(axis=0, keepdims=True)), dout)


# --------------------------------------------------------------------------
# x2 bilinear upsampling, align-corners
# --------------------------------------------------------------------------

@lru_cache(maxsize=64)
def upsample_matrix(n: int) -> np.ndarray:
    """[2n, n] interpolation matrix; output i samples input coordinate i*(n-1)/(2n-1)."""
    m = _upsample_matrix(n)
    m.setflags(write=False)
    return m


def _upsample_matrix(n: int) -> np.ndarray:
    out = 2 * n
    m = np.zeros((out, n))
    if n == 1:
        m[:, 0] = 1.0
        return m
    scale = (n - 1) / (out - 1)
    for i in range(out):
        src = i * scale
        lo = min(int(np.floor(src)), n - 2)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, lo + 1] += frac
    return m


def upsample_x2(x: Tensor) -> Tensor:
    _require_ndim("upsample_x2 input", x, 3)
    _, h, w = x.shape
    uh, uw = upsample_matrix(h), upsample_matrix(w)
    out = uh @ np.asarray(x, np.float64) @ uw.T
    return _store(out, x)


def upsample_x2_backward(dout: Tensor) -> Tensor:
    _require_ndim("upsample_x2_backward dout", dout, 3)
    c, h2, w2 = dout.shape
    if h2 % 2 or w2 % 2:
        raise ShapeError(f"upsample_x2_backward: odd gradient size {dout.shape}")
    uh, uw = upsample_matrix(h2 // 2), upsample_matrix(w2 // 2)
    return _store(uh.T @ np.asarray(dout, np.float64) @ uw, dout)


# --------------------------------------------------------------------------
# .ten serialisation
# --------------------------------------------------------------------------

def save_tensor(path, t: Tensor) -> None:
    a = np.asarray(t)
    if a.ndim > 255:
        raise TensorFormatError(f"{path}: ndim {a.ndim} exceeds 255")
    for d in a.shape:
        if d > 0xFFFFFFFF:
            raise TensorFormatError(f"{path}: dimension {d} does not fit in u32")
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float32)
    payload = np.ascontiguousarray(a, dtype="<f4").tobytes()
    header = TEN_MAGIC + struct.pack("<IBB", TEN_VERSION, TEN_DTYPE_F32, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + payload)


def load_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != TEN_MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}, expected {TEN_MAGIC!r}")
    if len(raw) < 10:
        raise TensorFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    version, dtype, ndim = struct.unpack_from("<IBB", raw, 4)
    if version != TEN_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype != TEN_DTYPE_F32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
    off = 10
    if len(raw) < off + 4 * ndim:
        raise TensorFormatError(f"{path}: truncated header, {ndim} dims declared")
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    count = 1
    for d in shape:
        count *= d
    if count * 4 > (1 << 62):
        raise TensorFormatError(f"{path}: dimension overflow, shape {shape}")
    need = count * 4
    have = len(raw) - off
    if have < need:
        raise TensorFormatError(f"{path}: truncated payload, {have} of {need} bytes")
    if have > need:
        raise TensorFormatError(f"{path}: {have - need} trailing bytes after payload")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)
