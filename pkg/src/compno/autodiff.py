"""A small reverse-mode differentiation engine over numpy arrays.

Only the primitives needed by Fourier neural operators, the aggregator and the
physics loss are provided. Tensors carry ``[batch, channel, y, x]`` arrays (or
scalars for reductions); there is no general broadcasting.

Complex tensors use the convention ``grad = dL/dRe + 1j * dL/dIm`` for a real
loss ``L``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import scipy.fft as sfft

from . import binio

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "scalar_mul",
    "mul",
    "channel_linear",
    "gelu",
    "concat_channels",
    "slice_channels",
    "tsum",
    "mean_abs",
    "mean_square",
    "rfft2",
    "irfft2",
    "spectral_multiply",
    "stencil_apply",
    "STENCILS",
    "backward",
    "AdamState",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward_fn=None, op: str = "leaf"):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(value, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward_fn, op)
    return Tensor(value, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def scalar_mul(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _node(a.value * s, (a,), lambda g: (g * s,), "scalar_mul")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * np.conj(bv), g * np.conj(av)), "mul")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU, ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = as_tensor(x)
    v = x.value
    v2 = v * v  # v**3 would take the slow generic pow path
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def back(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * d,)

    return _node(out, (x,), back, "gelu")


# -- channel ops ---------------------------------------------------------------------

def channel_linear(x, weight, bias=None) -> Tensor:
    """Pointwise channel mixing: ``y[b, o] = sum_i W[o, i] x[b, i] + bias[o]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.value.ndim != 4:
        raise ValueError(f"channel_linear expects [B, C, H, W], got {x.shape}")
    B, C, H, W = x.shape
    if weight.value.ndim != 2 or weight.shape[1] != C:
        raise ValueError(f"channel_linear: weight {weight.shape} does not take {C} channels")
    O = weight.shape[0]
    xf = x.value.reshape(B, C, H * W)
    y = np.matmul(weight.value, xf)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ValueError(f"channel_linear: bias shape {bias.shape} != ({O},)")
        y += bias.value[None, :, None]
        parents = parents + (bias,)

    def back(g):
        gf = g.reshape(B, O, H * W)
        gx = np.matmul(weight.value.T, gf).reshape(B, C, H, W) if x.requires_grad else None
        gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = gf.sum(axis=(0, 2)) if bias.requires_grad else None
        return gx, gw, gb

    return _node(y.reshape(B, O, H, W), parents, back, "channel_linear")


def concat_channels(xs: Iterable) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if len(x.shape) != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[1] for x in xs]
    edges = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(xs)))

    return _node(np.concatenate([x.value for x in xs], axis=1), tuple(xs), back, "concat_channels")


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    C = x.shape[1]
    if not 0 <= start < stop <= C:
        raise ValueError(f"slice_channels: [{start}, {stop}) outside {C} channels")

    def back(g):
        out = np.zeros_like(x.value, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return _node(x.value[:, start:stop], (x,), back, "slice_channels")


# -- reductions ----------------------------------------------------------------------

def tsum(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.asarray(x.value.sum()), (x,), lambda g: (np.full_like(x.value, g),), "sum")


def mean_abs(x) -> Tensor:
    """Mean absolute value; the subgradient at 0 is 0."""
    x = as_tensor(x)
    n = x.value.size

    def back(g):
        return (np.sign(x.value) * (g / n),)

    return _node(np.asarray(np.abs(x.value).mean()), (x,), back, "mean_abs")


def mean_square(x) -> Tensor:
    x = as_tensor(x)
    n = x.value.size
    return _node(np.asarray((x.value**2).mean()), (x,), lambda g: (x.value * (2 * g / n),), "mean_square")


# -- spectral ------------------------------------------------------------------------

def rfft2(x) -> Tensor:
    """Real-to-half-complex FFT over the two spatial axes (unnormalised forward)."""
    x = as_tensor(x)
    H, W = x.shape[-2:]

    def back(g):
        full = np.zeros(g.shape[:-1] + (W,), dtype=g.dtype)
        full[..., : g.shape[-1]] = g
        return (np.real(sfft.ifft2(full, axes=(-2, -1))) * (H * W),)

    return _node(sfft.rfft2(x.value, axes=(-2, -1)), (x,), back, "rfft2")


def irfft2(X, shape: tuple[int, int]) -> Tensor:
    X = as_tensor(X)
    H, W = shape
    if X.shape[-2] != H or X.shape[-1] != W // 2 + 1:
        raise ValueError(f"irfft2: spectrum {X.shape} does not match spatial shape {shape}")
    weight = np.full(W // 2 + 1, 2.0)
    weight[0] = 1.0
    if W % 2 == 0:
        weight[-1] = 1.0

    def back(g):
        return (sfft.rfft2(g, axes=(-2, -1)) * (weight / (H * W)).astype(g.dtype),)

    return _node(sfft.irfft2(X.value, s=shape, axes=(-2, -1)), (X,), back, "irfft2")


def spectral_modes(H: int, W: int, kmax: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the retained modes on the rfft2 layout."""
    if kmax < 1 or kmax > H // 2 or kmax > W // 2:
        raise ValueError(f"kmax={kmax} exceeds half the grid ({H}x{W})")
    rows = np.concatenate([np.arange(kmax), np.arange(H - kmax, H)])
    return rows, np.arange(kmax)


_COMPLEX = {np.dtype("f4"): np.complex64, np.dtype("f8"): np.complex128}


def _as_complex(w: np.ndarray) -> np.ndarray:
    """View trailing (re, im) pairs as complex numbers, without copying when possible."""
    w = np.ascontiguousarray(w)
    if w.dtype not in _COMPLEX:
        w = w.astype(float)
    return w.view(_COMPLEX[w.dtype])[..., 0]


def spectral_multiply(X, weight, kmax: int) -> Tensor:
    """Per-mode complex channel contraction on the retained low modes.

    ``X`` is a half spectrum ``[B, Cin, H, W//2+1]``; ``weight`` is real with
    shape ``[2*kmax, kmax, Cin, Cout, 2]`` holding interleaved (re, im) pairs.
    Rows ``0..kmax-1`` and ``H-kmax..H-1`` and columns ``0..kmax-1`` are kept;
    every other output mode is zero.
    """
    X, weight = as_tensor(X), as_tensor(weight)
    B, Cin, H, Wh = X.shape
    W = 2 * (Wh - 1)
    rows, cols = spectral_modes(H, W, kmax)
    wv = weight.value
    if wv.shape[:3] != (2 * kmax, kmax, Cin) or wv.ndim != 5 or wv.shape[-1] != 2:
        raise ValueError(f"spectral_multiply: weight {wv.shape} does not match kmax={kmax}, Cin={Cin}")
    Cout = wv.shape[3]
    M = 2 * kmax * kmax
    wc = _as_complex(wv).reshape(M, Cin, Cout)
    xm = X.value[:, :, rows][:, :, :, cols]  # [B, Cin, 2k, k]
    xm = xm.transpose(2, 3, 0, 1).reshape(M, B, Cin)
    ym = np.matmul(xm, wc).reshape(2 * kmax, kmax, B, Cout).transpose(2, 3, 0, 1)
    out = np.zeros((B, Cout, H, Wh), dtype=ym.dtype)
    out[:, :, rows[:, None], cols[None, :]] = ym

    def back(g):
        gm = g[:, :, rows][:, :, :, cols].transpose(2, 3, 0, 1).reshape(M, B, Cout)
        gX = None
        if X.requires_grad:
            gxm = np.matmul(gm, np.conj(wc).transpose(0, 2, 1))
            gxm = gxm.reshape(2 * kmax, kmax, B, Cin).transpose(2, 3, 0, 1)
            gX = np.zeros(X.shape, dtype=gxm.dtype)
            gX[:, :, rows[:, None], cols[None, :]] = gxm
        gW = None
        if weight.requires_grad:
            gwc = np.matmul(np.conj(xm).transpose(0, 2, 1), gm).reshape(2 * kmax, kmax, Cin, Cout)
            gW = np.ascontiguousarray(gwc, dtype=_COMPLEX[wv.dtype]).view(wv.dtype).reshape(wv.shape)
        return gX, gW

    return _node(out, (X, weight), back, "spectral_multiply")


# -- fixed periodic stencils -----------------------------------------------------------

def _stencil_table(kind: str, dx: float, dy: float) -> dict[tuple[int, int], float]:
    if kind == "dx":
        return {(0, 1): 0.5 / dx, (0, -1): -0.5 / dx}
    if kind == "dy":
        return {(1, 0): 0.5 / dy, (-1, 0): -0.5 / dy}
    if kind == "lap":
        return {(0, 0): -2 / dx**2 - 2 / dy**2, (0, 1): 1 / dx**2, (0, -1): 1 / dx**2,
                (1, 0): 1 / dy**2, (-1, 0): 1 / dy**2}
    if kind == "lap_wide":
        return {(0, 0): -0.5 / dx**2 - 0.5 / dy**2, (0, 2): 0.25 / dx**2, (0, -2): 0.25 / dx**2,
                (2, 0): 0.25 / dy**2, (-2, 0): 0.25 / dy**2}
    raise ValueError(f"unknown stencil {kind!r}")


STENCILS = ("dx", "dy", "lap", "lap_wide")


def _apply(a, table, sign):
    out = np.zeros_like(a)
    for (sy, sx), c in table.items():
        out += c * np.roll(a, (-sign * sy, -sign * sx), axis=(-2, -1))
    return out


def stencil_apply(x, kind: str, dx: float, dy: float) -> Tensor:
    """Apply a constant periodic stencil (central d/dx, d/dy, or a Laplacian)."""
    x = as_tensor(x)
    table = _stencil_table(kind, dx, dy)
    return _node(_apply(x.value, table, 1), (x,), lambda g: (_apply(g, table, -1),), f"stencil_{kind}")


# -- backward pass ---------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | Mapping[str, Tensor] | None = None):
    """Reverse sweep from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every ``requires_grad`` leaf
    reached; the ``.grad`` of leaves listed in ``params`` is reset first. Leaves in
    ``params`` that the loss does not depend on get a zero gradient. Returns a
    dict keyed like ``params`` (or by leaf tensor when ``params`` is None).
    """
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from every trainable tensor")
    if params is not None:
        for t in (params.values() if isinstance(params, Mapping) else params):
            t.grad = None
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            if not np.iscomplexobj(p.value) and np.iscomplexobj(gp):
                gp = gp.real
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    if params is None:
        return {leaf: leaf.grad for leaf in leaves}
    items = params.items() if isinstance(params, Mapping) else enumerate(params)
    out = {}
    for k, t in items:
        if t.grad is None:
            t.grad = np.zeros_like(t.value)
        out[k] = t.grad
    return out


# -- optimiser -------------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update applied in place to ``params``.

    Returns ``(params, state, skipped)``. A non-finite gradient skips the whole
    step (parameters and moments untouched) and sets ``skipped``.
    """
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.value.shape:
            raise ValueError(f"gradient for {k!r} has shape {g.shape}, parameter {p.value.shape}")
    if not all(np.all(np.isfinite(grads[k])) for k in params):
        state.skipped += 1
        return params, state, True
    state.t += 1
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    step = lr / c1
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.value)
            state.v[k] = np.zeros_like(p.value)
        v = state.v[k]
        tmp = np.empty_like(p.value)
        # in-place passes: these arrays can hold tens of millions of weights
        m *= beta1
        np.multiply(g, 1 - beta1, out=tmp)
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1 - beta2
        v *= beta2
        v += tmp
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p.value -= tmp
    return params, state, False


# -- checkpoints -----------------------------------------------------------------------

CKPT_MAGIC = b"CNOW"
CKPT_VERSION = 1
_DTYPES = {0: "f8", 1: "f4", 2: "u1"}
_CODES = {np.dtype("f8"): 0, np.dtype("f4"): 1, np.dtype("u1"): 2}
META_KEY = "__meta__"


def checkpoint_bytes(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = dict(tensors)
    if meta is not None:
        entries[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    parts = [CKPT_MAGIC, binio.pack("II", CKPT_VERSION, len(entries))]
    for name in sorted(entries):
        a = np.asarray(entries[name])
        code = _CODES.get(a.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {a.dtype} for {name!r}")
        raw = name.encode()
        parts.append(binio.pack("I", len(raw)) + raw)
        parts.append(binio.pack("BI", code, a.ndim) + binio.pack("I" * a.ndim, *a.shape))
        parts.append(binio.array_bytes(a, _DTYPES[code]))
    return b"".join(parts)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None):
    Path(path).write_bytes(checkpoint_bytes(tensors, meta))


def parse_checkpoint(buf: bytes):
    r = binio.Reader(buf)
    r.expect_magic(CKPT_MAGIC)
    version = r.u32()
    if version != CKPT_VERSION:
        raise binio.VersionError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    n = r.u32()
    tensors, meta = {}, None
    for _ in range(n):
        name = bytes(r.take(r.u32())).decode()
        code, ndim = r.unpack("BI")
        if code not in _DTYPES:
            raise binio.FormatError(f"unknown dtype code {code}")
        dims = r.unpack("I" * ndim) if ndim else ()
        a = r.array(_DTYPES[code], tuple(dims))
        if name == META_KEY:
            meta = json.loads(a.tobytes().decode())
        else:
            tensors[name] = a
    if r.remaining:
        raise binio.FormatError(f"{r.remaining} trailing bytes after checkpoint table")
    return tensors, meta


def load_checkpoint(path):
    """Return ``(tensors, meta)`` from a ``CNOW`` file."""
    return parse_checkpoint(Path(path).read_bytes())
