"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tape`` records every primitive applied to ``Var`` values while it is
active; ``Tape.gradient`` replays the record in exact reverse order and
accumulates vector-Jacobian products. Outside an active tape the same
primitives run as plain numpy (inference mode, no graph kept).

The primitive set is exactly what the synthesis/discriminator stacks and the
projection loss need: elementwise arithmetic with broadcasting, matmul,
conv2d (stride 1 or 2, centered zero padding), 2x nearest upsample, 2x
average-pool downsample, leaky rectifier, softplus, reductions, reshape, and
a per-sample geometric transform used by the augmentation pipeline.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var", "Tape", "TapeUsageError", "ShapeError",
    "add", "sub", "mul", "neg", "matmul", "rsqrt", "square",
    "conv2d", "upsample2x", "avgpool2x", "leaky_relu", "softplus",
    "reduce_sum", "reduce_mean", "reshape", "batch_geom", "stop_gradient",
    "check_finite", "gradcheck",
]


class TapeUsageError(RuntimeError):
    """Raised when gradient is requested for values the tape never saw."""


class ShapeError(ValueError):
    """Raised when operand shapes do not match a primitive's contract."""


_active_tape: "Tape | None" = None


class Var:
    """A value in the computation: numpy array plus recorded parent edges."""

    __slots__ = ("value", "parents", "track")

    def __init__(self, value, track: bool = False):
        self.value = np.asarray(value)
        self.parents = ()  # tuple of (Var, vjp callable)
        self.track = track

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, track={self.track})"


class Tape:
    """Single-owner record of primitives, replayable in reverse for VJPs."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._index: dict[int, int] = {}

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise TapeUsageError("a tape is already recording; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = None
        return False

    def _record(self, out: Var):
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(out)

    def gradient(self, loss: Var, sources) -> list[np.ndarray]:
        """d(loss)/d(source) for each source, in the sources' dtypes.

        Accumulation walks the record strictly backwards with a fixed parent
        order, so two identical passes give bit-identical gradients.
        """
        if loss.value.size != 1:
            raise TapeUsageError("gradient target must be a scalar")
        if id(loss) not in self._index:
            raise TapeUsageError("loss was not computed under this tape")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.value)
        }
        for node in reversed(self.nodes[: self._index[id(loss)] + 1]):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                prev = grads.get(id(parent))
                if prev is None:
                    grads[id(parent)] = contrib
                else:
                    grads[id(parent)] = prev + contrib
            # keep leaf gradients addressable after the sweep
            if not node.parents:
                grads[id(node)] = g
        out = []
        for src in sources:
            g = grads.get(id(src))
            if g is None:
                g = np.zeros_like(src.value)
            out.append(g.astype(src.value.dtype, copy=False))
        return out


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _emit(value: np.ndarray, edges) -> Var:
    """Create the output Var; record parent edges only for tracked inputs."""
    tape = _active_tape
    out = Var(value)
    if tape is None:
        return out
    kept = tuple((p, fn) for p, fn in edges if p.track)
    out.parents = kept
    out.track = bool(kept)
    tape._record(out)
    return out


def leaf(value, track: bool = True) -> Var:
    """A leaf the tape will hand gradients to (parameters, loss inputs)."""
    v = Var(value, track=track)
    if _active_tape is not None:
        _active_tape._record(v)
    return v


def stop_gradient(x: Var) -> Var:
    return Var(np.asarray(x.value), track=False)


def check_finite(x: Var, what: str = "tensor") -> Var:
    if not np.all(np.isfinite(x.value)):
        raise FloatingPointError(f"{what} contains non-finite entries")
    return x


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    val = a.value + b.value
    return _emit(val, [
        (a, lambda g, s=a.value.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.value.shape: _unbroadcast(g, s)),
    ])


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    val = a.value - b.value
    return _emit(val, [
        (a, lambda g, s=a.value.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.value.shape: _unbroadcast(-g, s)),
    ])


def neg(a) -> Var:
    a = _as_var(a)
    return _emit(-a.value, [(a, lambda g: -g)])


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    val = a.value * b.value
    return _emit(val, [
        (a, lambda g, o=b.value, s=a.value.shape: _unbroadcast(g * o, s)),
        (b, lambda g, o=a.value, s=b.value.shape: _unbroadcast(g * o, s)),
    ])


def square(a) -> Var:
    a = _as_var(a)
    return mul(a, a)


def rsqrt(a) -> Var:
    a = _as_var(a)
    y = 1.0 / np.sqrt(a.value)
    return _emit(y.astype(a.value.dtype, copy=False),
                 [(a, lambda g, y=y: g * (-0.5) * y ** 3)])


def leaky_relu(a, slope: float = 0.2) -> Var:
    a = _as_var(a)
    dt = a.value.dtype
    mask = (a.value > 0).astype(dt) * dt.type(1.0 - slope) + dt.type(slope)
    return _emit(a.value * mask, [(a, lambda g, m=mask: g * m)])


def softplus(a) -> Var:
    a = _as_var(a)
    val = np.logaddexp(0.0, a.value).astype(a.value.dtype, copy=False)
    x = a.value
    sig = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)
    sig = sig.astype(x.dtype, copy=False)
    return _emit(val, [(a, lambda g, s=sig: g * s)])


# ---------------------------------------------------------------------------
# reductions and shape

def reduce_sum(a, axis=None, keepdims: bool = False) -> Var:
    a = _as_var(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g, shape=a.value.shape, axis=axis, keepdims=keepdims):
        if axis is None:
            return np.broadcast_to(g, shape).astype(g.dtype, copy=True)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, shape).astype(g.dtype, copy=True)

    return _emit(np.asarray(val), [(a, vjp)])


def reduce_mean(a, axis=None, keepdims: bool = False) -> Var:
    a = _as_var(a)
    total = a.value.size if axis is None else int(
        np.prod([a.value.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]))
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / total)


def reshape(a, shape) -> Var:
    a = _as_var(a)
    val = a.value.reshape(shape)
    return _emit(val, [(a, lambda g, s=a.value.shape: g.reshape(s))])


# ---------------------------------------------------------------------------
# linear layers

def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.value.shape} @ {b.value.shape}")
    val = a.value @ b.value
    return _emit(val, [
        (a, lambda g, o=b.value: g @ o.T),
        (b, lambda g, o=a.value: o.T @ g),
    ])


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, ph: int, pw: int):
    """Tap-wise conv: one channel GEMM per kernel offset on a padded,
    channel-major copy of the input. No im2col patch matrices."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    hp, wp = xp.shape[2], xp.shape[3]
    xp_cm = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(c, n * hp * wp)
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    out_cm = np.zeros((o, n, ho, wo), dtype=x.dtype)
    z = np.empty((o, n * hp * wp), dtype=x.dtype)
    taps = np.ascontiguousarray(w)  # (o, c, kh, kw)
    for dy in range(kh):
        for dx in range(kw):
            np.dot(taps[:, :, dy, dx], xp_cm, out=z)
            out_cm += z.reshape(o, n, hp, wp)[
                :, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
    out = np.ascontiguousarray(out_cm.transpose(1, 0, 2, 3))
    return out, xp, ho, wo


def _conv2d_grad_input(gy: np.ndarray, w: np.ndarray, stride: int,
                       in_h: int, in_w: int, ph: int, pw: int) -> np.ndarray:
    """Adjoint of the padded strided conv in its image argument."""
    n, o, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    hp, wp = in_h + 2 * ph, in_w + 2 * pw
    gy_cm = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
    gxp_cm = np.zeros((c, n, hp, wp), dtype=gy.dtype)
    u = np.empty((c, n * ho * wo), dtype=gy.dtype)
    taps = np.ascontiguousarray(w)
    for dy in range(kh):
        for dx in range(kw):
            np.dot(np.ascontiguousarray(taps[:, :, dy, dx].T), gy_cm, out=u)
            gxp_cm[:, :, dy:dy + stride * ho:stride,
                   dx:dx + stride * wo:stride] += u.reshape(c, n, ho, wo)
    crop = gxp_cm[:, :, ph:ph + in_h, pw:pw + in_w]
    return np.ascontiguousarray(crop.transpose(1, 0, 2, 3))


def _conv2d_grad_weight(gy: np.ndarray, xp: np.ndarray, stride: int,
                        kh: int, kw: int) -> np.ndarray:
    n, o, ho, wo = gy.shape
    c = xp.shape[1]
    gy_cm = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
    gw = np.empty((o, c, kh, kw), dtype=gy.dtype)
    xs_cm = np.empty((c, n * ho * wo), dtype=gy.dtype)
    for dy in range(kh):
        for dx in range(kw):
            xs = xp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
            xs_cm[:] = xs.transpose(1, 0, 2, 3).reshape(c, -1)
            gw[:, :, dy, dx] = gy_cm @ xs_cm.T
    return gw


def conv2d(x, w, stride: int = 1) -> Var:
    """2-D convolution, NCHW by OIHW, centered zero padding (same at stride 1).

    Output spatial size is ceil(H / stride) for odd kernels.
    """
    x, w = _as_var(x), _as_var(w)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW and OIHW, got {x.value.shape}, {w.value.shape}")
    if x.value.shape[1] != w.value.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.value.shape[1]}, kernel expects {w.value.shape[1]}")
    o, c, kh, kw = w.value.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d supports odd kernel extents only")
    ph, pw = kh // 2, kw // 2
    val, xp, ho, wo = _conv2d_raw(x.value, w.value, stride, ph, pw)
    n, _, h, wd = x.value.shape

    def vjp_x(g, wv=w.value, stride=stride, h=h, wd=wd, ph=ph, pw=pw):
        return _conv2d_grad_input(g, wv, stride, h, wd, ph, pw)

    def vjp_w(g, xp=xp, stride=stride, kh=kh, kw=kw):
        return _conv2d_grad_weight(g, xp, stride, kh, kw)

    return _emit(val, [(x, vjp_x), (w, vjp_w)])


def upsample2x(x) -> Var:
    """Nearest-neighbour 2x upsampling on NCHW."""
    x = _as_var(x)
    if x.value.ndim != 4:
        raise ShapeError(f"upsample2x expects NCHW, got {x.value.shape}")
    n, c, h, w = x.value.shape
    val = np.broadcast_to(x.value[:, :, :, None, :, None],
                          (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def vjp(g, n=n, c=c, h=h, w=w):
        return g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    return _emit(np.ascontiguousarray(val), [(x, vjp)])


def avgpool2x(x) -> Var:
    """2x2 average-pool downsampling on NCHW (extents must be even)."""
    x = _as_var(x)
    if x.value.ndim != 4:
        raise ShapeError(f"avgpool2x expects NCHW, got {x.value.shape}")
    n, c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x needs even extents, got {h}x{w}")
    val = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g, n=n, c=c, h=h, w=w):
        g = g[:, :, :, None, :, None] * 0.25
        return np.broadcast_to(g, (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w).copy()

    return _emit(val.astype(x.value.dtype, copy=False), [(x, vjp)])


# ---------------------------------------------------------------------------
# per-sample geometric transforms (augmentation support)

def _apply_geom(img: np.ndarray, flip: bool, rot: int, dx: int, dy: int) -> np.ndarray:
    out = img
    if flip:
        out = out[:, :, ::-1]
    if rot:
        out = np.rot90(out, k=rot, axes=(1, 2))
    if dx or dy:
        shifted = np.zeros_like(out)
        h, w = out.shape[1], out.shape[2]
        ys = slice(max(dy, 0), h + min(dy, 0))
        yd = slice(max(-dy, 0), h + min(-dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        xd = slice(max(-dx, 0), w + min(-dx, 0))
        shifted[:, yd, xd] = out[:, ys, xs]
        out = shifted
    return out


def batch_geom(x, specs) -> Var:
    """Apply per-sample (flip, rot90 k, shift dx, shift dy) to an NCHW batch.

    Shifts pad with zeros; the adjoint is the exact inverse transform.
    """
    x = _as_var(x)
    if len(specs) != x.value.shape[0]:
        raise ShapeError("one geometry spec per sample required")
    val = np.stack([
        _apply_geom(x.value[i], *specs[i]) for i in range(len(specs))
    ])

    def vjp(g, specs=tuple(specs)):
        outs = []
        for i, (flip, rot, dx, dy) in enumerate(specs):
            gi = _apply_geom(g[i], False, 0, -dx, -dy)
            if rot:
                gi = np.rot90(gi, k=-rot, axes=(1, 2))
            if flip:
                gi = gi[:, :, ::-1]
            outs.append(gi)
        return np.stack(outs)

    return _emit(val, [(x, vjp)])


# ---------------------------------------------------------------------------
# finite-difference oracle

def gradcheck(fn, args, step: float = 1e-3, rtol: float = 1e-4,
              atol: float = 1e-6) -> float:
    """Compare tape gradients of scalar fn(*vars) against central differences.

    Runs in float64 and returns the worst relative mismatch. The oracle never
    consults the tape: it re-evaluates fn at perturbed inputs, so it stays
    independent of the code path it checks.
    """
    vars_ = [Var(np.array(a, dtype=np.float64), track=True) for a in args]
    with Tape() as tape:
        for v in vars_:
            tape._record(v)
        out = fn(*vars_)
        grads = tape.gradient(out, vars_)

    worst = 0.0
    for k, base in enumerate(vars_):
        flat = base.value.ravel()
        num = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(fn(*vars_).value)
            flat[j] = orig - step
            lo = float(fn(*vars_).value)
            flat[j] = orig
            num[j] = (hi - lo) / (2 * step)
        num = num.reshape(base.value.shape)
        scale = np.maximum(np.maximum(np.abs(num), np.abs(grads[k])), atol / rtol)
        err = np.abs(grads[k] - num) / scale
        if err.size:
            worst = max(worst, float(err.max()))
        if not np.allclose(grads[k], num, rtol=rtol, atol=atol):
            raise AssertionError(
                f"gradient mismatch on arg {k}: max rel err {err.max():.3e}")
    return worst
