"""Dense float32 numeric kernel with reverse-mode gradients.

Values are stored as float32; reductions (dot products, softmax sums,
mean/variance) accumulate in float64 before rounding back. No operation
mutates its inputs. Every differentiable operation carries a backward
rule: when any argument is a Node created from a GradTape, the result is
a Node and the adjoint step is recorded on that tape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, DimensionError

_SQRT_2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """A value recorded on a GradTape during a forward pass."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: np.ndarray, tape: "GradTape"):
        self.value = value
        self.grad = None  # float64, allocated on first contribution
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def add_grad(self, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match value shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros(self.value.shape, dtype=np.float64)
        self.grad += g


class GradTape:
    """Wengert list of adjoint steps, replayed once in reverse order.

    One tape per forward pass; a tape must not be shared across threads
    or replayed twice.
    """

    def __init__(self):
        self._records = []  # (output Node, backward fn taking the output adjoint)
        self._spent = False

    def leaf(self, value) -> Node:
        """Wrap a parameter so downstream operations record gradients for it."""
        return Node(as_f32(value), self)

    def _record(self, node: Node, backward) -> None:
        self._records.append((node, backward))

    def backward(self, loss: Node) -> None:
        """Seed d(loss)/d(loss)=1 and replay all adjoint rules in reverse.

        After the call every leaf reachable from the loss holds its
        gradient in `.grad` (float64); unreachable leaves keep None.
        """
        if self._spent:
            raise ContractError("tape already replayed; record a fresh forward pass")
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if loss.value.ndim != 0:
            raise ContractError(f"loss must be a scalar, got shape {loss.value.shape}")
        self._spent = True
        loss.grad = np.ones((), dtype=np.float64)
        for node, backward in reversed(self._records):
            if node.grad is not None:
                backward(node.grad)


def value_of(x) -> np.ndarray:
    """Underlying float32 array of a Node or plain array-like."""
    return x.value if isinstance(x, Node) else as_f32(x)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ContractError("operands were recorded on different tapes")
    return tape


def _emit(tape, out_value, backward):
    node = Node(out_value, tape)
    tape._record(node, backward)
    return node


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# contract operations
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product c[i][j] = sum_t a[i][t]*b[t][j] with float64 accumulation."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {av.shape} vs {bv.shape}")
    a64, b64 = _f64(av), _f64(bv)
    out = (a64 @ b64).astype(np.float32)
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def backward(g):
        if isinstance(a, Node):
            a.add_grad(g @ b64.T)
        if isinstance(b, Node):
            b.add_grad(a64.T @ g)

    return _emit(tape, out, backward)


def softmax(x):
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    xv = value_of(x)
    if xv.size == 0:
        raise DimensionError("softmax needs at least one entry")
    z = _f64(xv)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out64 = e / e.sum(axis=-1, keepdims=True)
    out = out64.astype(np.float32)
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        inner = (g * out64).sum(axis=-1, keepdims=True)
        x.add_grad(out64 * (g - inner))

    return _emit(tape, out, backward)


def masked_softmax(scores, mask):
    """Softmax restricted to positions where mask is nonzero.

    Masked positions are exactly zero in the output; each row of the mask
    must select at least one position. The mask is treated as a constant:
    no gradient flows into it.
    """
    sv = value_of(scores)
    mv = value_of(mask)
    if sv.shape != mv.shape:
        raise DimensionError(f"scores shape {sv.shape} does not match mask shape {mv.shape}")
    keep = mv > 0
    if not keep.reshape(-1, keep.shape[-1]).any(axis=-1).all():
        raise DegenerateInputError("mask selects no entries in at least one row")
    z = _f64(sv)
    top = np.where(keep, z, -np.inf).max(axis=-1, keepdims=True)
    e = np.exp(np.where(keep, z - top, -np.inf))
    out64 = e / e.sum(axis=-1, keepdims=True)
    out = out64.astype(np.float32)
    tape = _tape_of(scores)
    if tape is None:
        return out

    def backward(g):
        inner = (g * out64).sum(axis=-1, keepdims=True)
        scores.add_grad(out64 * (g - inner))

    return _emit(tape, out, backward)


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    """Normalise the last axis to zero mean / unit variance (population), then scale+shift."""
    xv, gv, bv = value_of(x), value_of(gamma), value_of(beta)
    d = xv.shape[-1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise DimensionError(
            f"layer_norm parameters {gv.shape}/{bv.shape} do not match feature size {d}"
        )
    z = _f64(xv)
    mu = z.mean(axis=-1, keepdims=True)
    centred = z - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    g64, b64 = _f64(gv), _f64(bv)
    out = (xhat * g64 + b64).astype(np.float32)
    tape = _tape_of(x, gamma, beta)
    if tape is None:
        return out

    lead = tuple(range(xv.ndim - 1))

    def backward(g):
        if isinstance(x, Node):
            gg = g * g64
            x.add_grad(inv * (gg - gg.mean(axis=-1, keepdims=True)
                              - xhat * (gg * xhat).mean(axis=-1, keepdims=True)))
        if isinstance(gamma, Node):
            gamma.add_grad((g * xhat).sum(axis=lead) if lead else g * xhat)
        if isinstance(beta, Node):
            beta.add_grad(g.sum(axis=lead) if lead else g)

    return _emit(tape, out, backward)


def gelu(x):
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    xv = value_of(x)
    z = _f64(xv)
    cdf = 0.5 * (1.0 + erf(z / _SQRT_2))
    out = (z * cdf).astype(np.float32)
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        x.add_grad(g * (cdf + z * pdf))

    return _emit(tape, out, backward)


def bilinear_resize(m, out_h: int, out_w: int):
    """Resample a matrix with half-pixel-centre bilinear interpolation.

    The source coordinate of output (i, j) is
    ((i+0.5)*h/out_h - 0.5, (j+0.5)*w/out_w - 0.5), clamped to the valid
    range, then blended from the 4 surrounding samples.
    """
    mv = value_of(m)
    if mv.ndim != 2:
        raise DimensionError(f"bilinear_resize expects a matrix, got shape {mv.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output extents must be positive, got {out_h}x{out_w}")
    h, w = mv.shape
    si = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    sj = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    i0 = np.floor(si).astype(np.int64)
    j0 = np.floor(sj).astype(np.int64)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fi = (si - i0)[:, None]
    fj = (sj - j0)[None, :]
    w00 = (1.0 - fi) * (1.0 - fj)
    w01 = (1.0 - fi) * fj
    w10 = fi * (1.0 - fj)
    w11 = fi * fj
    z = _f64(mv)
    out64 = (w00 * z[np.ix_(i0, j0)] + w01 * z[np.ix_(i0, j1)]
             + w10 * z[np.ix_(i1, j0)] + w11 * z[np.ix_(i1, j1)])
    out = out64.astype(np.float32)
    tape = _tape_of(m)
    if tape is None:
        return out

    def backward(g):
        gm = np.zeros((h, w), dtype=np.float64)
        ii0 = np.broadcast_to(i0[:, None], g.shape)
        ii1 = np.broadcast_to(i1[:, None], g.shape)
        jj0 = np.broadcast_to(j0[None, :], g.shape)
        jj1 = np.broadcast_to(j1[None, :], g.shape)
        np.add.at(gm, (ii0, jj0), g * w00)
        np.add.at(gm, (ii0, jj1), g * w01)
        np.add.at(gm, (ii1, jj0), g * w10)
        np.add.at(gm, (ii1, jj1), g * w11)
        m.add_grad(gm)

    return _emit(tape, out, backward)


def finite_diff_grad(f, x, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    The divisor is the realised float32 step (x+h) - (x-h), which equals 2h
    up to storage rounding and keeps linear functions exact.
    """
    xv = as_f32(x).copy()
    grad = np.zeros(xv.shape, dtype=np.float64)
    for idx in np.ndindex(xv.shape):
        orig = xv[idx]
        xv[idx] = orig + np.float32(h)
        hi = float(f(xv))
        up = float(xv[idx])
        xv[idx] = orig - np.float32(h)
        lo = float(f(xv))
        down = float(xv[idx])
        xv[idx] = orig
        grad[idx] = (hi - lo) / (up - down)
    return grad.astype(np.float32)


# ---------------------------------------------------------------------------
# supporting operations (shape plumbing and reductions, all differentiable)
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out64 = _f64(av) + _f64(bv)
    out = out64.astype(np.float32)
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def backward(g):
        if isinstance(a, Node):
            a.add_grad(_unbroadcast(g, av.shape))
        if isinstance(b, Node):
            b.add_grad(_unbroadcast(g, bv.shape))

    return _emit(tape, out, backward)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    a64, b64 = _f64(av), _f64(bv)
    out = (a64 * b64).astype(np.float32)
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def backward(g):
        if isinstance(a, Node):
            a.add_grad(_unbroadcast(g * b64, av.shape))
        if isinstance(b, Node):
            b.add_grad(_unbroadcast(g * a64, bv.shape))

    return _emit(tape, out, backward)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    a64, b64 = _f64(av), _f64(bv)
    out = (a64 / b64).astype(np.float32)
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def backward(g):
        if isinstance(a, Node):
            a.add_grad(_unbroadcast(g / b64, av.shape))
        if isinstance(b, Node):
            b.add_grad(_unbroadcast(-g * a64 / (b64 * b64), bv.shape))

    return _emit(tape, out, backward)


def scale(x, c: float):
    xv = value_of(x)
    out = (_f64(xv) * float(c)).astype(np.float32)
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        x.add_grad(g * float(c))

    return _emit(tape, out, backward)


def neg(x):
    return scale(x, -1.0)


def transpose(x):
    xv = value_of(x)
    if xv.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {xv.shape}")
    out = np.ascontiguousarray(xv.T)
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        x.add_grad(g.T)

    return _emit(tape, out, backward)


def reshape(x, shape):
    xv = value_of(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != xv.size:
        raise DimensionError(f"cannot reshape {xv.shape} into {shape}")
    out = xv.reshape(shape).copy()
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        x.add_grad(g.reshape(xv.shape))

    return _emit(tape, out, backward)


def concat(parts, axis: int = 0):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    offsets = np.cumsum([0] + [v.shape[axis] for v in values])

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Node):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                part.add_grad(g[tuple(index)])

    return _emit(tape, out, backward)


def crop(x, starts, sizes):
    """Contiguous sub-block x[s0:s0+n0, s1:s1+n1, ...] as a fresh array."""
    xv = value_of(x)
    if len(starts) != xv.ndim or len(sizes) != xv.ndim:
        raise DimensionError(f"crop bounds rank {len(starts)} does not match shape {xv.shape}")
    for s, n, extent in zip(starts, sizes, xv.shape):
        if s < 0 or n < 1 or s + n > extent:
            raise DimensionError(f"crop {starts}+{sizes} exceeds shape {xv.shape}")
    index = tuple(slice(s, s + n) for s, n in zip(starts, sizes))
    out = xv[index].copy()
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        gx = np.zeros(xv.shape, dtype=np.float64)
        gx[index] = g
        x.add_grad(gx)

    return _emit(tape, out, backward)


def reduce_sum(x, axis=None):
    """Sum over the given axes (all axes when None), float64 accumulation."""
    xv = value_of(x)
    out64 = _f64(xv).sum(axis=axis)
    out = np.asarray(out64, dtype=np.float32)
    tape = _tape_of(x)
    if tape is None:
        return out
    if axis is None:
        axes = tuple(range(xv.ndim))
    elif isinstance(axis, int):
        axes = (axis % xv.ndim,)
    else:
        axes = tuple(a % xv.ndim for a in axis)

    def backward(g):
        expanded = np.asarray(g, dtype=np.float64)
        for a in sorted(axes):
            expanded = np.expand_dims(expanded, a)
        x.add_grad(np.broadcast_to(expanded, xv.shape))

    return _emit(tape, out, backward)


def log(x):
    """Natural logarithm; caller guarantees positive inputs."""
    xv = value_of(x)
    z = _f64(xv)
    out = np.log(z).astype(np.float32)
    tape = _tape_of(x)
    if tape is None:
        return out

    def backward(g):
        x.add_grad(g / z)

    return _emit(tape, out, backward)


def clip_min(x, lo: float):
    """Elementwise max(x, lo); the clipped region gets zero gradient."""
    xv = value_of(x)
    z = _f64(xv)
    out = np.maximum(z, float(lo)).astype(np.float32)
    tape = _tape_of(x)
    if tape is None:
        return out
    mask = z > float(lo)

    def backward(g):
        x.add_grad(g * mask)

    return _emit(tape, out, backward)


def conv2d3x3(x, kernel, bias):
    """3x3 convolution with zero padding 1 and stride 1.

    x: (H, W, C); kernel: (K, C, 3, 3); bias: (K,). Returns (K, H, W).
    """
    xv, kv, bv = value_of(x), value_of(kernel), value_of(bias)
    if xv.ndim != 3:
        raise DimensionError(f"conv input must be (H, W, C), got {xv.shape}")
    h, w, c = xv.shape
    if kv.ndim != 4 or kv.shape[1:] != (c, 3, 3):
        raise DimensionError(f"kernel shape {kv.shape} does not match input channels {c}")
    k = kv.shape[0]
    if bv.shape != (k,):
        raise DimensionError(f"bias shape {bv.shape} does not match {k} output channels")
    x64, k64, b64 = _f64(xv), _f64(kv), _f64(bv)
    xp = np.zeros((h + 2, w + 2, c), dtype=np.float64)
    xp[1:-1, 1:-1] = x64
    out64 = np.zeros((k, h, w), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            out64 += np.einsum("ijc,kc->kij", xp[di:di + h, dj:dj + w], k64[:, :, di, dj])
    out64 += b64[:, None, None]
    out = out64.astype(np.float32)
    tape = _tape_of(x, kernel, bias)
    if tape is None:
        return out

    def backward(g):
        if isinstance(kernel, Node):
            gk = np.zeros((k, c, 3, 3), dtype=np.float64)
            for di in range(3):
                for dj in range(3):
                    gk[:, :, di, dj] = np.einsum("kij,ijc->kc", g, xp[di:di + h, dj:dj + w])
            kernel.add_grad(gk)
        if isinstance(x, Node):
            gxp = np.zeros((h + 2, w + 2, c), dtype=np.float64)
            for di in range(3):
                for dj in range(3):
                    gxp[di:di + h, dj:dj + w] += np.einsum("kij,kc->ijc", g, k64[:, :, di, dj])
            x.add_grad(gxp[1:-1, 1:-1])
        if isinstance(bias, Node):
            bias.add_grad(g.sum(axis=(1, 2)))

    return _emit(tape, out, backward)
