"""Dense tensors with reverse-mode autodiff, plus the small numeric helpers
(min-max scaling, cosine similarity, blob serialization, seeded RNG) the rest
of the package is built on.

Everything is backed by numpy arrays in either float32 (training default) or
float64 (verification mode). Gradients are analytic per op; the test suite
checks every one of them against central finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

FLOAT_DTYPES = {"float32": np.float32, "float64": np.float64}

_default_dtype = np.float32

LN_EPS_32 = 1e-6
LN_EPS_64 = 1e-12


def set_default_dtype(name: str) -> None:
    """Switch global precision ("float32" or "float64")."""
    global _default_dtype
    if name not in FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {name!r}")
    _default_dtype = FLOAT_DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def default_eps() -> float:
    """Denominator guard matched to the active precision."""
    return LN_EPS_64 if _default_dtype == np.float64 else LN_EPS_32


class Rng:
    """Seeded random stream (PCG64). Same seed, same key -> bit-identical
    samples across runs and platforms."""

    algorithm = "pcg64"

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((self.seed,) + self._key))
        )

    def child(self, *key: int) -> "Rng":
        """Independent deterministic substream identified by integer key."""
        return Rng(self.seed, self._key + tuple(key))

    def normal(self, shape, scale=1.0):
        return (self.gen.standard_normal(shape) * scale).astype(_default_dtype)

    def uniform(self, shape, low=0.0, high=1.0):
        return self.gen.uniform(low, high, shape).astype(_default_dtype)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int):
        return self.gen.permutation(n)

    def random(self, shape=None):
        return self.gen.random(shape)

    def beta(self, a: float, b: float) -> float:
        return float(self.gen.beta(a, b))


class Tensor:
    """A node in the autodiff tape: numpy payload plus backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self, grad=None) -> None:
        """Reverse sweep from this node in fixed topological order."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; the real work lives in the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: Rng | None = None, shape=None, scale=None) -> Tensor:
    """Trainable leaf. With rng/shape, draws scaled gaussian init."""
    if data is None:
        if scale is None:
            scale = 1.0 / np.sqrt(shape[-1] if len(shape) else 1)
        data = rng.normal(shape, scale)
    return Tensor(np.asarray(data, dtype=_default_dtype), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad back down to a broadcast operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched on leading dims. dA = dC.B^T, dB = A^T.dC."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor(out_data, _parents=(a,), _backward=backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Row gather; backward scatter-adds into the source."""
    idx = np.asarray(indices)
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(np.moveaxis(acc, axis, 0), idx, np.moveaxis(g, axis, 0))
            a._accumulate(acc)

    return Tensor(out_data, _parents=(a,), _backward=backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor(out_data, _parents=tuple(tensors), _backward=backward)


def scatter_rows(values: Tensor, indices, n_rows: int) -> Tensor:
    """Inverse of take along axis 0: rows land at `indices` in a zero tensor
    of n_rows rows (duplicate indices accumulate)."""
    idx = np.asarray(indices)
    out_data = np.zeros((n_rows,) + values.shape[1:], dtype=values.data.dtype)
    np.add.at(out_data, idx, values.data)

    def backward(g):
        if values.requires_grad:
            values._accumulate(g[idx])

    return Tensor(out_data, _parents=(values,), _backward=backward)


def gather_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """Pick entries along the last axis; indices shape = a.shape[:-1] + (k,)."""
    idx = np.asarray(indices)
    out_data = np.take_along_axis(a.data, idx, axis=-1)

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data).reshape(-1, a.shape[-1])
            flat_idx = idx.reshape(-1, idx.shape[-1])
            rows = np.arange(flat_idx.shape[0])[:, None]
            np.add.at(acc, (rows, flat_idx), g.reshape(flat_idx.shape))
            a._accumulate(acc.reshape(a.shape))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def scatter_last(values: Tensor, indices: np.ndarray, size: int) -> Tensor:
    """Inverse of gather_last: place values at `indices` along a new last axis
    of extent `size` (duplicates accumulate)."""
    idx = np.asarray(indices)
    flat_idx = idx.reshape(-1, idx.shape[-1])
    rows = np.arange(flat_idx.shape[0])[:, None]
    out_data = np.zeros(values.shape[:-1] + (size,), dtype=values.data.dtype)
    np.add.at(out_data.reshape(-1, size), (rows, flat_idx), values.data.reshape(flat_idx.shape))

    def backward(g):
        if values.requires_grad:
            values._accumulate(
                np.take_along_axis(g.reshape(-1, size), flat_idx, axis=-1).reshape(values.shape))

    return Tensor(out_data, _parents=(values,), _backward=backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return Tensor(out_data, _parents=(a,), _backward=backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor(out_data, _parents=(a,), _backward=backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along axis."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float | None = None) -> Tensor:
    """Normalize over the last (channel) axis, then affine."""
    if eps is None:
        eps = default_eps()
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.data
            x._accumulate(inv * (gh - gh.mean(axis=-1, keepdims=True)
                                 - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))

    return Tensor(out_data, _parents=(x, gain, bias), _backward=backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * sig * (1.0 + a.data * (1.0 - sig)))

    return Tensor(out_data, _parents=(a,), _backward=backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
            a._accumulate(g * (cdf + a.data * pdf))

    return Tensor(out_data, _parents=(a,), _backward=backward)


ACTIVATIONS = {"silu": silu, "relu": relu, "gelu": gelu}


def activation(a: Tensor, kind: str = "silu") -> Tensor:
    try:
        return ACTIVATIONS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def dropout(a: Tensor, p: float, rng: Rng, active: bool) -> Tensor:
    """Inverted dropout; identity when inactive or p == 0."""
    if not active or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------------------
# Min-max scaler
# ---------------------------------------------------------------------------


@dataclass
class ScalerParams:
    """Per-channel min/max; channels with zero span are flagged degenerate
    and map to 0 under apply, pass through unchanged under invert."""

    min: np.ndarray
    max: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = self.max == self.min
        self.degenerate = np.asarray(self.degenerate, dtype=bool)

    @property
    def channels(self) -> int:
        return self.min.shape[0]

    def to_json(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ScalerParams":
        return cls(np.asarray(d["min"]), np.asarray(d["max"]))


def minmax_fit(samples: np.ndarray) -> ScalerParams:
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("minmax_fit needs a non-empty n x d sample matrix")
    return ScalerParams(samples.min(axis=0), samples.max(axis=0))


def _scaler_coeffs(params: ScalerParams, dtype):
    span = params.max - params.min
    scale = np.where(params.degenerate, 0.0, 1.0 / np.where(span == 0, 1.0, span))
    return params.min.astype(dtype), scale.astype(dtype)


def minmax_apply(params: ScalerParams, x):
    """(x - min) / (max - min); degenerate channels map to 0.
    Accepts a Tensor (stays on the tape) or an ndarray."""
    if isinstance(x, Tensor):
        if x.shape[-1] != params.channels:
            raise ValueError("channel count mismatch")
        mn, scale = _scaler_coeffs(params, x.data.dtype)
        return mul(sub(x, Tensor(mn)), Tensor(scale))
    x = np.asarray(x)
    if x.shape[-1] != params.channels:
        raise ValueError("channel count mismatch")
    mn, scale = _scaler_coeffs(params, x.dtype if x.dtype.kind == "f" else np.float64)
    return (x - mn) * scale


def minmax_invert(params: ScalerParams, y: np.ndarray) -> np.ndarray:
    """Inverse of apply on non-degenerate channels; degenerate channels pass
    through unchanged."""
    y = np.asarray(y)
    if y.shape[-1] != params.channels:
        raise ValueError("channel count mismatch")
    span = params.max - params.min
    return np.where(params.degenerate, y, y * span + params.min)


# ---------------------------------------------------------------------------
# Cosine similarity
# ---------------------------------------------------------------------------


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    out_data = np.maximum(a.data, floor)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > floor))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def cosine_similarity(a: Tensor, b: Tensor, eps: float | None = None) -> Tensor:
    """a.b / max(|a||b|, eps) for 1-d tensors; zero vectors give 0 and the
    value is exactly invariant under positive rescaling of either input."""
    if eps is None:
        eps = default_eps()
    dot = tsum(mul(a, b))
    na = sqrt(tsum(mul(a, a)))
    nb = sqrt(tsum(mul(b, b)))
    return div(dot, clamp_min(mul(na, nb), eps))


def cosine_matrix(x: Tensor, c: Tensor, eps: float | None = None) -> Tensor:
    """Pairwise cosine similarity between rows of x (n x d) and c (E x d)."""
    if eps is None:
        eps = default_eps()
    dots = matmul(x, transpose(c, (1, 0)))
    nx = sqrt(tsum(mul(x, x), axis=-1, keepdims=True))
    nc = sqrt(tsum(mul(c, c), axis=-1, keepdims=True))
    denom = clamp_min(matmul(nx, transpose(nc, (1, 0))), eps)
    return div(dots, denom)


def cosine_matrix_np(x: np.ndarray, c: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    nx = np.linalg.norm(x, axis=-1, keepdims=True)
    nc = np.linalg.norm(c, axis=-1, keepdims=True)
    return (x @ c.T) / np.maximum(nx * nc.T, eps)


# ---------------------------------------------------------------------------
# Binary tensor blob format
# ---------------------------------------------------------------------------

BLOB_MAGIC = b"PMTBLOB1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_blob(f, arr: np.ndarray) -> int:
    """Append one tensor record; returns the record's byte offset."""
    arr = np.asarray(arr)
    shape = arr.shape  # ascontiguousarray promotes 0-d arrays to 1-d
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
    offset = f.tell()
    f.write(BLOB_MAGIC)
    f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], len(shape)))
    for extent in shape:
        f.write(struct.pack("<Q", extent))
    f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return offset


def read_blob(f, offset: int | None = None) -> np.ndarray:
    if offset is not None:
        f.seek(offset)
    magic = f.read(8)
    if magic != BLOB_MAGIC:
        raise ValueError(f"bad tensor blob magic {magic!r}")
    code, rank = struct.unpack("<BB", f.read(2))
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
    dtype = _CODE_DTYPES[code]
    n = int(np.prod(shape)) if shape else 1
    payload = f.read(n * dtype.itemsize)
    if len(payload) != n * dtype.itemsize:
        raise ValueError("truncated tensor blob payload")
    return np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
