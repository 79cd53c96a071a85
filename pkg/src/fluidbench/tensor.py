"""Reverse-mode automatic differentiation over numpy arrays.

A ``Graph`` records primitive ops onto a tape while active; ``Graph.backward``
replays the tape once in reverse.  With no graph active the same primitives
run eagerly with zero bookkeeping, which is the inference fast path.  All
kernels are hand-written; matmuls with a 2-D right-hand side are folded to a
single GEMM because that is where virtually all training time goes, and the
GEMM/softmax/layer-norm inner loops dispatch through ``_kernels`` (torch's
single-threaded CPU kernels when available, numpy otherwise).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

__all__ = [
    "Tensor", "Graph", "ShapeError", "GraphError", "NumericsError",
    "checked", "is_checked", "measure_flops", "forward_primitive",
    "add", "sub", "mul", "matmul", "linear", "reshape", "transpose", "concat",
    "take_rows", "embedding", "gelu", "gelu_array", "softmax", "layer_norm",
    "attention", "attention_packed", "attention_kv_packed",
    "sum_all", "mean_all", "mse_loss", "cross_entropy", "gradient_check",
]

class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class GraphError(RuntimeError):
    """Raised on tape misuse (double backward, foreign loss, non-scalar loss)."""


class NumericsError(FloatingPointError):
    """Raised in checked mode when an op produces a non-finite value."""


# --- global modes -----------------------------------------------------------

_checked = [True]


def is_checked() -> bool:
    return _checked[-1]


@contextmanager
def checked(enabled: bool):
    """Temporarily enable or disable non-finite output checks."""
    _checked.append(bool(enabled))
    try:
        yield
    finally:
        _checked.pop()


class FlopMeter:
    __slots__ = ("value",)

    def __init__(self):
        self.value = 0


_meters: list[FlopMeter] = []


@contextmanager
def measure_flops():
    """Count forward matmul/attention FLOPs issued while the context is open."""
    m = FlopMeter()
    _meters.append(m)
    try:
        yield m
    finally:
        _meters.remove(m)


def _add_flops(n: int):
    if _meters:
        for m in _meters:
            m.value += n


# --- tape -------------------------------------------------------------------

_graphs: list["Graph"] = []


class _Node:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out, parents, bwd):
        self.out = out
        self.parents = parents
        self.bwd = bwd


class Graph:
    """Tape of recorded ops.  Supports exactly one backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._used = False

    def __enter__(self):
        _graphs.append(self)
        return self

    def __exit__(self, *exc):
        _graphs.pop()
        return False

    def backward(self, loss: "Tensor") -> dict:
        """Reverse sweep from ``loss``.  Returns {leaf Tensor: gradient array}.

        Intermediate gradients and tape closures are released as the sweep
        passes them, so peak memory stays near one activation set.  Set
        ``requires_grad`` on an intermediate before calling to keep its grad.
        """
        if self._used:
            raise GraphError("backward was already run on this graph")
        if loss._graph is not self:
            raise GraphError("loss tensor was not recorded on this graph")
        if loss.data.size != 1:
            raise GraphError(f"backward target must be scalar, got shape {loss.data.shape}")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        leaves: dict[Tensor, np.ndarray] = {}
        nodes = self._nodes
        for i in range(len(nodes) - 1, -1, -1):
            node = nodes[i]
            nodes[i] = None
            g = node.out.grad
            if g is None:
                continue
            grads = node.bwd(g)
            if not node.out.requires_grad:
                node.out.grad = None
            for p, gp in zip(node.parents, grads):
                if gp is None or not isinstance(p, Tensor):
                    continue
                if not (p.requires_grad or p._graph is not None):
                    continue
                if p.grad is None:
                    p.grad = gp
                else:
                    p.grad = p.grad + gp
                if p.requires_grad and p._graph is None:
                    leaves[p] = p.grad
        nodes.clear()
        return leaves


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._graph = None  # set when produced by a recorded op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # light operator sugar; all heavy lifting goes through module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _finite(arr) -> bool:
    """One-pass non-finite probe: any nan/inf poisons the sum.

    A false alarm would need a finite sum to overflow, i.e. elements around
    1e300 (f64) or 1e32 (f32); activations at those magnitudes are a numerics
    failure in their own right.
    """
    return bool(np.isfinite(np.sum(arr)))


def _make(out_data, op_name, parents, bwd) -> Tensor:
    """Wrap an op result; record it if a graph is active and grads can flow."""
    if _checked[-1] and not _finite(out_data):
        raise NumericsError(f"{op_name} produced non-finite values")
    out = Tensor(out_data)
    if _graphs:
        needs = any(isinstance(p, Tensor) and (p.requires_grad or p._graph is not None)
                    for p in parents)
        if needs:
            g = _graphs[-1]
            out._graph = g
            g._nodes.append(_Node(out, parents, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(out, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(out, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), bwd)


# --- matmul -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2:
        raise ShapeError(f"matmul: need at least (.., K) @ (K, N), got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ (lhs K={ad.shape[-1]}, rhs K={bd.shape[-2]})")

    if bd.ndim == 2:
        # fold leading axes into one GEMM
        k, n = bd.shape
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, k)
        out = K.matmul2d(a2, bd)
        _add_flops(2 * a2.shape[0] * k * n)
        out = out.reshape(*lead, n)

        def bwd(g):
            g2 = g.reshape(-1, n)
            da = K.matmul2d(g2, bd.T).reshape(ad.shape)
            db = K.matmul2d(a2.T, g2)
            return (da, db)
    else:
        try:
            out = np.matmul(ad, bd)
        except ValueError:
            raise ShapeError(f"matmul: batch shapes {ad.shape} and {bd.shape} incompatible")
        batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
        _add_flops(2 * batch * out.shape[-2] * out.shape[-1] * ad.shape[-1])

        def bwd(g):
            da = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            db = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return (da, db)

    return _make(out, "matmul", (a, b), bwd)


def linear(x, w, b) -> Tensor:
    """Fused affine map ``x @ w + b`` over the last axis.

    One tape node instead of a matmul/add pair, which halves the hot-path
    closure count for projection layers.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or bd.ndim != 1:
        raise ShapeError(f"linear: need weight (K, N) and bias (N,), got {wd.shape} and {bd.shape}")
    if xd.ndim < 1 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(
            f"linear: inner dimensions differ (input K={xd.shape[-1:]}, weight K={wd.shape[0]})")
    if bd.shape[0] != wd.shape[1]:
        raise ShapeError(f"linear: bias length {bd.shape[0]} != output width {wd.shape[1]}")

    k, n = wd.shape
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, k)
    out = K.affine2d(x2, wd, bd)
    _add_flops(2 * x2.shape[0] * k * n)
    out = out.reshape(*lead, n)

    def bwd(g):
        g2 = g.reshape(-1, n)
        dx = K.matmul2d(g2, wd.T).reshape(xd.shape)
        dw = K.matmul2d(x2.T, g2)
        db = K.sum0(g2)
        return (dx, dw, db)

    return _make(out, "linear", (x, w, b), bwd)


# --- shape plumbing ---------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _make(out, "reshape", (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(out, "transpose", (a,), bwd)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[p.shape for p in parts]} incompatible on axis {axis}")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(parts), bwd)


def take_rows(a, idx) -> Tensor:
    """Gather rows of ``a`` along axis 0; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take_rows: index array must be integer")
    out = a.data[idx]
    # strictly increasing index sets (the common masked-gather case) scatter
    # without duplicate handling
    unique = idx.ndim == 1 and (idx.size < 2 or bool(np.all(np.diff(idx) > 0)))

    def bwd(g):
        da = np.zeros_like(a.data)
        if unique:
            da[idx] = g
        else:
            np.add.at(da, idx, g)
        return (da,)

    return _make(out, "take_rows", (a,), bwd)


def embedding(ids, table) -> Tensor:
    """Look up integer ids in an embedding table of shape (V, c)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.data.shape[0]}), got min={ids.min()} max={ids.max()}")
    out = table.data[ids]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (dt,)

    return _make(out, "embedding", (table,), bwd)


# --- nonlinearities ---------------------------------------------------------

def gelu_array(x: np.ndarray) -> np.ndarray:
    """Eager GELU, tanh form: 0.5 x (1 + tanh(a (x + b x^3))).

    The tanh form runs far faster than an erf kernel here; eager decode
    paths call this so cached and tape forwards agree bitwise.
    """
    return K.gelu_fwd(x)[0]


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out, h = K.gelu_fwd(x)

    def bwd(g):
        return (K.gelu_bwd(x, h, g),)

    return _make(out, "gelu", (a,), bwd)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    y = K.softmax_lastdim(a.data)

    def bwd(g):
        return (K.softmax_bwd(y, g),)

    return _make(y, "softmax", (a,), bwd)


def layer_norm(a, gain, bias, eps: float = 1e-10) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    c = a.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({c},), got {gain.shape}/{bias.shape}")
    out, mu, rstd = K.layer_norm_fwd(a.data, gain.data, bias.data, eps)

    def bwd(g):
        return K.layer_norm_bwd(g, a.data, mu, rstd, gain.data, bias.data)

    return _make(out, "layer_norm", (a, gain, bias), bwd)


# --- fused attention --------------------------------------------------------

def _attention_core(qd, kd, vd, num_heads: int, causal: bool):
    """Shared forward/backward for the attention variants.

    Returns (out, bwd) where bwd(g) -> (dq, dk, dv) as (B, n, c) arrays.
    With ``causal=True`` query i may attend keys 0..i+offset where
    offset = n_k - n_q, so a suffix of queries against a full key set sees
    exactly the prefix a full forward would.

    Heads are packed into the batch axis for the two batched GEMMs, and the
    1/sqrt(dh) scale is folded into the query copy once: dk then comes out
    of ds^T @ (scale q) already scaled, only dq needs the extra factor.

    The returned ``bwd(g, dq, dk, dv)`` writes gradients into the supplied
    (B, n, c) views, which may be column windows of packed buffers.
    """
    B, nq, c = qd.shape
    nk = kd.shape[1]
    if c % num_heads != 0:
        raise ShapeError(f"attention: channels {c} not divisible by num_heads {num_heads}")
    dh = c // num_heads
    scale = float(1.0 / np.sqrt(dh))

    qh = K.pack_heads(qd, num_heads, scale)
    kh = K.pack_heads(kd, num_heads)
    vh = K.pack_heads(vd, num_heads)

    scores = K.bmm_nt(qh, kh)
    if causal:
        if nk < nq:
            raise ShapeError(f"attention: causal decode needs n_k >= n_q, got {nk} < {nq}")
        attn = K.causal_softmax(scores)
    else:
        attn = K.softmax_lastdim(scores)
    outh = K.bmm_nn(attn, vh)
    _add_flops(4 * B * num_heads * nq * nk * dh)
    out = np.empty(qd.shape, qd.dtype)
    K.unpack_heads(outh, out, num_heads)

    def bwd(g, dq, dk, dv):
        gh = K.pack_heads(g, num_heads)
        dattn = K.bmm_nt(gh, vh)
        dvh = K.bmm_tn(attn, gh)
        ds = K.softmax_bwd(attn, dattn)  # masked cells have attn == 0, so ds == 0
        dqh = K.bmm_nn(ds, kh)
        dkh = K.bmm_tn(ds, qh)
        K.unpack_heads(dqh, dq, num_heads, scale)
        K.unpack_heads(dkh, dk, num_heads)
        K.unpack_heads(dvh, dv, num_heads)

    return out, bwd


def attention(q, k, v, num_heads: int, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over (B, n, c) inputs."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    qd, kd, vd = q.data, k.data, v.data
    if qd.ndim != 3 or kd.ndim != 3 or vd.ndim != 3:
        raise ShapeError(
            f"attention: expected (B, n, c) operands, got {qd.shape}/{kd.shape}/{vd.shape}")
    B, nq, c = qd.shape
    nk = kd.shape[1]
    if kd.shape != (B, nk, c) or vd.shape != (B, nk, c):
        raise ShapeError(f"attention: key/value shapes {kd.shape}/{vd.shape} "
                         f"inconsistent with queries {qd.shape}")
    out, core_bwd = _attention_core(qd, kd, vd, num_heads, causal)

    def bwd(g):
        dq = np.empty_like(qd)
        dk = np.empty_like(kd)
        dv = np.empty_like(vd)
        core_bwd(g, dq, dk, dv)
        return (dq, dk, dv)

    return _make(out, "attention", (q, k, v), bwd)


def attention_packed(qkv, num_heads: int, causal: bool = False) -> Tensor:
    """Self-attention over a packed (B, n, 3c) q|k|v projection.

    One tape node instead of a split into three; the backward writes
    straight into a single (B, n, 3c) gradient buffer.
    """
    qkv = _as_tensor(qkv)
    h = qkv.data
    if h.ndim != 3 or h.shape[-1] % 3:
        raise ShapeError(f"attention_packed: expected (B, n, 3c), got {h.shape}")
    c = h.shape[-1] // 3
    out, core_bwd = _attention_core(h[..., :c], h[..., c:2 * c], h[..., 2 * c:],
                                    num_heads, causal)

    def bwd(g):
        dh = np.empty_like(h)
        core_bwd(g, dh[..., :c], dh[..., c:2 * c], dh[..., 2 * c:])
        return (dh,)

    return _make(out, "attention_packed", (qkv,), bwd)


def attention_kv_packed(q, kv, num_heads: int) -> Tensor:
    """Cross-attention with a packed (B, L, 2c) k|v projection."""
    q, kv = _as_tensor(q), _as_tensor(kv)
    qd, kvd = q.data, kv.data
    if qd.ndim != 3 or kvd.ndim != 3 or kvd.shape[-1] != 2 * qd.shape[-1]:
        raise ShapeError(
            f"attention_kv_packed: expected (B, n, c) and (B, L, 2c), got {qd.shape}/{kvd.shape}")
    c = qd.shape[-1]
    out, core_bwd = _attention_core(qd, kvd[..., :c], kvd[..., c:], num_heads, False)

    def bwd(g):
        dq = np.empty_like(qd)
        dkv = np.empty_like(kvd)
        core_bwd(g, dq, dkv[..., :c], dkv[..., c:])
        return (dq, dkv)

    return _make(out, "attention_kv_packed", (q, kv), bwd)


# --- reductions and losses --------------------------------------------------

def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum()

    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return _make(np.asarray(out), "sum_all", (a,), bwd)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean()
    inv = 1.0 / a.data.size

    def bwd(g):
        return (np.full_like(a.data, float(g) * inv),)

    return _make(np.asarray(out), "mean_all", (a,), bwd)


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over every element."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss: shapes differ {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())
    inv = 2.0 / pred.data.size

    def bwd(g):
        d = (float(g) * inv) * diff
        return (d, -d)

    return _make(out, "mse_loss", (pred, target), bwd)


def cross_entropy(logits, ids) -> Tensor:
    """Mean negative log-likelihood of integer ids under row-wise softmax."""
    logits = _as_tensor(logits)
    ids = np.asarray(ids)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, V), got {logits.shape}")
    n, v = logits.data.shape
    if ids.shape != (n,):
        raise ShapeError(f"cross_entropy: ids must have shape ({n},), got {ids.shape}")
    if ids.dtype.kind not in "iu":
        raise ShapeError("cross_entropy: ids must be integers")
    if n and (ids.min() < 0 or ids.max() >= v):
        raise ShapeError(f"cross_entropy: id out of range [0, {v})")
    rows = np.arange(n)
    p = logits.data - logits.data.max(axis=-1, keepdims=True)
    picked = p[rows, ids].copy()
    np.exp(p, out=p)
    se = p.sum(axis=-1, keepdims=True)
    picked -= np.log(se[:, 0])
    out = np.asarray(-picked.mean())
    p /= se

    def bwd(g):
        # the tape runs each closure once, so p can be consumed in place
        p[rows, ids] -= 1.0
        np.multiply(p, float(g) / n, out=p)
        return (p,)

    return _make(out, "cross_entropy", (logits,), bwd)


# --- dispatch ---------------------------------------------------------------

_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "linear": linear,
    "reshape": reshape, "transpose": transpose, "concat": concat,
    "take_rows": take_rows, "embedding": embedding,
    "gelu": gelu, "softmax": softmax, "layer_norm": layer_norm,
    "attention": attention, "attention_packed": attention_packed,
    "attention_kv_packed": attention_kv_packed,
    "sum": sum_all, "mean": mean_all,
    "mse_loss": mse_loss, "cross_entropy": cross_entropy,
}


def forward_primitive(op_kind: str, inputs, **kwargs) -> Tensor:
    """Apply a primitive by name.  Mostly useful for tests and tooling."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise KeyError(f"unknown primitive {op_kind!r}; known: {sorted(_PRIMITIVES)}")
    return fn(*inputs, **kwargs)


# --- finite-difference harness ----------------------------------------------

@dataclass
class GradCheckEntry:
    index: tuple
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    max_abs_err: float
    entries: list = field(default_factory=list)


def gradient_check(fn, point: Tensor, rel_tol: float = 1e-4, abs_tol: float = 1e-8,
                   h: float = 1e-5, max_coords: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(point)`` to central differences.

    ``point`` must be float64; a coordinate passes if the absolute error is
    below ``abs_tol`` or the relative error is below ``rel_tol``.
    """
    if point.data.dtype != np.float64:
        raise ShapeError("gradient_check requires a float64 point")
    base = point.data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    with Graph() as g:
        loss = fn(probe)
    grads = g.backward(loss)
    analytic = grads.get(probe)
    if analytic is None:
        analytic = np.zeros_like(base)

    idxs = list(np.ndindex(base.shape))
    if len(idxs) > max_coords:
        rng = np.random.Generator(np.random.PCG64(seed))
        pick = rng.choice(len(idxs), size=max_coords, replace=False)
        idxs = [idxs[i] for i in sorted(pick)]

    entries = []
    max_rel = 0.0
    max_abs = 0.0
    ok = True
    for ix in idxs:
        pert = base.copy()
        pert[ix] = base[ix] + h
        fp = float(fn(Tensor(pert)).data)
        pert[ix] = base[ix] - h
        fm = float(fn(Tensor(pert)).data)
        num = (fp - fm) / (2.0 * h)
        ana = float(analytic[ix])
        ae = abs(ana - num)
        re = ae / max(abs(ana), abs(num), 1e-12)
        good = ae <= abs_tol or re <= rel_tol
        ok = ok and good
        max_rel = max(max_rel, re)
        max_abs = max(max_abs, ae)
        entries.append(GradCheckEntry(ix, ana, num, ae, re))
    return GradCheckReport(ok, max_rel, max_abs, entries)
