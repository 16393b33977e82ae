"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

A ``Tape`` records every operation whose inputs are tracked; ``Tape.backward``
replays the records in reverse and accumulates gradients into the tensors.
Tapes are cheap and meant to live for a single forward/backward pass: create
one per training step or optimization iteration, and do not mutate a watched
array while its tape is still alive.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "DiffTensor",
    "Tape",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "exp",
    "absolute",
    "pow_scalar",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "slice_axis",
    "stack_axis",
    "forward_diff",
    "pad_end",
    "softmax_rows",
    "cross_entropy",
    "conv3d",
    "upsample_trilinear",
    "trilinear_matrix",
]


class DiffTensor:
    """Value node: a float64 array plus an optional gradient buffer.

    ``grad`` is populated by ``Tape.backward`` and only for tensors recorded
    on (or watched by) the tape that ran backward.
    """

    __slots__ = ("data", "grad", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self):
        return self.tape is not None

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"DiffTensor(shape={self.data.shape}{tag})"

    # Arithmetic sugar; scalars and ndarrays are promoted to constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data):
    """Wrap an array as an untracked tensor (no gradient ever flows)."""
    return DiffTensor(data)


class Tape:
    """Single-writer record of operations for one reverse-mode pass.

    ``watch`` registers a leaf array whose gradient is wanted; ``watch_param``
    does the same but honours ``track_params`` so frozen-model passes can
    skip parameter gradients. Repeated watches of the same array return the
    same leaf, which makes gradient accumulation across fan-out automatic.
    """

    def __init__(self, active=True, track_params=True):
        self.active = active
        self.track_params = track_params
        self._ops = []
        self._next_id = 0
        self._leaves = {}

    def _new_id(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, array):
        key = id(array)
        leaf = self._leaves.get(key)
        if leaf is None:
            tracked = self.active
            leaf = DiffTensor(array, self if tracked else None,
                              self._new_id() if tracked else None)
            if tracked:
                leaf.grad = np.zeros_like(leaf.data)
            self._leaves[key] = (leaf, array)
        else:
            leaf = leaf[0]
        return leaf

    def watch_param(self, array):
        if not self.track_params:
            return DiffTensor(array)
        return self.watch(array)

    def grad(self, array):
        """Gradient buffer of a previously watched array."""
        entry = self._leaves.get(id(array))
        if entry is None:
            raise ContractError("array was never watched on this tape")
        return entry[0].grad

    def record(self, out_data, backward_fn):
        out = DiffTensor(out_data, self, self._new_id())
        self._ops.append((out, backward_fn))
        return out

    def backward(self, loss):
        """Populate gradients of every tracked tensor reachable from ``loss``."""
        if not isinstance(loss, DiffTensor) or loss.tape is not self:
            raise ContractError("loss must be recorded on this tape")
        if loss.data.shape != ():
            raise ContractError(
                f"loss must be scalar, got shape {loss.data.shape}")
        _accumulate(loss, np.ones((), dtype=np.float64))
        for out, backward_fn in reversed(self._ops):
            if out.grad is not None:
                backward_fn(out.grad)


def _accumulate(tensor, grad):
    if tensor.tape is None:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _as_tensor(x):
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


def _common_tape(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ContractError("operands were recorded on different tapes")
            tape = t.tape
    return tape


def _sum_to_shape(grad, shape):
    # Undo numpy broadcasting: sum out the expanded axes.
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _common_tape(a, b)
    out_data = a.data + b.data
    if tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        if a.tracked:
            _accumulate(a, _sum_to_shape(g, a.data.shape))
        if b.tracked:
            _accumulate(b, _sum_to_shape(g, b.data.shape))

    return tape.record(out_data, backward_fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _common_tape(a, b)
    out_data = a.data - b.data
    if tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        if a.tracked:
            _accumulate(a, _sum_to_shape(g, a.data.shape))
        if b.tracked:
            _accumulate(b, _sum_to_shape(-g, b.data.shape))

    return tape.record(out_data, backward_fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _common_tape(a, b)
    out_data = a.data * b.data
    if tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        if a.tracked:
            _accumulate(a, _sum_to_shape(g * b.data, a.data.shape))
        if b.tracked:
            _accumulate(b, _sum_to_shape(g * a.data, b.data.shape))

    return tape.record(out_data, backward_fn)


def neg(a):
    a = _as_tensor(a)
    if a.tape is None:
        return DiffTensor(-a.data)

    def backward_fn(g):
        _accumulate(a, -g)

    return a.tape.record(-a.data, backward_fn)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)
    if a.tape is None:
        return DiffTensor(out_data)
    mask = a.data > 0.0

    def backward_fn(g):
        _accumulate(a, g * mask)

    return a.tape.record(out_data, backward_fn)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    if a.tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        _accumulate(a, g * out_data)

    return a.tape.record(out_data, backward_fn)


def absolute(a):
    a = _as_tensor(a)
    out_data = np.abs(a.data)
    if a.tape is None:
        return DiffTensor(out_data)
    sign = np.sign(a.data)  # subgradient 0 at exactly 0

    def backward_fn(g):
        _accumulate(a, g * sign)

    return a.tape.record(out_data, backward_fn)


def pow_scalar(a, p):
    """Elementwise ``a ** p`` for a fixed float exponent.

    For non-integer p the input must be non-negative; the derivative at 0 is
    taken as 0 whenever p > 1 (and is 0 analytically for p > 1 anyway).
    """
    a = _as_tensor(a)
    out_data = np.power(a.data, p)
    if a.tape is None:
        return DiffTensor(out_data)
    with np.errstate(divide="ignore", invalid="ignore"):
        local = p * np.power(a.data, p - 1.0)
    local = np.where(np.isfinite(local), local, 0.0)

    def backward_fn(g):
        _accumulate(a, g * local)

    return a.tape.record(out_data, backward_fn)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)
    if a.tape is None:
        return DiffTensor(out_data)
    src_shape = a.data.shape

    def backward_fn(g):
        _accumulate(a, g.reshape(src_shape))

    return a.tape.record(out_data, backward_fn)


def reduce_sum(a, axes=None):
    """Sum over ``axes`` (all axes when None), dropping the reduced axes."""
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    out_data = a.data.sum(axis=axes)
    if a.tape is None:
        return DiffTensor(out_data)
    kept = [1 if i in axes else s for i, s in enumerate(a.data.shape)]

    def backward_fn(g):
        _accumulate(a, np.broadcast_to(g.reshape(kept), a.data.shape))

    return a.tape.record(out_data, backward_fn)


def reduce_mean(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        count = a.data.size
    else:
        ax = (axes,) if isinstance(axes, int) else axes
        count = int(np.prod([a.data.shape[i] for i in ax]))
    return mul(reduce_sum(a, axes), 1.0 / count)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul requires (M,K)x(K,P), got {a.data.shape} and {b.data.shape}")
    tape = _common_tape(a, b)
    out_data = a.data @ b.data
    if tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        if a.tracked:
            _accumulate(a, g @ b.data.T)
        if b.tracked:
            _accumulate(b, a.data.T @ g)

    return tape.record(out_data, backward_fn)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    out_data = np.ascontiguousarray(a.data.T)
    if a.tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        _accumulate(a, g.T)

    return a.tape.record(out_data, backward_fn)


def slice_axis(a, axis, index):
    """Select one index along ``axis``, dropping that axis."""
    a = _as_tensor(a)
    out_data = np.ascontiguousarray(np.take(a.data, index, axis=axis))
    if a.tape is None:
        return DiffTensor(out_data)
    src_shape = a.data.shape

    def backward_fn(g):
        full = np.zeros(src_shape, dtype=np.float64)
        key = tuple(index if i == axis else slice(None) for i in range(len(src_shape)))
        full[key] = g
        _accumulate(a, full)

    return a.tape.record(out_data, backward_fn)


def stack_axis(tensors, axis=0):
    """Stack same-shaped tensors along a new axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack_axis needs at least one tensor")
    tape = _common_tape(*tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)
    if tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        for i, t in enumerate(tensors):
            if t.tracked:
                _accumulate(t, np.take(g, i, axis=axis))

    return tape.record(out_data, backward_fn)


def forward_diff(a, axis):
    """First forward difference along ``axis``; output is one shorter there."""
    a = _as_tensor(a)
    if a.data.shape[axis] < 2:
        raise ShapeError(
            f"forward_diff needs extent >= 2 on axis {axis}, got shape {a.data.shape}")
    lead = tuple(slice(None) for _ in range(axis))
    out_data = a.data[lead + (slice(1, None),)] - a.data[lead + (slice(None, -1),)]
    if a.tape is None:
        return DiffTensor(out_data)
    src_shape = a.data.shape

    def backward_fn(g):
        full = np.zeros(src_shape, dtype=np.float64)
        full[lead + (slice(1, None),)] += g
        full[lead + (slice(None, -1),)] -= g
        _accumulate(a, full)

    return a.tape.record(out_data, backward_fn)


def pad_end(a, axis, count=1):
    """Append ``count`` zeros at the far end of ``axis``."""
    a = _as_tensor(a)
    widths = [(0, count) if i == axis else (0, 0) for i in range(a.data.ndim)]
    out_data = np.pad(a.data, widths)
    if a.tape is None:
        return DiffTensor(out_data)
    key = tuple(slice(None, -count) if i == axis else slice(None)
                for i in range(a.data.ndim))

    def backward_fn(g):
        _accumulate(a, g[key])

    return a.tape.record(out_data, backward_fn)


# ---------------------------------------------------------------------------
# softmax and cross-entropy
# ---------------------------------------------------------------------------

def softmax_rows(a):
    """Row-wise softmax of a matrix, stabilized by the row maximum."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.data.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows input contains NaN")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)
    if a.tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        # dS = (g - sum_j g_j * y_j) * y, row-wise
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accumulate(a, (g - dot) * out_data)

    return a.tape.record(out_data, backward_fn)


def cross_entropy(logits, label):
    """Negative log-softmax of ``logits`` at ``label`` (scalar output)."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects a logit vector, got {logits.data.shape}")
    k = logits.data.shape[0]
    if not 0 <= label < k:
        raise ContractError(f"label {label} out of range for {k} classes")
    z = logits.data
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    out_data = np.asarray(lse - z[label])
    if logits.tape is None:
        return DiffTensor(out_data)
    probs = np.exp(z - lse)

    def backward_fn(g):
        d = probs.copy()
        d[label] -= 1.0
        _accumulate(logits, g * d)

    return logits.tape.record(out_data, backward_fn)


# ---------------------------------------------------------------------------
# 3-D convolution (cross-correlation) via cached im2col indices
# ---------------------------------------------------------------------------

_COL_CACHE = {}


def _conv3d_plan(in_shape, k_shape, stride, padding):
    key = (in_shape, k_shape, stride, padding)
    plan = _COL_CACHE.get(key)
    if plan is not None:
        return plan
    c, t, h, w = in_shape
    kt, kh, kw = k_shape
    st, sh, sw = stride
    pt, ph, pw = padding
    tp, hp, wp = t + 2 * pt, h + 2 * ph, w + 2 * pw
    to = (tp - kt) // st + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    r_c = np.repeat(np.arange(c), kt * kh * kw)
    r_t = np.tile(np.repeat(np.arange(kt), kh * kw), c)
    r_h = np.tile(np.repeat(np.arange(kh), kw), c * kt)
    r_w = np.tile(np.arange(kw), c * kt * kh)
    p_t = st * np.repeat(np.arange(to), ho * wo)
    p_h = sh * np.tile(np.repeat(np.arange(ho), wo), to)
    p_w = sw * np.tile(np.arange(wo), to * ho)
    tt = r_t[:, None] + p_t[None, :]
    hh = r_h[:, None] + p_h[None, :]
    ww = r_w[:, None] + p_w[None, :]
    idx = ((r_c[:, None] * tp + tt) * hp + hh) * wp + ww
    plan = (idx, (tp, hp, wp), (to, ho, wo))
    _COL_CACHE[key] = plan
    return plan


def _normalize_triple(v, name):
    if isinstance(v, int):
        v = (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ShapeError(f"{name} must be an int or a triple, got {v}")
    return v


def conv3d(x, kernel, stride=1, padding=0):
    """3-D cross-correlation of a C x T x H x W volume with a C' x C x kT x kH x kW kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 5:
        raise ShapeError(
            f"conv3d expects CxTxHxW input and C'xCxkTxkHxkW kernel, "
            f"got {x.data.shape} and {kernel.data.shape}")
    if x.data.shape[0] != kernel.data.shape[1]:
        raise ShapeError(
            f"channel mismatch: input {x.data.shape}, kernel {kernel.data.shape}")
    stride = _normalize_triple(stride, "stride")
    padding = _normalize_triple(padding, "padding")
    c, t, h, w = x.data.shape
    cout = kernel.data.shape[0]
    k_shape = kernel.data.shape[2:]
    padded = (t + 2 * padding[0], h + 2 * padding[1], w + 2 * padding[2])
    if any(k > p for k, p in zip(k_shape, padded)):
        raise ShapeError(
            f"kernel {k_shape} larger than padded input {padded}")

    idx, pad_shape, out_shape = _conv3d_plan(x.data.shape, k_shape, stride, padding)
    if padding == (0, 0, 0):
        x_pad = x.data
    else:
        x_pad = np.pad(x.data, ((0, 0),) + tuple((p, p) for p in padding))
    cols = x_pad.reshape(-1)[idx]
    w_mat = kernel.data.reshape(cout, -1)
    out_data = (w_mat @ cols).reshape((cout,) + out_shape)

    tape = _common_tape(x, kernel)
    if tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        g_mat = g.reshape(cout, -1)
        if kernel.tracked:
            _accumulate(kernel, (g_mat @ cols.T).reshape(kernel.data.shape))
        if x.tracked:
            d_cols = w_mat.T @ g_mat
            flat = np.bincount(idx.reshape(-1), weights=d_cols.reshape(-1),
                               minlength=(c * pad_shape[0] * pad_shape[1] * pad_shape[2]))
            d_pad = flat.reshape((c,) + pad_shape)
            pt, ph, pw = padding
            d_x = d_pad[:, pt:pt + t, ph:ph + h, pw:pw + w]
            _accumulate(x, d_x)

    return tape.record(out_data, backward_fn)


# ---------------------------------------------------------------------------
# trilinear upsampling with corner alignment
# ---------------------------------------------------------------------------

_RESIZE_CACHE = {}


def trilinear_matrix(n_src, n_dst):
    """Corner-aligned 1-D linear interpolation matrix (n_dst x n_src)."""
    key = (n_src, n_dst)
    mat = _RESIZE_CACHE.get(key)
    if mat is not None:
        return mat
    mat = np.zeros((n_dst, n_src), dtype=np.float64)
    if n_src == 1 or n_dst == 1:
        mat[:, 0] = 1.0
    else:
        pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
        lo = np.minimum(pos.astype(np.int64), n_src - 2)
        frac = pos - lo
        mat[np.arange(n_dst), lo] = 1.0 - frac
        mat[np.arange(n_dst), lo + 1] += frac
    _RESIZE_CACHE[key] = mat
    return mat


def _apply_axis(data, mat, axis):
    moved = np.moveaxis(data, axis, 0)
    out = np.tensordot(mat, moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def upsample_trilinear(x, target):
    """Resize a T x H x W volume to ``target`` by corner-aligned trilinear interpolation."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"upsample_trilinear expects a TxHxW volume, got {x.data.shape}")
    target = tuple(int(v) for v in target)
    if len(target) != 3 or any(v <= 0 for v in target):
        raise ShapeError(f"target extents must be positive, got {target}")
    if any(d > t for d, t in zip(x.data.shape, target)):
        raise ShapeError(
            f"target {target} must be >= source {x.data.shape} per axis")
    mats = [trilinear_matrix(s, d) for s, d in zip(x.data.shape, target)]
    out_data = x.data
    for axis, mat in enumerate(mats):
        out_data = _apply_axis(out_data, mat, axis)
    if x.tape is None:
        return DiffTensor(out_data)

    def backward_fn(g):
        d = g
        for axis, mat in enumerate(mats):
            d = _apply_axis(d, mat.T, axis)
        _accumulate(x, d)

    return x.tape.record(out_data, backward_fn)
