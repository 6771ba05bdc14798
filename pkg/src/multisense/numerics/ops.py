"""Forward ops with recorded reverse-mode gradients.

Conventions: strict shape checking (ShapeError names the op and dims),
float dtype of inputs is preserved, and the only implicit broadcasting is
a trailing-shape operand broadcast across leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (leading-dim broadcast only)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_trailing(op, a, b):
    if a.ndim < b.ndim or (b.ndim and tuple(a.shape[a.ndim - b.ndim:]) != tuple(b.shape)):
        raise ShapeError(op, f"shapes {a.shape} and {b.shape} (second operand must match trailing dims)")


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("add", a.data, b.data)
    out = a.data + b.data

    def vjp(g):
        return g, _unbroadcast(g, b.data.shape)

    return make_node(out, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("sub", a.data, b.data)
    out = a.data - b.data

    def vjp(g):
        return g, -_unbroadcast(g, b.data.shape)

    return make_node(out, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("mul", a.data, b.data)
    out = a.data * b.data

    def vjp(g):
        return g * b.data, _unbroadcast(g * a.data, b.data.shape)

    return make_node(out, (a, b), vjp, "mul")


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    out = a.data * s

    def vjp(g):
        return (g * s,)

    return make_node(out, (a,), vjp, "scale")


def neg(a):
    return scale(a, -1.0)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return make_node(out, (a,), vjp, "exp")


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return make_node(out, (a,), vjp, "log")


def clamp(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    pass_mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)

    def vjp(g):
        return (g * pass_mask,)

    return make_node(out, (a,), vjp, "clamp")


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    mask = (a.data > 0).astype(a.data.dtype)

    def vjp(g):
        return (g * mask,)

    return make_node(out, (a,), vjp, "relu")


def gelu(a):
    """tanh-approximation GELU."""
    a = as_tensor(a)
    x = a.data
    c = np.asarray(np.sqrt(2.0 / np.pi), dtype=x.dtype)
    k = np.asarray(0.044715, dtype=x.dtype)
    inner = c * (x + k * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = c * (1.0 + 3.0 * k * x**2)
        dt = (1.0 - t**2) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return make_node(out, (a,), vjp, "gelu")


# ------------------------------------------------------------------- linalg

def matmul(a, b):
    """2D/3D matmul; 3D operands are batched over the leading dim."""
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError("matmul", f"operands must be >=2D, got {da.shape} @ {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {da.shape} @ {db.shape}")
    if da.ndim == 3 and db.ndim == 3 and da.shape[0] != db.shape[0]:
        raise ShapeError("matmul", f"batch dims differ: {da.shape} @ {db.shape}")
    out = np.matmul(da, db)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(db, -1, -2))
        gb = np.matmul(np.swapaxes(da, -1, -2), g)
        return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)

    return make_node(out, (a, b), vjp, "matmul")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return make_node(out, (a,), vjp, "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return make_node(out, (a,), vjp, "transpose")


def concat(parts, axis):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(parts))
        )

    return make_node(out, tuple(parts), vjp, "concat")


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]
    full_shape = a.data.shape

    def vjp(g):
        buf = np.zeros(full_shape, dtype=g.dtype)
        buf[idx] = g
        return (buf,)

    return make_node(out, (a,), vjp, "narrow")


def gather_positions(a, pos):
    """a: (B,S,...) -> (B,...) taking a[b, pos[b]] per batch row."""
    a = as_tensor(a)
    pos = np.asarray(pos, dtype=np.int64)
    if pos.shape != (a.data.shape[0],):
        raise ShapeError("gather_positions", f"pos shape {pos.shape} vs batch {a.data.shape[0]}")
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, pos]
    full_shape = a.data.shape

    def vjp(g):
        buf = np.zeros(full_shape, dtype=g.dtype)
        np.add.at(buf, (rows, pos), g)
        return (buf,)

    return make_node(out, (a,), vjp, "gather_positions")


def embedding(table, ids):
    """table: (V,d) parameter; ids: int array -> (*ids.shape, d)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding", f"ids out of range [0,{table.data.shape[0]})")
    out = table.data[ids]

    def vjp(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (buf,)

    return make_node(out, (table,), vjp, "embedding")


def linear(x, w, b=None):
    """x: (...,k) @ w: (k,n) [+ b: (n,)]."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# --------------------------------------------------------------- reductions

def sum_all(a):
    a = as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    shape = a.data.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return make_node(out, (a,), vjp, "sum")


def mean_all(a):
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    shape = a.data.shape

    def vjp(g):
        return ((np.broadcast_to(g, shape) / n).astype(g.dtype),)

    return make_node(out, (a,), vjp, "mean")


def sum_axis(a, axis, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).astype(g.dtype).copy(),)

    return make_node(out, (a,), vjp, "sum_axis")


def mean_axis(a, axis, keepdims=False):
    a = as_tensor(a)
    n = a.data.shape[axis]
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


# ------------------------------------------------------------ normalization

def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_node(out, (a,), vjp, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last dim, then scale/shift by (d,) params."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("layer_norm", f"params {gamma.data.shape}/{beta.data.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xn = xc * inv
    out = xn * gamma.data + beta.data

    def vjp(g):
        gxn = g * gamma.data
        # d/dx of (x - mu) * inv with mu, inv functions of x
        t1 = gxn * inv
        t2 = inv / d * gxn.sum(axis=-1, keepdims=True)
        t3 = xn * inv / d * (gxn * xn).sum(axis=-1, keepdims=True)
        gx = t1 - t2 - t3
        ggamma = (g * xn).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), vjp, "layer_norm")


def l2_normalize(a, eps=1e-8):
    """Unit-normalize over the last dim."""
    a = as_tensor(a)
    x = a.data
    nrm = np.sqrt((x * x).sum(axis=-1, keepdims=True)) + np.asarray(eps, dtype=x.dtype)
    out = x / nrm

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / nrm,)

    return make_node(out, (a,), vjp, "l2_normalize")


# ------------------------------------------------------------------- losses

def mse(pred, target):
    """Mean squared error over all elements; target is constant."""
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if t.shape != pred.data.shape:
        raise ShapeError("mse", f"pred {pred.data.shape} vs target {t.shape}")
    diff = pred.data - t
    out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    n = pred.data.size

    def vjp(g):
        return (g * 2.0 * diff / n,)

    return make_node(out, (pred,), vjp, "mse")


def cross_entropy_logits(logits, targets, mask=None):
    """Mean token cross-entropy from raw logits.

    logits: (N,V); targets: (N,) int ids; mask: optional (N,) {0,1} selecting
    which positions count. Mean over selected positions.
    """
    logits = as_tensor(logits)
    x = logits.data
    if x.ndim != 2:
        raise ShapeError("cross_entropy", f"logits must be 2D (N,V), got {x.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (x.shape[0],):
        raise ShapeError("cross_entropy", f"targets shape {tgt.shape} vs logits rows {x.shape[0]}")
    if mask is None:
        m = np.ones(x.shape[0], dtype=x.dtype)
    else:
        m = np.asarray(mask, dtype=x.dtype)
        if m.shape != (x.shape[0],):
            raise ShapeError("cross_entropy", f"mask shape {m.shape} vs logits rows {x.shape[0]}")
    denom = m.sum()
    if denom <= 0:
        raise ShapeError("cross_entropy", "mask selects no positions")
    mx = x.max(axis=-1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(x - mx).sum(axis=-1))
    picked = x[np.arange(x.shape[0]), tgt]
    out = np.asarray(((lse - picked) * m).sum() / denom, dtype=x.dtype)

    def vjp(g):
        p = np.exp(x - mx)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(x.shape[0]), tgt] -= 1.0
        return (g * p * (m / denom)[:, None],)

    return make_node(out, (logits,), vjp, "cross_entropy")


# -------------------------------------------------------------- convolution

def conv2d(x, w, b=None, stride=1, padding=0):
    """x: (B,C,H,W), w: (O,C,kh,kw); returns (B,O,OH,OW)."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d", f"need 4D input/kernel, got {xd.shape}, {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError("conv2d", f"channel mismatch: input C={xd.shape[1]}, kernel C={wd.shape[1]}")
    B, C, H, W = xd.shape
    O, _, kh, kw = wd.shape
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    Hp, Wp = xp.shape[2], xp.shape[3]
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    if OH <= 0 or OW <= 0:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} too large for padded input {Hp}x{Wp}")

    cols = np.empty((B, C * kh * kw, OH * OW), dtype=xd.dtype)
    i = 0
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, :, dy : dy + stride * OH : stride, dx : dx + stride * OW : stride]
            cols[:, i * C : (i + 1) * C, :] = patch.reshape(B, C, OH * OW)
            i += 1
    wf = wd.transpose(2, 3, 1, 0).reshape(kh * kw * C, O)  # matches cols layout (dy,dx,C)
    out = np.matmul(cols.transpose(0, 2, 1), wf).transpose(0, 2, 1).reshape(B, O, OH, OW)
    if b is not None:
        bt = as_tensor(b)
        out = out + bt.data.reshape(1, O, 1, 1)

    parents = (x, w) if b is None else (x, w, bt)

    def vjp(g):
        gflat = g.reshape(B, O, OH * OW)
        gw = np.einsum("bom,bcm->co", gflat, cols, optimize=True).reshape(kh, kw, C, O).transpose(3, 2, 0, 1)
        gcols = np.matmul(wf, gflat)  # (B, khkwC, OHOW)
        gxp = np.zeros_like(xp)
        i = 0
        for dy in range(kh):
            for dx in range(kw):
                gxp[:, :, dy : dy + stride * OH : stride, dx : dx + stride * OW : stride] += gcols[
                    :, i * C : (i + 1) * C, :
                ].reshape(B, C, OH, OW)
                i += 1
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, gflat.sum(axis=(0, 2))

    return make_node(out, parents, vjp, "conv2d")


def avg_pool2d(x, k):
    """Non-overlapping kxk average pooling; H and W must be divisible by k."""
    x = as_tensor(x)
    B, C, H, W = x.data.shape
    if H % k or W % k:
        raise ShapeError("avg_pool2d", f"dims {H}x{W} not divisible by pool {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def vjp(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx.astype(g.dtype),)

    return make_node(out, (x,), vjp, "avg_pool2d")


# ---------------------------------------------------------------- attention

def multi_head_attention(q_in, k_in, v_in, wq, wk, wv, wo, n_heads, bias_q=None, bias_k=None,
                         bias_v=None, bias_o=None, attn_mask=None):
    """Standard multi-head attention block built from primitive ops.

    q_in: (B,Sq,d), k_in/v_in: (B,Sk,d). attn_mask: additive (B,Sq,Sk) or
    (Sq,Sk) numpy array (0 = attend, large negative = blocked).
    Returns (B,Sq,d).
    """
    B, Sq, d = q_in.data.shape
    Sk = k_in.data.shape[1]
    if d % n_heads:
        raise ShapeError("multi_head_attention", f"d_model {d} not divisible by heads {n_heads}")
    dh = d // n_heads

    def split_heads(t, S):
        t = reshape(t, (B, S, n_heads, dh))
        return reshape(transpose(t, (0, 2, 1, 3)), (B * n_heads, S, dh))

    q = split_heads(linear(q_in, wq, bias_q), Sq)
    k = split_heads(linear(k_in, wk, bias_k), Sk)
    v = split_heads(linear(v_in, wv, bias_v), Sk)

    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    if attn_mask is not None:
        m = np.asarray(attn_mask, dtype=scores.data.dtype)
        if m.ndim == 2 and m.shape == (Sq, Sk):
            mfull = np.broadcast_to(m[None], (B * n_heads, Sq, Sk))
        elif m.ndim == 3 and m.shape[0] == B:
            mfull = np.repeat(m, n_heads, axis=0)
        elif m.ndim == 3 and m.shape[0] == B * n_heads:
            mfull = m
        else:
            raise ShapeError("multi_head_attention", f"mask shape {m.shape} vs scores {(B, Sq, Sk)}")
        scores = add(scores, Tensor(mfull))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # (B*h, Sq, dh)
    ctx = reshape(ctx, (B, n_heads, Sq, dh))
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, Sq, d))
    return linear(ctx, wo, bias_o)
