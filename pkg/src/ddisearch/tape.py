"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records a computation as an append-only list of nodes; calling
:meth:`Tape.backward` on a scalar root fills in gradients for every recorded
node.  Tensors not attached to a tape behave as constants.  Everything is
64-bit and broadcasting-free: operator shape rules are exact, and a mismatch
raises :class:`ShapeError` with the offending shapes.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operator inputs do not conform to its shape rules."""


class NonFiniteError(ValueError):
    """Raised when an operator receives NaN or Inf input."""


class Tensor:
    """Dense float64 array, optionally attached to a recording tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tape:
    """Single-writer recording of one forward pass plus its gradients."""

    def __init__(self):
        self.nodes = []
        self.gradients = None

    def param(self, values) -> Tensor:
        """Register a leaf parameter and return its tape-attached tensor."""
        data = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("parameter contains NaN or Inf")
        self.nodes.append(_Node((), None))
        return Tensor(data, self, len(self.nodes) - 1)

    def _record(self, parents, backward) -> int:
        self.nodes.append(_Node(parents, backward))
        return len(self.nodes) - 1

    def backward(self, root: Tensor):
        """Reverse sweep from a scalar root; fills gradients for all nodes."""
        if root.tape is not self:
            raise ValueError("root tensor is not recorded on this tape")
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        grads = [None] * len(self.nodes)
        grads[root.node_id] = np.ones_like(root.data)
        for nid in range(root.node_id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pid is None or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = np.array(pg, dtype=np.float64)
                else:
                    grads[pid] += pg
        self.gradients = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward root w.r.t. a recorded tensor.

        Tensors unreachable from the root get an exact zero gradient.
        """
        if self.gradients is None:
            raise RuntimeError("backward() has not been run on this tape")
        if t.tape is not self:
            raise ValueError("tensor is not recorded on this tape")
        g = self.gradients[t.node_id]
        if g is None:
            return np.zeros_like(t.data)
        return g


def _data(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("operator input contains NaN or Inf")


def _wrap(result, inputs, backward) -> Tensor:
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(result)
    parents = tuple(
        t.node_id if isinstance(t, Tensor) and t.tape is tape else None
        for t in inputs
    )
    nid = tape._record(parents, backward)
    return Tensor(result, tape, nid)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives

def _binary_same_shape(a, b, name):
    ad, bd = _data(a), _data(b)
    if ad.shape != bd.shape:
        raise ShapeError(f"{name}: shapes {ad.shape} and {bd.shape} differ")
    _check_finite(ad, bd)
    return ad, bd


def add(a, b) -> Tensor:
    ad, bd = _binary_same_shape(a, b, "add")
    return _wrap(ad + bd, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    ad, bd = _binary_same_shape(a, b, "sub")
    return _wrap(ad - bd, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    ad, bd = _binary_same_shape(a, b, "mul")
    return _wrap(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    _check_finite(ad, bd)
    return _wrap(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def concat(tensors) -> Tensor:
    """Concatenate two or more tensors along the last axis."""
    if len(tensors) < 2:
        raise ShapeError("concat requires at least two inputs")
    datas = [_data(t) for t in tensors]
    lead = datas[0].shape[:-1]
    for d in datas:
        if d.shape[:-1] != lead:
            raise ShapeError(
                f"concat: leading dims differ: {[d.shape for d in datas]}")
    _check_finite(*datas)
    widths = [d.shape[-1] for d in datas]
    splits = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=-1))

    return _wrap(np.concatenate(datas, axis=-1), tuple(tensors), backward)


def relu(x) -> Tensor:
    xd = _data(x)
    _check_finite(xd)
    mask = xd > 0
    return _wrap(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    xd = _data(x)
    _check_finite(xd)
    t = np.tanh(xd)
    return _wrap(t, (x,), lambda g: (g * (1.0 - t * t),))


def identity(x) -> Tensor:
    xd = _data(x)
    _check_finite(xd)
    return _wrap(xd.copy(), (x,), lambda g: (g,))


def sigmoid(x) -> Tensor:
    xd = _data(x)
    _check_finite(xd)
    s = _sigmoid(xd)
    return _wrap(s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log(x) -> Tensor:
    xd = _data(x)
    _check_finite(xd)
    if np.any(xd <= 0):
        raise ValueError("log: input must be strictly positive")
    return _wrap(np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x) -> Tensor:
    xd = _data(x)
    _check_finite(xd)
    return _wrap(np.logaddexp(0.0, xd), (x,), lambda g: (g * _sigmoid(xd),))


def scale(x, c: float) -> Tensor:
    xd = _data(x)
    _check_finite(xd)
    c = float(c)
    return _wrap(xd * c, (x,), lambda g: (g * c,))


def add_constant(x, c) -> Tensor:
    """Add a constant array (same shape); gradient passes through unchanged."""
    xd = _data(x)
    cd = np.asarray(c, dtype=np.float64)
    if cd.shape != xd.shape:
        raise ShapeError(f"add_constant: shapes {xd.shape} and {cd.shape} differ")
    _check_finite(xd, cd)
    return _wrap(xd + cd, (x,), lambda g: (g,))


def add_bias(x, b) -> Tensor:
    """Row-wise bias add: x is (n, d), b is (d,)."""
    xd, bd = _data(x), _data(b)
    if xd.ndim != 2 or bd.shape != (xd.shape[1],):
        raise ShapeError(f"add_bias: shapes {xd.shape} and {bd.shape}")
    _check_finite(xd, bd)
    return _wrap(xd + bd, (x, b), lambda g: (g, g.sum(axis=0)))


def sum_all(x) -> Tensor:
    xd = _data(x)
    _check_finite(xd)
    return _wrap(np.asarray(xd.sum()), (x,), lambda g: (np.full_like(xd, float(g)),))


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis."""
    xd = _data(x)
    _check_finite(xd)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _wrap(p, (x,), backward)


def gather_rows(table, idx) -> Tensor:
    """Select rows of a 2-D tensor by integer index (duplicates allowed)."""
    td = _data(table)
    idx = np.asarray(idx, dtype=np.int64)
    if td.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {td.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= td.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {td.shape[0]} rows")
    _check_finite(td)

    def backward(g):
        out = np.zeros_like(td)
        np.add.at(out, idx, g)
        return (out,)

    return _wrap(td[idx], (table,), backward)


def take_per_row(x, cols) -> Tensor:
    """Pick one entry per row of a 2-D tensor: out[i] = x[i, cols[i]]."""
    xd = _data(x)
    cols = np.asarray(cols, dtype=np.int64)
    if xd.ndim != 2 or cols.shape != (xd.shape[0],):
        raise ShapeError(f"take_per_row: shapes {xd.shape} and {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= xd.shape[1]):
        raise IndexError(f"take_per_row: column index out of range for width {xd.shape[1]}")
    _check_finite(xd)
    rows = np.arange(xd.shape[0])

    def backward(g):
        out = np.zeros_like(xd)
        out[rows, cols] = g
        return (out,)

    return _wrap(xd[rows, cols], (x,), backward)


def weighted_mixture(p, zs) -> Tensor:
    """Convex combination of K stacked representations.

    p has shape (n, K); each of the K entries of zs has shape (n, d).
    Output row i is sum_k p[i, k] * zs[k][i].
    """
    pd = _data(p)
    zds = [_data(z) for z in zs]
    if pd.ndim != 2 or pd.shape[1] != len(zds):
        raise ShapeError(f"weighted_mixture: p shape {pd.shape} vs {len(zds)} inputs")
    for zd in zds:
        if zd.shape != zds[0].shape or zd.shape[0] != pd.shape[0]:
            raise ShapeError(
                f"weighted_mixture: inconsistent shapes {[z.shape for z in zds]}")
    _check_finite(pd, *zds)
    out = np.zeros_like(zds[0])
    for k, zd in enumerate(zds):
        out += pd[:, k:k + 1] * zd

    def backward(g):
        dp = np.stack([(g * zd).sum(axis=-1) for zd in zds], axis=1)
        dzs = [pd[:, k:k + 1] * g for k in range(len(zds))]
        return (dp, *dzs)

    return _wrap(out, (p, *zs), backward)


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer class targets."""
    ld = _data(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if ld.ndim != 2 or targets.shape != (ld.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: shapes {ld.shape} and {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= ld.shape[1]):
        raise IndexError(
            f"softmax_cross_entropy: target id out of range for {ld.shape[1]} classes")
    _check_finite(ld)
    n = ld.shape[0]
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1)) + ld.max(axis=1)
    loss = np.asarray((lse - ld[np.arange(n), targets]).mean())
    p = np.exp(ld - lse[:, None])

    def backward(g):
        d = p.copy()
        d[np.arange(n), targets] -= 1.0
        return (float(g) * d / n,)

    return _wrap(loss, (logits,), backward)


def binary_cross_entropy(logits, labels) -> Tensor:
    """Mean per-label binary cross-entropy on raw logits with 0/1 labels."""
    ld = _data(logits)
    yd = np.asarray(labels, dtype=np.float64)
    if ld.shape != yd.shape:
        raise ShapeError(f"binary_cross_entropy: shapes {ld.shape} and {yd.shape}")
    if not np.all((yd == 0) | (yd == 1)):
        raise ValueError("binary_cross_entropy: labels must be 0 or 1")
    _check_finite(ld)
    n = ld.size
    loss = np.asarray((np.logaddexp(0.0, ld) - yd * ld).mean())
    s = _sigmoid(ld)

    def backward(g):
        return (float(g) * (s - yd) / n,)

    return _wrap(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# relational message operators

def circ_corr(a, b) -> Tensor:
    """Circular correlation along the last axis (direct O(d^2) summation).

    out[..., k] = sum_i a[..., i] * b[..., (i + k) mod d].  Non-commutative.
    """
    ad, bd = _binary_same_shape(a, b, "circ_corr")
    d = ad.shape[-1]
    out = np.empty_like(ad)
    for k in range(d):
        out[..., k] = (ad * np.roll(bd, -k, axis=-1)).sum(axis=-1)

    def backward(g):
        da = np.zeros_like(ad)
        db = np.zeros_like(bd)
        for k in range(d):
            gk = g[..., k:k + 1]
            da += gk * np.roll(bd, -k, axis=-1)
            db += gk * np.roll(ad, k, axis=-1)
        return (da, db)

    return _wrap(out, (a, b), backward)


def circ_corr_fft(a, b) -> np.ndarray:
    """FFT evaluation of circular correlation (forward only, for cross-checks)."""
    ad, bd = _binary_same_shape(a, b, "circ_corr_fft")
    return np.real(np.fft.ifft(np.conj(np.fft.fft(ad)) * np.fft.fft(bd)))


def complex_rotate(h, phases) -> Tensor:
    """Rotate consecutive pairs of h as complex numbers by the given angles.

    h has even last dimension d; phases has last dimension d/2.  Pair
    (h[2k], h[2k+1]) is multiplied by exp(i * phases[k]), which preserves the
    modulus of every pair by construction.
    """
    hd, pd = _data(h), _data(phases)
    if hd.shape[-1] % 2 != 0:
        raise ShapeError(f"complex_rotate: last dim must be even, got {hd.shape}")
    if pd.shape != hd.shape[:-1] + (hd.shape[-1] // 2,):
        raise ShapeError(f"complex_rotate: shapes {hd.shape} and {pd.shape}")
    _check_finite(hd, pd)
    h0, h1 = hd[..., 0::2], hd[..., 1::2]
    c, s = np.cos(pd), np.sin(pd)
    out = np.empty_like(hd)
    out[..., 0::2] = h0 * c - h1 * s
    out[..., 1::2] = h0 * s + h1 * c

    def backward(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        dh = np.empty_like(hd)
        dh[..., 0::2] = g0 * c + g1 * s
        dh[..., 1::2] = -g0 * s + g1 * c
        dp = g0 * (-h0 * s - h1 * c) + g1 * (h0 * c - h1 * s)
        return (dh, dp)

    return _wrap(out, (h, phases), backward)


AGG_KINDS = ("SUM", "MAX", "MEAN")


def segment_aggregate(messages, targets, num_segments, kind) -> Tensor:
    """Aggregate message rows by target segment (SUM, MAX, or MEAN).

    Empty segments yield the zero row for all kinds.  MAX resolves ties to
    the lowest row index so gradient routing is deterministic.
    """
    md = _data(messages)
    targets = np.asarray(targets, dtype=np.int64)
    if md.ndim != 2 or targets.shape != (md.shape[0],):
        raise ShapeError(f"segment_aggregate: shapes {md.shape} and {targets.shape}")
    if kind not in AGG_KINDS:
        raise ValueError(f"segment_aggregate: unknown kind {kind!r}")
    if targets.size and (targets.min() < 0 or targets.max() >= num_segments):
        raise IndexError(
            f"segment_aggregate: target index out of range for {num_segments} segments")
    _check_finite(md)
    n, d = md.shape
    out = np.zeros((num_segments, d))

    if kind in ("SUM", "MEAN"):
        np.add.at(out, targets, md)
        counts = np.bincount(targets, minlength=num_segments).astype(np.float64)
        if kind == "MEAN":
            nz = counts > 0
            out[nz] /= counts[nz, None]

        def backward(g):
            dm = g[targets]
            if kind == "MEAN":
                dm = dm / counts[targets, None]
            return (dm,)

        return _wrap(out, (messages,), backward)

    # MAX: track per-(segment, feature) winning row for the backward pass
    order = np.argsort(targets, kind="stable")
    bounds = np.searchsorted(targets[order], np.arange(num_segments + 1))
    arg = np.full((num_segments, d), -1, dtype=np.int64)
    cols = np.arange(d)
    for s in range(num_segments):
        rows = order[bounds[s]:bounds[s + 1]]
        if rows.size == 0:
            continue
        sub = md[rows]
        am = np.argmax(sub, axis=0)  # first occurrence = lowest row index
        out[s] = sub[am, cols]
        arg[s] = rows[am]

    def backward(g):
        dm = np.zeros_like(md)
        seg_idx, feat_idx = np.nonzero(arg >= 0)
        np.add.at(dm, (arg[seg_idx, feat_idx], feat_idx), g[seg_idx, feat_idx])
        return (dm,)

    return _wrap(out, (messages,), backward)


# ---------------------------------------------------------------------------
# generic dispatch and verification helpers

_PRIMITIVES = {
    "add": lambda inputs: add(*inputs),
    "sub": lambda inputs: sub(*inputs),
    "mul": lambda inputs: mul(*inputs),
    "matmul": lambda inputs: matmul(*inputs),
    "concat": concat,
    "relu": lambda inputs: relu(*inputs),
    "tanh": lambda inputs: tanh(*inputs),
    "identity": lambda inputs: identity(*inputs),
    "sigmoid": lambda inputs: sigmoid(*inputs),
    "softmax_cross_entropy": lambda inputs: softmax_cross_entropy(*inputs),
    "binary_cross_entropy": lambda inputs: binary_cross_entropy(*inputs),
}


def apply_primitive(kind, inputs) -> Tensor:
    """Apply a named primitive to a list of inputs (see module docs for arity)."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind {kind!r}")
    return _PRIMITIVES[kind](inputs)


def finite_diff_check(fn, params, eps=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn takes one Tensor per entry of params and returns a scalar Tensor.
    The error is |analytic - numeric| / max(1, |analytic|), maximized over
    every coordinate of every parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    tracked = [tape.param(a) for a in arrays]
    root = fn(*tracked)
    tape.backward(root)
    analytic = [tape.grad(t) for t in tracked]

    def eval_at(arrs) -> float:
        return fn(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for pi, base in enumerate(arrays):
        flat = base.reshape(-1)
        for ci in range(flat.size):
            orig = flat[ci]
            flat[ci] = orig + eps
            hi = eval_at(arrays)
            flat[ci] = orig - eps
            lo = eval_at(arrays)
            flat[ci] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[pi].reshape(-1)[ci]
            err = abs(a - numeric) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer

class OptimState:
    """Adam moments with decoupled weight decay, keyed like the parameter dict."""

    def __init__(self, params, lr, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, grads, state: OptimState):
    """One adaptive-moment update (in place); returns (params, state)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(
                f"adam_step: shape mismatch for {k!r}: {p.shape} vs {g.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= state.lr * update
    return params, state
