"""Reverse-mode gradient engine over the primitives the ELBO needs.

The graph is built define-by-run: every op accepts plain numpy arrays
(treated as constants) or :class:`Node` values, and returns a Node as soon
as any input is one.  Code written against these ops therefore runs in two
modes for free: a fast numpy path for evaluation, and a recorded path for
training.

Trainable quantities live in :class:`Parameter` objects that store an
unconstrained array and expose a constrained value through an elementwise
transform (identity, exp, or softplus).  Gradients are always reported in
storage (unconstrained) space.
"""

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from . import numcore
from .numcore import RngStream


class NonScalarLoss(Exception):
    """backward() was handed something that is not a scalar."""


class Node:
    """A value plus the edges needed to pull gradients back to its inputs.

    ``edges`` is a tuple of (parent Node, vjp) pairs where vjp maps the
    output gradient to that parent's gradient contribution.
    """

    __slots__ = ("value", "edges")

    def __init__(self, value, edges=()):
        self.value = np.asarray(value, dtype=float)
        self.edges = edges

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


def value_of(x):
    """The raw numpy value of a Node or array-like."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _is_node(x):
    return isinstance(x, Node)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    g = np.asarray(g, dtype=float)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(value, *edges):
    """Build a Node keeping only the edges whose parent really is a Node."""
    kept = tuple((p, vjp) for p, vjp in edges if _is_node(p))
    return Node(value, kept)


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting)
# ---------------------------------------------------------------------------

def add(a, b):
    if not (_is_node(a) or _is_node(b)):
        return np.add(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    return _make(av + bv,
                 (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    if not (_is_node(a) or _is_node(b)):
        return np.subtract(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    return _make(av - bv,
                 (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    if not (_is_node(a) or _is_node(b)):
        return np.multiply(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    return _make(av * bv,
                 (a, lambda g: _unbroadcast(g * bv, av.shape)),
                 (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    if not (_is_node(a) or _is_node(b)):
        return np.divide(value_of(a), value_of(b))
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _make(out,
                 (a, lambda g: _unbroadcast(g / bv, av.shape)),
                 (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)))


def power(a, k):
    """a ** k for a constant exponent k."""
    if not _is_node(a):
        return value_of(a) ** k
    av = a.value
    return _make(av ** k, (a, lambda g: g * k * av ** (k - 1)))


def exp(a):
    if not _is_node(a):
        return np.exp(value_of(a))
    out = np.exp(a.value)
    return _make(out, (a, lambda g: g * out))


def log(a):
    if not _is_node(a):
        return np.log(value_of(a))
    av = a.value
    return _make(np.log(av), (a, lambda g: g / av))


def sqrt(a):
    if not _is_node(a):
        return np.sqrt(value_of(a))
    out = np.sqrt(a.value)
    return _make(out, (a, lambda g: g * 0.5 / out))


def tanh(a):
    if not _is_node(a):
        return np.tanh(value_of(a))
    out = np.tanh(a.value)
    return _make(out, (a, lambda g: g * (1.0 - out * out)))


def sin(a):
    if not _is_node(a):
        return np.sin(value_of(a))
    av = a.value
    return _make(np.sin(av), (a, lambda g: g * np.cos(av)))


def cos(a):
    if not _is_node(a):
        return np.cos(value_of(a))
    av = a.value
    return _make(np.cos(av), (a, lambda g: -g * np.sin(av)))


def softplus(a):
    """log(1 + e^a), computed stably; derivative is the logistic sigmoid."""
    if not _is_node(a):
        return np.logaddexp(0.0, value_of(a))
    av = a.value
    return _make(np.logaddexp(0.0, av), (a, lambda g: g * expit(av)))


def clip_nonneg(a):
    """max(a, 0) with a strict-positive gradient mask.

    Used to guard squared distances against tiny negative round-off; the
    gradient is blocked exactly where the clip is active.
    """
    if not _is_node(a):
        return np.maximum(value_of(a), 0.0)
    av = a.value
    mask = av > 0.0
    return _make(np.maximum(av, 0.0), (a, lambda g: g * mask))


def pg_mean(a):
    """Autodiff wrapper for numcore.pg_mean (mean of tilted PG(1, c))."""
    if not _is_node(a):
        return numcore.pg_mean(value_of(a))
    av = a.value
    return _make(numcore.pg_mean(av), (a, lambda g: g * numcore.pg_mean_deriv(av)))


def pg_kl(a):
    """Autodiff wrapper for numcore.pg_kl (KL of tilted PG against PG(1,0))."""
    if not _is_node(a):
        return numcore.pg_kl(value_of(a))
    av = a.value
    return _make(numcore.pg_kl(av), (a, lambda g: g * numcore.pg_kl_deriv(av)))


# ---------------------------------------------------------------------------
# reductions and shaping
# ---------------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    if not _is_node(a):
        return np.sum(value_of(a), axis=axis, keepdims=keepdims)
    av = a.value

    def vjp(g):
        g = np.asarray(g, dtype=float)
        if axis is None:
            return np.broadcast_to(g, av.shape).copy() if g.ndim == 0 else g.reshape(av.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _make(np.sum(av, axis=axis, keepdims=keepdims), (a, vjp))


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    if not _is_node(a):
        return value_of(a).reshape(shape)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a, lambda g: np.asarray(g).reshape(old)))


def transpose(a, axes=None):
    if not _is_node(a):
        return np.transpose(value_of(a), axes)
    av = a.value
    if axes is None:
        axes_t = tuple(reversed(range(av.ndim)))
    else:
        axes_t = tuple(axes)
    inv = tuple(np.argsort(axes_t))
    return _make(np.transpose(av, axes_t), (a, lambda g: np.transpose(g, inv)))


def swap_last2(a):
    """Transpose the last two axes (matrix transpose, batch-aware)."""
    av = value_of(a)
    axes = tuple(range(av.ndim - 2)) + (av.ndim - 1, av.ndim - 2)
    return transpose(a, axes) if _is_node(a) else np.transpose(av, axes)


def stack(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)
    if not any(_is_node(p) for p in parts):
        return out

    def edge(i, p):
        return (p, lambda g, i=i: np.take(g, i, axis=axis))

    return _make(out, *(edge(i, p) for i, p in enumerate(parts)))


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(_is_node(p) for p in parts):
        return out
    offsets = np.cumsum([0] + [v.shape[axis] for v in vals])

    def edge(i, p):
        lo, hi = offsets[i], offsets[i + 1]
        sl = tuple(slice(None) if d != (axis % out.ndim) else slice(lo, hi)
                   for d in range(out.ndim))
        return (p, lambda g, sl=sl: np.asarray(g)[sl])

    return _make(out, *(edge(i, p) for i, p in enumerate(parts)))


def take(a, idx):
    """Basic indexing/slicing; gradients scatter-add back into place."""
    if not _is_node(a):
        return value_of(a)[idx]
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _make(av[idx], (a, vjp))


def diag_part(a):
    if not _is_node(a):
        return np.diag(value_of(a))
    av = a.value
    return _make(np.diag(av), (a, lambda g: np.diag(np.asarray(g))))


def diag_embed(v):
    if not _is_node(v):
        return np.diag(value_of(v))
    vv = v.value
    return _make(np.diag(vv), (v, lambda g: np.diag(np.asarray(g))))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batch broadcasting; operands must be >= 2-d."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    if not (_is_node(a) or _is_node(b)):
        return av @ bv
    out = av @ bv
    return _make(
        out,
        (a, lambda g: _unbroadcast(np.asarray(g) @ _swapv(bv), av.shape)),
        (b, lambda g: _unbroadcast(_swapv(av) @ np.asarray(g), bv.shape)),
    )


def _swapv(x):
    return np.swapaxes(x, -1, -2)


def cholesky(a, max_jitter=1e-3):
    """Lower Cholesky factor as a graph op.

    The jitter chosen during the forward pass is treated as a constant of
    the backward pass.  Returns (L, jitter); L is a Node when the input is.
    """
    if not _is_node(a):
        f = numcore.cholesky(value_of(a), max_jitter)
        return f.L, f.jitter
    f = numcore.cholesky(a.value, max_jitter)
    L = f.L

    def vjp(g):
        P = np.tril(L.T @ np.asarray(g))
        P -= 0.5 * np.diag(np.diag(P))
        W = solve_triangular(L, P, lower=True, trans=1)
        X = solve_triangular(L, W.T, lower=True, trans=1).T
        return 0.5 * (X + X.T)

    return _make(L, (a, vjp)), f.jitter


def tri_solve(L, B, transpose=False):
    """Graph-aware triangular solve against a lower factor."""
    Lv, Bv = value_of(L), value_of(B)
    if not (_is_node(L) or _is_node(B)):
        return numcore.tri_solve(Lv, Bv, transpose=transpose)
    squeeze = Bv.ndim == 1
    B2 = Bv.reshape(-1, 1) if squeeze else Bv
    X = solve_triangular(Lv, B2, lower=True, trans=1 if transpose else 0)

    def vjp_B(g):
        g2 = np.asarray(g).reshape(-1, 1) if squeeze else np.asarray(g)
        out = solve_triangular(Lv, g2, lower=True, trans=0 if transpose else 1)
        return out[:, 0] if squeeze else out

    def vjp_L(g):
        g2 = np.asarray(g).reshape(-1, 1) if squeeze else np.asarray(g)
        if transpose:
            Bbar = solve_triangular(Lv, g2, lower=True, trans=0)
            return -np.tril(X @ Bbar.T)
        Bbar = solve_triangular(Lv, g2, lower=True, trans=1)
        return -np.tril(Bbar @ X.T)

    return _make(X[:, 0] if squeeze else X, (L, vjp_L), (B, vjp_B))


def cho_solve(L, B):
    """(L L^T)^{-1} B via two triangular solves."""
    return tri_solve(L, tri_solve(L, B), transpose=True)


# ---------------------------------------------------------------------------
# bilinear image sampling
# ---------------------------------------------------------------------------

def bilinear_sample(images, grid):
    """Sample batched images at normalized grid locations.

    ``images`` is (B, H, W); ``grid`` is (B, Ho, Wo, 2) holding (x, y)
    coordinates in [-1, 1] with pixel i of an axis of length n sitting at
    -1 + 2 i/(n-1) (corner-aligned).  Out-of-range locations read as zero.
    Differentiable in the grid and, when needed, in the images.
    """
    iv, gv = value_of(images), value_of(grid)
    B, H, W = iv.shape
    gx = (gv[..., 0] + 1.0) * 0.5 * (W - 1)
    gy = (gv[..., 1] + 1.0) * 0.5 * (H - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    bidx = np.arange(B).reshape((B,) + (1,) * (gv.ndim - 2))

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xc, yc = x0 + dx, y0 + dy
            inside = (xc >= 0) & (xc < W) & (yc >= 0) & (yc < H)
            v = iv[bidx, np.clip(yc, 0, H - 1), np.clip(xc, 0, W - 1)] * inside
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            corners.append((v, w, xc, yc, inside))
    out = sum(v * w for v, w, _, _, _ in corners)

    if not (_is_node(images) or _is_node(grid)):
        return out

    (v00, _, _, _, m00), (v10, _, x10, _, m10), (v01, _, _, y01, m01), (v11, _, x11, y11, m11) = corners

    def vjp_grid(g):
        g = np.asarray(g)
        dfx = ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy) * g
        dfy = ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx) * g
        gg = np.empty_like(gv)
        gg[..., 0] = dfx * 0.5 * (W - 1)
        gg[..., 1] = dfy * 0.5 * (H - 1)
        return gg

    def vjp_images(g):
        g = np.asarray(g)
        gi = np.zeros_like(iv)
        for v, w, xc, yc, ins in corners:
            np.add.at(
                gi,
                (np.broadcast_to(bidx, xc.shape)[ins],
                 np.clip(yc, 0, H - 1)[ins],
                 np.clip(xc, 0, W - 1)[ins]),
                (g * w)[ins],
            )
        return gi

    return _make(out, (grid, vjp_grid), (images, vjp_images))


# ---------------------------------------------------------------------------
# parameters, contexts, backward, and the finite-difference verifier
# ---------------------------------------------------------------------------

_TRANSFORMS = ("identity", "exp", "softplus")


def _softplus_inverse(y):
    # clamp keeps an exact-zero input finite (softplus(-745) rounds back to 0.0)
    y = np.maximum(np.asarray(y, dtype=float), 1e-300)
    with np.errstate(over="ignore", divide="ignore"):
        out = np.where(y > 30.0, y + np.log1p(-np.exp(-np.minimum(y, 700.0))),
                       np.log(np.expm1(np.minimum(y, 30.0))))
    return out


class Parameter:
    """A named trainable tensor stored in unconstrained space.

    ``value`` at construction is given in constrained space and converted
    through the inverse transform; gradients and optimiser updates operate
    on ``raw`` directly.
    """

    def __init__(self, name, value, transform="identity", trainable=True):
        if transform not in _TRANSFORMS:
            raise ValueError(f"unknown transform {transform!r}")
        self.name = name
        self.transform = transform
        self.trainable = trainable
        self.raw = self._inverse(np.asarray(value, dtype=float))

    @property
    def raw(self):
        return self._raw

    @raw.setter
    def raw(self, v):
        # always a fresh float ndarray (0-d for scalars), never a numpy
        # scalar: optimiser updates and finite-difference probes mutate
        # entries through flat views
        self._raw = np.array(v, dtype=float)

    def _inverse(self, v):
        if self.transform == "identity":
            return v
        if self.transform == "exp":
            return np.log(v)
        return _softplus_inverse(v)

    def _forward(self, raw):
        if self.transform == "identity":
            return raw
        if self.transform == "exp":
            return np.exp(raw)
        return np.logaddexp(0.0, raw)

    def value(self):
        """Constrained numpy value."""
        return self._forward(self.raw)

    def set_value(self, v):
        self.raw = self._inverse(np.asarray(v, dtype=float))

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.raw.shape}, transform={self.transform})"


class GradientContext:
    """Owns the leaf nodes of one recorded computation.

    Each Parameter gets a single storage-space leaf per context, so all
    uses of it share gradient accumulation; :meth:`value` applies the
    constraining transform inside the graph.
    """

    def __init__(self):
        self._leaves = {}
        self._values = {}

    def leaf(self, param):
        entry = self._leaves.get(id(param))
        if entry is None:
            entry = (param, Node(param.raw))
            self._leaves[id(param)] = entry
        return entry[1]

    def value(self, param):
        node = self._values.get(id(param))
        if node is None:
            leaf = self.leaf(param)
            if param.transform == "identity":
                node = leaf
            elif param.transform == "exp":
                node = exp(leaf)
            else:
                node = softplus(leaf)
            self._values[id(param)] = node
        return node

    def params(self):
        return [param for param, _ in self._leaves.values()]


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.edges:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, ctx):
    """Run reverse accumulation from a scalar loss.

    Returns {parameter name: gradient array in storage space} covering
    exactly the trainable parameters whose values partake in the loss.
    """
    if not isinstance(loss, Node):
        raise NonScalarLoss("loss is not part of the recorded graph")
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.value.shape}")

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.edges:
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib

    table = {}
    for param, leaf in ctx._leaves.values():
        if not param.trainable:
            continue
        g = grads.get(id(leaf))
        if g is None:
            continue
        table[param.name] = np.asarray(g, dtype=float).reshape(param.raw.shape)
    return table


def check_grad(fn, params, seed=0, eps=1e-3, max_entries=None):
    """Compare reverse-mode gradients against central finite differences.

    ``fn(ctx, seed)`` must rebuild the loss deterministically for a given
    seed.  Every trainable parameter is probed entrywise (or on a fixed
    pseudo-random subset of ``max_entries`` entries for big tensors) and
    the worst relative discrepancy

        max_i |g_i - fd_i| / max(1e-8, |g_i| + |fd_i|)

    is returned.
    """
    ctx = GradientContext()
    analytic = backward(fn(ctx, seed), ctx)

    worst = 0.0
    for p in params:
        if not p.trainable:
            continue
        g = analytic.get(p.name)
        if g is None:
            g = np.zeros_like(p.raw)
        flat_g = np.asarray(g).ravel()
        n = p.raw.size
        if max_entries is not None and n > max_entries:
            u = numcore.draw(RngStream(seed, ("check_grad", p.name)), "uniform01", n)
            idx = np.argsort(u)[:max_entries]
        else:
            idx = np.arange(n)
        raw_flat = p.raw.reshape(-1)
        for i in idx:
            keep = raw_flat[i]
            raw_flat[i] = keep + eps
            f_hi = float(value_of(fn(GradientContext(), seed)))
            raw_flat[i] = keep - eps
            f_lo = float(value_of(fn(GradientContext(), seed)))
            raw_flat[i] = keep
            fd = (f_hi - f_lo) / (2.0 * eps)
            rel = abs(flat_g[i] - fd) / max(1e-8, abs(flat_g[i]) + abs(fd))
            worst = max(worst, rel)
    return worst
