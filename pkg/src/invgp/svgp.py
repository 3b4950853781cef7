"""Sparse variational GP with inducing variables placed in the base process.

The inducing inputs Z live in the domain of the non-invariant process g, so
K_uu is a plain RBF Gram matrix while the data-side covariances k_f, k_fu
involve the augmentation orbit.  When those are intractable they are
replaced by the unbiased Monte Carlo estimators of the kernels module, all
driven by one shared set of augmented samples per datapoint:

    mu_n     = kfu_hat^T Kuu^{-1} m
    mu_n^2   = double-estimate of (g alpha)(g alpha)'   (NOT mu_n * mu_n)
    sigma_n^2= kf_hat - double-estimate of g (Kuu^{-1} - Kuu^{-1} S Kuu^{-1}) g'

Because the Gaussian-likelihood bound is affine in these three quantities,
plugging in unbiased estimates keeps the whole ELBO estimate unbiased.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .augment import draw_batch, orbit_points
from .kernels import k_rbf_matrix
from .numcore import CholFactor, NotPositiveDefinite, RngStream, cholesky, tri_solve


class WrongLikelihood(Exception):
    """An ELBO was requested for a likelihood the model does not have."""


class InducingSet:
    """M trainable inducing inputs in the g-domain (raw input space)."""

    def __init__(self, Z, name="inducing/Z", trainable=True):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[0] < 1:
            raise ValueError("need at least one inducing input")
        self.Z = Parameter(name, Z, "identity", trainable=trainable)

    @property
    def M(self):
        return self.Z.raw.shape[0]

    def values(self, ctx=None):
        return self.Z.value() if ctx is None else ctx.value(self.Z)


class VariationalGaussian:
    """q(u) = N(m, L_q L_q^T) with a softplus-positive diagonal on L_q.

    The raw storage is a full MxM array; only its strict lower triangle and
    the softplus of its diagonal enter the factor, so every raw entry is a
    free parameter and positive-definiteness holds by construction.
    """

    def __init__(self, m, raw_L, name="q"):
        self.m = m
        self.raw_L = raw_L
        self.name = name

    @classmethod
    def create(cls, M, scale=0.03, name="q"):
        """Fresh zero-mean q with Sigma_q = scale^2 * identity."""
        m = Parameter(f"{name}/m", np.zeros(M), "identity")
        raw = np.zeros((M, M))
        raw[np.diag_indices(M)] = ad._softplus_inverse(np.full(M, scale))
        return cls(m, Parameter(f"{name}/L_raw", raw, "identity"), name)

    @property
    def M(self):
        return self.m.raw.shape[0]

    def mean(self, ctx=None):
        return self.m.value() if ctx is None else ctx.value(self.m)

    def L_matrix(self, ctx=None):
        """The lower-triangular factor, as a graph node under a context."""
        M = self.M
        strict = np.tril(np.ones((M, M)), -1)
        raw = self.raw_L.value() if ctx is None else ctx.value(self.raw_L)
        lower = ad.mul(raw, strict)
        diag = ad.softplus(ad.diag_part(raw))
        return ad.add(lower, ad.diag_embed(diag))

    def cov(self):
        L = self.L_matrix()
        return L @ L.T

    def params(self):
        return [self.m, self.raw_L]


@dataclass
class MomentEstimates:
    """Per-datapoint posterior moment estimates, one column per output.

    mu_sq is its own unbiased estimate of mu_n^2, not mu*mu; it and var may
    dip negative in finite samples and consumers must tolerate that.  kf is
    the double estimate of the invariant kernel diagonal k_f(x,x), shape
    (B,): it is shared by every output column.
    """

    mu: object
    mu_sq: object
    var: object
    kf: object = None


class GpModel:
    """An invariant sparse GP: kernel spec, inducing set, q(u) per output."""

    def __init__(self, kernel, inducing, qs, likelihood="gaussian",
                 noise_variance=0.1, C=None, sample_replace=False):
        if likelihood not in ("gaussian", "logistic_pg"):
            raise ValueError(f"unknown likelihood {likelihood!r}")
        self.kernel = kernel
        self.inducing = inducing
        self.qs = list(qs)
        self.C = len(self.qs) if C is None else C
        if len(self.qs) != self.C:
            raise ValueError("need one variational Gaussian per output")
        self.likelihood = likelihood
        self.noise = (Parameter("likelihood/noise_variance",
                                float(noise_variance), "softplus")
                      if likelihood == "gaussian" else None)
        self.sample_replace = sample_replace

    @classmethod
    def build(cls, kernel, Z_init, C=1, likelihood="gaussian",
              noise_variance=0.1, q_scale=None, sample_replace=False):
        inducing = InducingSet(Z_init)
        if q_scale is None:
            q_scale = np.sqrt(1e-3 * float(kernel.base.variance.value()))
        qs = [VariationalGaussian.create(inducing.M, q_scale, name=f"q{c}")
              for c in range(C)]
        return cls(kernel, inducing, qs, likelihood, noise_variance,
                   sample_replace=sample_replace)

    def params(self):
        out = [self.inducing.Z]
        for q in self.qs:
            out.extend(q.params())
        out.extend(self.kernel.base.params())
        if self.noise is not None:
            out.append(self.noise)
        out.extend(self.kernel.sampler.params())
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise ValueError("trainable parameter names must be unique")
        return out


# ---------------------------------------------------------------------------
# covariance plumbing
# ---------------------------------------------------------------------------

def _check_distinct_gram(K, variance):
    """Reject coincident inducing inputs (they make K_uu exactly singular).

    Works off the Gram matrix itself: an off-diagonal entry that rounds to
    the full variance means the two rows are identical to within float
    resolution, which jitter would mask rather than fix.
    """
    Kv = np.array(ad.value_of(K), copy=True)
    np.fill_diagonal(Kv, -np.inf)
    if np.any(Kv >= variance):
        raise NotPositiveDefinite("duplicate inducing inputs make K_uu singular")


def kuu(Z, base):
    """K_uu = k_g(Z, Z') with its jittered Cholesky factor."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    K = k_rbf_matrix(Z, Z, base)
    _check_distinct_gram(K, float(base.variance.value()))
    return K, cholesky(K)


def _kuu_graph(model, ctx):
    """Graph-mode K_uu factorisation; returns (L node, jitter used)."""
    Zv = model.inducing.values(ctx)
    K = k_rbf_matrix(Zv, Zv, model.kernel.base, ctx)
    _check_distinct_gram(K, float(ad.value_of(ctx.value(model.kernel.base.variance))))
    return ad.cholesky(K)


def kl_qu(q, factor, ctx=None):
    """KL[q(u) || N(0, K_uu)], graph-aware.

    ``factor`` is a CholFactor, a plain lower-triangular array, or a graph
    node of one.
    """
    L = factor.L if isinstance(factor, CholFactor) else factor
    m = q.mean(ctx)
    Lq = q.L_matrix(ctx)
    M = q.M
    A = ad.tri_solve(L, Lq)                      # trace term via Frobenius norm
    w = ad.tri_solve(L, m)
    trace = ad.sum_(ad.mul(A, A))
    mahal = ad.sum_(ad.mul(w, w))
    logdet_k = ad.mul(ad.sum_(ad.log(ad.diag_part(L))), 2.0)
    logdet_q = ad.mul(ad.sum_(ad.log(ad.diag_part(Lq))), 2.0)
    out = ad.mul(ad.add(ad.add(trace, mahal), ad.sub(logdet_k, logdet_q)), 0.5)
    out = ad.add(out, -0.5 * M)
    return out if isinstance(out, ad.Node) else float(out)


# ---------------------------------------------------------------------------
# augmented-sample machinery
# ---------------------------------------------------------------------------

def _pair_weights(model, S):
    """(off-diagonal, diagonal) weights of the double estimator."""
    sampler = model.kernel.sampler
    if sampler.kind == "finite_orbit" and not model.sample_replace:
        P = sampler.P
        return (P - 1) / (P * S * (S - 1)), 1.0 / (P * S)
    return 1.0 / (S * (S - 1)), 0.0


def _augmented_batch(X, model, stream, S, ctx=None):
    """Draw the shared per-point sample sets for a batch, plus pair weights.

    A full-orbit request (finite orbit, S = P, without replacement) skips
    random sampling and enumerates the orbit in a canonical row order, so
    exhaustive mode is deterministic and invariant under orbit maps.
    """
    sampler = model.kernel.sampler
    if (sampler.kind == "finite_orbit" and not model.sample_replace
            and S == sampler.P):
        pts = np.stack([np.stack([np.asarray(p, dtype=float)
                                  for p in orbit_points(x, sampler.orbit)])
                        for x in np.asarray(X, dtype=float)])
        # canonical order: lexicographic by row, so any orbit rotation of
        # the input yields the identical stack
        out = np.empty_like(pts)
        for b in range(pts.shape[0]):
            order = np.lexsort(pts[b].T[::-1])
            out[b] = pts[b][order]
        aug = out
    else:
        aug = draw_batch(X, sampler, S, stream, ctx=ctx,
                         replace=model.sample_replace)
    a, b = _pair_weights(model, S)
    return aug, a, b


def moments(X, model, stream, S=None, ctx=None):
    """Unbiased per-point moment estimates for a batch of inputs.

    All three estimates for a datapoint are computed from the same set of
    S augmented samples (drawn from ``stream``), as the estimator theory
    requires.  Returns (B, C) arrays, or graph nodes under a context.
    """
    X = np.asarray(X, dtype=float)
    B, D = X.shape
    S = model.kernel.S if S is None else S
    aug, w_off, w_diag = _augmented_batch(X, model, stream, S, ctx)
    L, _ = _kuu_graph(model, ctx) if ctx is not None else _kuu_values(model)
    base = model.kernel.base

    flat = ad.reshape(aug, (B * S, D))
    G = k_rbf_matrix(flat, model.inducing.values(ctx), base, ctx)   # (B*S, M)

    alphas = ad.stack([ad.cho_solve(L, ad.reshape(q.mean(ctx), (q.M, 1)))
                       for q in model.qs], axis=-1)
    alphas = ad.reshape(alphas, (model.inducing.M, model.C))
    V = ad.reshape(ad.matmul(G, alphas), (B, S, model.C))           # (B, S, C)

    sum_v = ad.sum_(V, axis=1)                                      # (B, C)
    sum_v2 = ad.sum_(ad.mul(V, V), axis=1)
    mu = ad.div(sum_v, float(S))
    off_vv = ad.sub(ad.mul(sum_v, sum_v), sum_v2)
    mu_sq = ad.add(ad.mul(off_vv, w_off), ad.mul(sum_v2, w_diag))

    # hat k_f(x, x): double estimate over base-kernel pairs
    Kp = k_rbf_matrix(aug, aug, base, ctx)                          # (B, S, S)
    eye = np.eye(S)
    diag_k = ad.sum_(ad.mul(Kp, eye), axis=(-1, -2))
    tot_k = ad.sum_(Kp, axis=(-1, -2))
    kf_hat = ad.add(ad.mul(ad.sub(tot_k, diag_k), w_off), ad.mul(diag_k, w_diag))

    # trace term: pairs of g^T (Kuu^{-1} - Kuu^{-1} Sigma_q Kuu^{-1}) g'
    Gt = ad.swap_last2(G)
    PG = ad.cho_solve(L, Gt)                                        # (M, B*S)
    U = ad.swap_last2(ad.reshape(sum_g(G, B, S), (B, model.inducing.M)))
    PU = ad.cho_solve(L, U)                                         # (M, B)
    quad_all = ad.sum_(ad.mul(U, PU), axis=0)                       # (B,)
    diag_all = ad.reshape(ad.sum_(ad.mul(Gt, PG), axis=0), (B, S))
    diag_all = ad.sum_(diag_all, axis=1)                            # (B,)

    var_cols = []
    for c, q in enumerate(model.qs):
        Lq = q.L_matrix(ctx)
        qU = ad.matmul(ad.swap_last2(Lq), PU)                       # (M, B)
        qG = ad.matmul(ad.swap_last2(Lq), PG)                       # (M, B*S)
        quad_c = ad.sub(quad_all, ad.sum_(ad.mul(qU, qU), axis=0))
        diag_c = ad.sub(diag_all,
                        ad.sum_(ad.reshape(ad.sum_(ad.mul(qG, qG), axis=0),
                                           (B, S)), axis=1))
        off_c = ad.sub(quad_c, diag_c)
        var_cols.append(ad.sub(kf_hat, ad.add(ad.mul(off_c, w_off),
                                              ad.mul(diag_c, w_diag))))
    var = ad.swap_last2(ad.stack(var_cols, axis=0))
    var = ad.reshape(var, (B, model.C))
    return MomentEstimates(mu, mu_sq, var, kf_hat)


def sum_g(G, B, S):
    """Sum the S sample rows of each datapoint: (B*S, M) -> (B, M)."""
    M = ad.value_of(G).shape[-1]
    return ad.sum_(ad.reshape(G, (B, S, M)), axis=1)


def _kuu_values(model):
    Z = model.inducing.Z.value()
    K = k_rbf_matrix(Z, Z, model.kernel.base)
    _check_distinct_gram(K, float(model.kernel.base.variance.value()))
    f = cholesky(K)
    return f.L, f.jitter


# ---------------------------------------------------------------------------
# the Gaussian-likelihood bound
# ---------------------------------------------------------------------------

def _as_targets(y, C):
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        if C != 1:
            raise ValueError("1-d targets require a single-output model")
        return y[:, None]
    if y.shape[1] != C:
        raise ValueError(f"targets have {y.shape[1]} columns, model has {C} outputs")
    return y


def elbo_gaussian(X, y, model, stream, n_total=None, S=None, ctx=None):
    """Minibatch estimate of the Gaussian-likelihood ELBO.

    Per point and output the bound contributes
        -(1/2) log(2 pi s2) - (y^2 - 2 y mu + mu^2 + var) / (2 s2)
    with the estimated moments substituted; the sum is scaled by N/batch
    and the KL of every output's q(u) is subtracted.  Affine dependence on
    the moment estimates keeps the whole expression unbiased.
    """
    if model.likelihood != "gaussian":
        raise WrongLikelihood(f"elbo_gaussian on a {model.likelihood} model")
    X = np.asarray(X, dtype=float)
    Y = _as_targets(y, model.C)
    B = X.shape[0]
    n_total = B if n_total is None else n_total

    mom = moments(X, model, stream, S=S, ctx=ctx)
    s2 = model.noise.value() if ctx is None else ctx.value(model.noise)

    quad = ad.add(ad.sub(ad.mul(Y, Y), ad.mul(2.0 * Y, mom.mu)),
                  ad.add(mom.mu_sq, mom.var))
    per_point = ad.sub(ad.mul(ad.log(ad.mul(s2, 2.0 * np.pi)), -0.5),
                       ad.div(quad, ad.mul(s2, 2.0)))
    lik = ad.mul(ad.sum_(per_point), n_total / B)

    L, _ = _kuu_graph(model, ctx) if ctx is not None else _kuu_values(model)
    kl = 0.0
    for q in model.qs:
        kl = ad.add(kl, kl_qu(q, L, ctx))
    out = ad.sub(lik, kl)
    return out if isinstance(out, ad.Node) else float(out)


def predict(Xstar, model, S_pred=50, stream=None):
    """Plug-in predictive mean and variance per output, (B, C) each.

    Uses S_pred augmentation samples (capped at the orbit size for finite
    orbits, where S_pred = P makes the prediction exact and deterministic);
    variances are floored at 1e-12 and, under the Gaussian likelihood, the
    noise variance is added.
    """
    if stream is None:
        stream = RngStream(0, ("predict",))
    sampler = model.kernel.sampler
    if sampler.kind == "finite_orbit" and not model.sample_replace:
        S_pred = min(S_pred, sampler.P)
    mom = moments(np.asarray(Xstar, dtype=float), model, stream, S=S_pred)
    var = np.maximum(mom.var, 1e-12)
    if model.likelihood == "gaussian":
        var = var + float(model.noise.value())
    return mom.mu, var


# ---------------------------------------------------------------------------
# dense oracles
# ---------------------------------------------------------------------------

def rbf_gram_fn(params):
    """Gram-matrix callable for the plain RBF kernel."""
    return lambda A, B: k_rbf_matrix(np.atleast_2d(A), np.atleast_2d(B), params)


def kf_exact_gram_fn(spec):
    """Gram-matrix callable for the exact finite-orbit invariant kernel."""
    def fn(A, B):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        OA = np.stack([np.stack([np.asarray(p, dtype=float)
                                 for p in orbit_points(a, spec.sampler.orbit)])
                       for a in A])
        OB = np.stack([np.stack([np.asarray(p, dtype=float)
                                 for p in orbit_points(b, spec.sampler.orbit)])
                       for b in B])
        na, P, D = OA.shape
        nb = OB.shape[0]
        K = k_rbf_matrix(OA.reshape(na * P, D), OB.reshape(nb * P, D), spec.base)
        return K.reshape(na, P, nb, P).mean(axis=(1, 3))
    return fn


def exact_lml(X, y, kernel_fn, noise_variance):
    """Dense log marginal likelihood oracle for small N."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    N = X.shape[0]
    K = kernel_fn(X, X) + noise_variance * np.eye(N)
    f = cholesky(K)
    w = tri_solve(f, y)
    return float(-0.5 * w @ w - 0.5 * f.log_det - 0.5 * N * np.log(2.0 * np.pi))


def _gaussian_logpdf(y, mean, cov):
    f = cholesky(cov)
    w = tri_solve(f, y - mean)
    return float(-0.5 * w @ w - 0.5 * f.log_det
                 - 0.5 * y.size * np.log(2.0 * np.pi))


def chunked_lml(X, y, kernel_fn, noise_variance, chunks):
    """Log marginal likelihood split into sequential chunk conditionals.

    ``chunks`` lists the chunk sizes, in data order, summing to N.  Entry c
    is log p(y_c | y_{<c}) computed through the explicit conditional
    Gaussian, so the decomposition checks exact_lml non-circularly.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    N = X.shape[0]
    if sum(chunks) != N or any(c < 1 for c in chunks):
        raise ValueError("chunks must be positive sizes partitioning the data")
    out = []
    start = 0
    for size in chunks:
        stop = start + size
        Xc, yc = X[start:stop], y[start:stop]
        Kcc = kernel_fn(Xc, Xc) + noise_variance * np.eye(size)
        if start == 0:
            out.append(_gaussian_logpdf(yc, np.zeros(size), Kcc))
        else:
            Xp, yp = X[:start], y[:start]
            Kpp = kernel_fn(Xp, Xp) + noise_variance * np.eye(start)
            Kcp = kernel_fn(Xc, Xp)
            fp = cholesky(Kpp)
            W = tri_solve(fp, Kcp.T)            # L^{-1} K_pc
            wy = tri_solve(fp, yp)
            mean = W.T @ wy
            cov = Kcc - W.T @ W
            out.append(_gaussian_logpdf(yc, mean, cov))
        start = stop
    return out
