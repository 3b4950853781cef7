"""The RBF base kernel and invariant kernels built from augmentation orbits.

An invariant function is modelled as f(x) = E_{p(x_a|x)}[g(x_a)] with g a
GP under an RBF kernel k_g.  For finite orbits of size P that expectation
is the uniform orbit average, giving the exact kernels

    k_f(x, x')  = (1/P^2) sum_a sum_a' k_g(x_a, x'_a')
    k_fu(x, z)  = (1/P)   sum_a        k_g(x_a, z)

When the orbit is infinite (or just large), both are replaced by unbiased
Monte Carlo estimators over a shared set of augmented samples; the double
estimator re-weights pair terms so products of estimates stay unbiased.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .augment import draw_batch, orbit_points
from .numcore import DimensionMismatch


class NotFiniteOrbit(Exception):
    """An exact orbit kernel was requested from a continuous sampler."""


class TooFewSamples(Exception):
    """The double estimator needs at least two samples."""


class RbfParams:
    """Variance and lengthscale of the squared-exponential base kernel.

    Both are kept positive through exp storage.  The lengthscale is a
    single shared scalar by default; passing a vector turns on
    per-dimension scaling.
    """

    def __init__(self, variance=1.0, lengthscale=1.0, name="rbf"):
        self.variance = Parameter(f"{name}/variance", float(variance), "exp")
        ls = np.asarray(lengthscale, dtype=float)
        self.lengthscale = Parameter(f"{name}/lengthscale",
                                     ls if ls.ndim else float(ls), "exp")

    def params(self):
        return [self.variance, self.lengthscale]


@dataclass(frozen=True)
class InvariantKernelSpec:
    """An invariant kernel: base kernel, augmentation sampler, sample count."""

    base: RbfParams
    sampler: object
    S: int = 2
    convention: str = "expectation"

    def __post_init__(self):
        if self.S < 2:
            raise ValueError("S must be at least 2 for the double estimator")
        if self.convention != "expectation":
            raise ValueError(f"unknown convention {self.convention!r}")


@dataclass(frozen=True)
class SampleSet:
    """The augmented copies of one input used for one estimator evaluation.

    mode is "iid" or "without_replacement"; the latter carries the orbit
    size P and requires S <= P with distinct sampled indices.
    """

    x: np.ndarray
    augmented: np.ndarray
    mode: str = "iid"
    P: int = None

    def __post_init__(self):
        aug = np.atleast_2d(np.asarray(self.augmented, dtype=float))
        object.__setattr__(self, "augmented", aug)
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        if self.mode not in ("iid", "without_replacement"):
            raise ValueError(f"unknown sample mode {self.mode!r}")
        if self.mode == "without_replacement":
            if self.P is None:
                raise ValueError("without_replacement mode needs the orbit size P")
            if self.S > self.P:
                raise ValueError(f"S={self.S} exceeds orbit size P={self.P}")

    @property
    def S(self):
        return self.augmented.shape[0]


def draw_sample_set(x, sampler, S, stream, replace=False):
    """Draw one SampleSet for x, honouring the sampler's default mode.

    Finite orbits sample without replacement unless ``replace`` is set;
    continuous samplers always draw iid.
    """
    x = np.asarray(x, dtype=float)
    aug = draw_batch(x[None, :], sampler, S, stream, replace=replace)[0]
    if sampler.kind == "finite_orbit" and not replace:
        return SampleSet(x, aug, "without_replacement", sampler.P)
    return SampleSet(x, aug, "iid")


# ---------------------------------------------------------------------------
# base kernel
# ---------------------------------------------------------------------------

def k_rbf_matrix(X, Y, params, ctx=None):
    """Gram matrix of the RBF base kernel, graph-aware in the parameters."""
    Xv, Yv = ad.value_of(X), ad.value_of(Y)
    if Xv.shape[-1] != Yv.shape[-1]:
        raise DimensionMismatch(
            f"inputs have dimensions {Xv.shape[-1]} and {Yv.shape[-1]}")
    if ctx is None:
        v = params.variance.value()
        ls = params.lengthscale.value()
    else:
        v = ctx.value(params.variance)
        ls = ctx.value(params.lengthscale)
    Xs = ad.div(X, ls)
    Ys = ad.div(Y, ls)
    xn = ad.sum_(ad.mul(Xs, Xs), axis=-1)
    yn = ad.sum_(ad.mul(Ys, Ys), axis=-1)
    cross = ad.matmul(Xs, ad.swap_last2(Ys))
    my = Yv.shape[-2]
    sq = ad.add(ad.add(ad.reshape(xn, Xv.shape[:-1] + (1,)),
                       ad.reshape(yn, Yv.shape[:-2] + (1, my))),
                ad.mul(cross, -2.0))
    return ad.mul(v, ad.exp(ad.mul(ad.clip_nonneg(sq), -0.5)))


def k_rbf(x, y, params):
    """variance * exp(-||x - y||^2 / (2 lengthscale^2)) for a single pair."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return float(k_rbf_matrix(x[None, :], y[None, :], params)[0, 0])


# ---------------------------------------------------------------------------
# exact invariant kernels on finite orbits
# ---------------------------------------------------------------------------

def _orbit_stack(x, spec):
    sampler = spec.sampler
    if sampler.kind != "finite_orbit":
        raise NotFiniteOrbit(f"sampler kind {sampler.kind!r} has no finite orbit")
    return np.stack([np.asarray(p, dtype=float)
                     for p in orbit_points(np.asarray(x, dtype=float), sampler.orbit)])


def kf_exact(x, xp, spec):
    """Exact invariant kernel: mean of k_g over both full orbits."""
    A = _orbit_stack(x, spec)
    B = _orbit_stack(xp, spec)
    return float(np.mean(k_rbf_matrix(A, B, spec.base)))


def kfu_exact(x, z, spec):
    """Exact cross-covariance of f(x) with the base process at z."""
    A = _orbit_stack(x, spec)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return float(np.mean(k_rbf_matrix(A, z[None, :], spec.base)))


# ---------------------------------------------------------------------------
# Monte Carlo estimators
# ---------------------------------------------------------------------------

def kfu_estimate(samples, Z, base, ctx=None):
    """Unbiased estimate of k_fu(x, z_m) for every inducing input.

    The sample mean (1/S) sum_s k_g(x_s, z_m) targets the expectation
    convention in both sampling modes.
    """
    K = k_rbf_matrix(samples.augmented, Z, base, ctx)
    return ad.mean(K, axis=0)


def double_estimate(samples, r):
    """Unbiased estimate of the double expectation of a pair function.

    ``r`` holds the S x S matrix of pair values r(x_s, x_s').  In iid mode
    the diagonal is dropped:

        (1/(S(S-1))) sum_{s != s'} r_{s s'}

    In without-replacement mode over an orbit of size P both parts are
    re-weighted so the estimator is unbiased for the full double sum
    (1/P^2) sum_{a,a'} r, diagonal included:

        (P-1)/(P S (S-1)) sum_{s != s'} r_{s s'}  +  1/(P S) sum_s r_{s s}
    """
    S = samples.S
    if S < 2:
        raise TooFewSamples("double estimator needs S >= 2")
    rv = ad.value_of(r)
    if rv.shape != (S, S):
        raise ValueError(f"pair values must be {S}x{S}, got {rv.shape}")
    diag = ad.sum_(ad.diag_part(r))
    off = ad.sub(ad.sum_(r), diag)
    if samples.mode == "iid":
        out = ad.div(off, S * (S - 1))
    else:
        P = samples.P
        out = ad.add(ad.mul(off, (P - 1) / (P * S * (S - 1))),
                     ad.div(diag, P * S))
    return float(out) if not isinstance(out, ad.Node) else out
