"""Dense linear algebra, splittable random streams, and the Polya-Gamma
special functions shared by the rest of the package.

Everything here is double precision and pure: matrices are plain numpy
arrays treated as immutable, and random streams are value objects that
always reproduce the same draws for the same (seed, path).
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular


class NotPositiveDefinite(Exception):
    """Factorisation failed even after the jitter budget was spent."""


class DimensionMismatch(Exception):
    """Operands do not conform."""


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular factor L with the jitter that was actually added,
    so that L @ L.T == A + jitter * I."""

    L: np.ndarray
    jitter: float = 0.0

    @property
    def log_det(self):
        """log det of the factored matrix (A + jitter I)."""
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))


def cholesky(A, max_jitter=1e-3):
    """Factor a symmetric PSD matrix, escalating diagonal jitter on failure.

    Jitter starts at 1e-10 times the mean diagonal and doubles until the
    factorisation succeeds or exceeds ``max_jitter`` (absolute), at which
    point NotPositiveDefinite is raised.

    Parameters
    ----------
    A : ndarray of shape (n, n)
        Symmetric matrix (checked to 1e-10 relative tolerance).
    max_jitter : float
        Largest diagonal perturbation we are willing to add.

    Returns
    -------
    CholFactor
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got shape {A.shape}")
    scale = max(np.max(np.abs(A)), 1.0)
    if np.max(np.abs(A - A.T)) > 1e-10 * scale:
        raise DimensionMismatch("matrix is not symmetric to 1e-10 relative")

    n = A.shape[0]
    try:
        L = np.linalg.cholesky(A)
        return CholFactor(L, 0.0)
    except np.linalg.LinAlgError:
        pass

    jitter = 1e-10 * float(np.mean(np.diag(A)))
    if jitter <= 0.0:
        jitter = 1e-10
    while jitter <= max_jitter:
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(n))
            return CholFactor(L, jitter)
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise NotPositiveDefinite(
        f"cholesky failed with jitter up to {max_jitter:g} (n={n})"
    )


def tri_solve(L, B, transpose=False):
    """Solve L X = B (or L.T X = B when ``transpose``) for lower-triangular L.

    L may be a CholFactor or a bare array.  Raises DimensionMismatch when
    shapes do not conform and NotPositiveDefinite on an exactly singular
    triangle (zero diagonal entry).
    """
    Lm = L.L if isinstance(L, CholFactor) else np.asarray(L, dtype=float)
    B = np.asarray(B, dtype=float)
    b2 = B if B.ndim == 2 else B.reshape(-1, 1)
    if Lm.ndim != 2 or Lm.shape[0] != Lm.shape[1] or Lm.shape[1] != b2.shape[0]:
        raise DimensionMismatch(f"cannot solve {Lm.shape} against {B.shape}")
    if np.any(np.diag(Lm) == 0.0):
        raise NotPositiveDefinite("singular triangular factor (zero diagonal)")
    X = solve_triangular(Lm, b2, lower=True, trans=1 if transpose else 0)
    return X if B.ndim == 2 else X[:, 0]


def pg_mean(c):
    """Mean of the tilted Polya-Gamma PG(1, c) variable: tanh(c/2) / (2c).

    Even in c; the removable singularity at c = 0 evaluates to 1/4.
    Accepts scalars or arrays.
    """
    c = np.asarray(c, dtype=float)
    small = np.abs(c) < 1e-6
    # series: 1/4 - c^2/48 + O(c^4); the direct ratio below is well
    # conditioned outside the small-|c| window
    safe = np.where(small, 1.0, c)
    out = np.where(small, 0.25 - c * c / 48.0, np.tanh(safe / 2.0) / (2.0 * safe))
    return float(out) if out.ndim == 0 else out


def _log_cosh(z):
    z = np.abs(z)
    return z + np.log1p(np.exp(-2.0 * z)) - np.log(2.0)


def pg_kl(c):
    """KL divergence KL(PG(1, c) || PG(1, 0)) = log cosh(c/2) - (c/4) tanh(c/2).

    Nonnegative, even in c, zero at c = 0.  For |c| below 1e-3 the two terms
    cancel to O(c^4) and a series (c^4 / 192) is used instead.
    """
    c = np.asarray(c, dtype=float)
    small = np.abs(c) < 1e-3
    direct = _log_cosh(c / 2.0) - (c / 4.0) * np.tanh(c / 2.0)
    out = np.where(small, c ** 4 / 192.0, direct)
    return float(out) if out.ndim == 0 else out


def pg_mean_deriv(c):
    """d/dc of pg_mean, used by the gradient engine.

    Equals (c sech^2(c/2) - 2 tanh(c/2)) / (4 c^2), which is -c/24 + O(c^3)
    near the origin.
    """
    c = np.asarray(c, dtype=float)
    small = np.abs(c) < 1e-4
    safe = np.where(small, 1.0, c)
    sech2 = 1.0 / np.cosh(safe / 2.0) ** 2
    direct = (safe * sech2 - 2.0 * np.tanh(safe / 2.0)) / (4.0 * safe * safe)
    out = np.where(small, -c / 24.0, direct)
    return float(out) if out.ndim == 0 else out


def pg_kl_deriv(c):
    """d/dc of pg_kl: (1/4) tanh(c/2) - (c/8) sech^2(c/2); series c^3/48."""
    c = np.asarray(c, dtype=float)
    small = np.abs(c) < 1e-3
    direct = 0.25 * np.tanh(c / 2.0) - (c / 8.0) / np.cosh(c / 2.0) ** 2
    out = np.where(small, c ** 3 / 48.0, direct)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream addressed by (seed, path).

    The stream is a value: drawing from it never mutates it, and the same
    (seed, path, kind) always yields the same sequence.  Distinct paths give
    statistically independent streams (the path is hashed into a Philox key).
    Consumers create sub-streams with :meth:`child` instead of advancing
    shared state, e.g. ``stream.child("epoch3").child("batch7")``.
    """

    seed: int
    path: tuple = field(default_factory=tuple)

    def child(self, label):
        return RngStream(self.seed, self.path + (str(label),))

    def _generator(self, kind):
        tag = f"{self.seed}|{'/'.join(self.path)}|{kind}".encode()
        digest = hashlib.sha256(tag).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def draw(stream, kind, n):
    """Return n deterministic draws from the stream.

    kind is "uniform01" or "standard_normal".  Counters inside the
    underlying Philox generator are consumed once per value, so a single
    call never reuses them; repeated calls with the same stream
    intentionally replay the same vector.
    """
    gen = stream._generator(kind)
    if kind == "uniform01":
        return gen.random(int(n))
    if kind == "standard_normal":
        return gen.standard_normal(int(n))
    raise ValueError(f"unknown draw kind: {kind!r}")


def draw_array(stream, kind, shape):
    """Like :func:`draw` but shaped; same counters as the flat draw."""
    shape = tuple(int(s) for s in shape)
    n = 1
    for s in shape:
        n *= s
    return draw(stream, kind, n).reshape(shape)
