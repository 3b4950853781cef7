"""Binary logistic classification through the Polya-Gamma bound.

The logistic likelihood has no conjugate expectation under a Gaussian
q(f), but tilting a PG(1, c) auxiliary variable gives the classic bound

    log sigmoid(z) >= z/2 - log 2 - E[omega] z^2 / 2 - KL[PG(1,c) || PG(1,0)]

which is quadratic in z, so its posterior expectation needs only the
first two moments of f.  Crucially the expectation stays affine in mu^2
and sigma^2, so the unbiased moment estimates of the svgp module slot in
without breaking unbiasedness of the whole objective.  Instead of
solving for the per-point optimum c (which depends non-linearly on the
estimated moments), c is produced by a small recognition network from
(x, y), trained jointly with everything else.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .numcore import RngStream
from .svgp import WrongLikelihood, _kuu_graph, _kuu_values, kl_qu, moments

_LOG2 = float(np.log(2.0))


class PgSite:
    """Tilt parameter c >= 0 of one (or a batch of) PG(1, c) sites."""

    def __init__(self, c):
        cv = ad.value_of(c)
        if np.any(cv < 0):
            raise ValueError("PG tilt parameters must be nonnegative")
        self.c = c

    def __repr__(self):
        return f"PgSite(c={ad.value_of(self.c)!r})"


class RecognitionNet:
    """(x, y) -> c: one tanh hidden layer and a softplus output head.

    The label is appended to the input pixels, so the network can give
    the two classes different tilts at the same point.
    """

    def __init__(self, W1, b1, W2, b2, name="recog"):
        self.W1 = W1
        self.b1 = b1
        self.W2 = W2
        self.b2 = b2
        self.name = name

    @classmethod
    def create(cls, input_dim, hidden=128, seed=0, name="recog"):
        rng = np.random.default_rng(seed)
        W1 = rng.standard_normal((input_dim + 1, hidden)) / np.sqrt(input_dim + 1)
        W2 = rng.standard_normal((hidden, 1)) / np.sqrt(hidden)
        return cls(
            Parameter(f"{name}/W1", W1, "identity"),
            Parameter(f"{name}/b1", np.zeros(hidden), "identity"),
            Parameter(f"{name}/W2", W2, "identity"),
            Parameter(f"{name}/b2", np.zeros(1), "identity"),
            name,
        )

    @property
    def hidden(self):
        return self.W1.raw.shape[1]

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]


def _check_labels(y):
    y = np.asarray(ad.value_of(y), dtype=float)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be encoded as -1/+1")
    return y


def recog_forward(x, y, net, ctx=None):
    """Run the recognition network on a batch; returns a PgSite.

    ``x`` is (B, D) and ``y`` is (B,) in {-1, +1}; the site holds a (B,)
    vector of tilts, differentiable in the net parameters under a ctx.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = _check_labels(y).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ValueError("need one label per input row")
    inp = np.concatenate([x, y[:, None]], axis=1)

    def p(param):
        return param.value() if ctx is None else ctx.value(param)

    h = ad.tanh(ad.add(ad.matmul(inp, p(net.W1)), p(net.b1)))
    pre = ad.add(ad.matmul(h, p(net.W2)), p(net.b2))
    return PgSite(ad.reshape(ad.softplus(pre), (x.shape[0],)))


def expected_loglik_pg(mu, mu_sq, var, y, c):
    """E_q[log sigmoid(y f)] lower bound, elementwise.

    All arguments broadcast; mu_sq is the *estimated* square of the mean
    (exact mu^2 only in deterministic modes), keeping the bound affine in
    the moment estimates.
    """
    half_y_mu = ad.mul(ad.mul(y, mu), 0.5)
    second = ad.mul(ad.mul(ad.pg_mean(c), ad.add(mu_sq, var)), 0.5)
    return ad.sub(ad.sub(half_y_mu, second), ad.add(ad.pg_kl(c), _LOG2))


def elbo_logistic(X, y, model, net, stream, n_total=None, S=None, ctx=None):
    """Minibatch PG-ELBO for a binary model; unbiased, graph-aware.

    Tilts come from the recognition net, moment estimates from the shared
    augmented samples; the bound is scaled by n_total/batch and the KL of
    q(u) subtracted.
    """
    if model.likelihood != "logistic_pg":
        raise WrongLikelihood(f"elbo_logistic on a {model.likelihood} model")
    if model.C != 1:
        raise ValueError("PG classification is binary; model must have C=1")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    yv = _check_labels(y)
    B = X.shape[0]
    n_total = B if n_total is None else n_total

    mom = moments(X, model, stream, S=S, ctx=ctx)
    site = recog_forward(X, yv, net, ctx=ctx)
    terms = expected_loglik_pg(ad.reshape(mom.mu, (B,)),
                               ad.reshape(mom.mu_sq, (B,)),
                               ad.reshape(mom.var, (B,)),
                               yv, site.c)
    lik = ad.mul(ad.sum_(terms), n_total / B)

    L, _ = _kuu_graph(model, ctx) if ctx is not None else _kuu_values(model)
    out = ad.sub(lik, kl_qu(model.qs[0], L, ctx))
    return out if isinstance(out, ad.Node) else float(out)


_GH_POINTS, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(32)


def predict_proba(Xstar, model, S_pred=50, stream=None):
    """P(y=+1 | x*) per point: E_q[sigmoid(f)] by 32-point Gauss-Hermite."""
    if stream is None:
        stream = RngStream(0, ("predict",))
    sampler = model.kernel.sampler
    S = S_pred
    if sampler.kind == "finite_orbit" and not model.sample_replace:
        S = min(S, sampler.P)
    mom = moments(np.atleast_2d(np.asarray(Xstar, dtype=float)), model,
                  stream, S=S)
    mu = mom.mu[:, 0]
    sd = np.sqrt(2.0 * np.maximum(mom.var[:, 0], 1e-12))
    z = mu[:, None] + sd[:, None] * _GH_POINTS[None, :]
    sig = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    return sig @ _GH_WEIGHTS / np.sqrt(np.pi)
