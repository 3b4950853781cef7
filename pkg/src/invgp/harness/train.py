"""Training loop, evaluation, and the runnable experiments.

Everything here is deterministic given the config: batches, estimator
draws, and evaluation all pull from counter-based streams addressed by
(seed, purpose, step), so a resumed run continues exactly where the
interrupted one would have gone.
"""

import csv
import os
import time

import numpy as np

from .. import autodiff as ad
from ..augment import (
    AffineBounds,
    AugmentationSampler,
    ElasticParams,
    OrbitSpec,
    draw_set,
    sample_sheet,
    to_pgm,
    warp_batch,
)
from ..kernels import InvariantKernelSpec, RbfParams
from ..numcore import DimensionMismatch, RngStream, draw_array
from ..pgclassify import RecognitionNet, elbo_logistic, predict_proba
from ..svgp import (
    GpModel,
    chunked_lml,
    elbo_gaussian,
    exact_lml,
    kf_exact_gram_fn,
    kl_qu,
    kuu,
    predict,
    rbf_gram_fn,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, load_task, load_toy_symmetric, toy_symmetric_fn

METRICS_COLUMNS = ("step", "elbo", "data_fit", "kl", "test_error_pct",
                   "test_nlpd", "bound_summary", "wall_seconds")

ADAM_PREFIX = "__adam__"


class ShapeMismatch(DimensionMismatch):
    """Evaluation data does not match the model's input layout."""


class Adam:
    """Adam ascent on the raw parameter tensors.

    ``lr_overrides`` maps parameter names to per-parameter step sizes
    (used to give augmentation bounds a faster schedule); its state
    round-trips through checkpoints for bitwise resume.
    """

    def __init__(self, params, lr=1e-3, lr_overrides=None,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.lr_overrides = dict(lr_overrides or {})
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.raw) for p in self.params}
        self.v = {p.name: np.zeros_like(p.raw) for p in self.params}

    def step(self, grads):
        self.t += 1
        for p in self.params:
            g = grads.get(p.name)
            if g is None:
                continue
            name = p.name
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1 ** self.t)
            vhat = self.v[name] / (1 - self.beta2 ** self.t)
            lr = self.lr_overrides.get(name, self.lr)
            p.raw = p.raw + lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_tensors(self):
        out = {f"{ADAM_PREFIX}/t": np.array(float(self.t))}
        for name in self.m:
            out[f"{ADAM_PREFIX}/m/{name}"] = self.m[name]
            out[f"{ADAM_PREFIX}/v/{name}"] = self.v[name]
        return out

    def load_state(self, tensors):
        self.t = int(tensors[f"{ADAM_PREFIX}/t"])
        for p in self.params:
            self.m[p.name] = tensors[f"{ADAM_PREFIX}/m/{p.name}"].copy()
            self.v[p.name] = tensors[f"{ADAM_PREFIX}/v/{p.name}"].copy()


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

def _identity_sampler():
    return AugmentationSampler.finite_orbit(OrbitSpec.explicit([lambda v: v]))


def build_sampler(cfg, image_shape):
    if cfg.kernel == "rbf" or cfg.sampler == "identity":
        return _identity_sampler(), True
    if cfg.sampler == "swap":
        return AugmentationSampler.finite_orbit(OrbitSpec.coordinate_swap()), False
    if image_shape is None:
        raise ShapeMismatch(f"sampler {cfg.sampler!r} needs image inputs")
    if cfg.sampler == "rotation_only":
        bounds = AffineBounds(0.0, np.deg2rad(cfg.init_alpha_degrees),
                              mode="rotation_only")
        return AugmentationSampler.affine(bounds, image_shape=image_shape), False
    if cfg.sampler == "affine_full":
        bounds = AffineBounds(np.zeros(6), cfg.init_halfwidth,
                              mode="full_affine")
        return AugmentationSampler.affine(bounds, image_shape=image_shape), False
    elastic = ElasticParams(cfg.elastic_amplitude, cfg.elastic_smoothness)
    return AugmentationSampler.elastic_noise(elastic, image_shape=image_shape), False


def _task_heads(task):
    """(likelihood, number of outputs) for each task."""
    return {
        "toy_symmetric": ("gaussian", 1),
        "binary_oddeven": ("logistic_pg", 1),
        "mnist10": ("gaussian", 10),
        "mnist_rot": ("gaussian", 10),
    }[task]


def init_inducing(X, M, seed):
    """M rows sampled from the data plus a whisper of jitter.

    The jitter keeps rows distinct when the data has duplicates, which
    would otherwise make K_uu exactly singular.
    """
    N = X.shape[0]
    stream = RngStream(seed, ("inducing",))
    idx = np.argsort(draw_array(stream, "uniform01", (N,)))
    picks = idx[np.arange(M) % N]
    noise = draw_array(stream.child("jitter"), "standard_normal", X[picks].shape)
    return X[picks] + 1e-4 * noise


def build_model(cfg, train_ds):
    """Model (+ recognition net for PG tasks) from a config and data."""
    likelihood, C = _task_heads(cfg.task)
    sampler, replace = build_sampler(cfg, train_ds.image_shape)
    spec = InvariantKernelSpec(RbfParams(cfg.variance, cfg.lengthscale),
                               sampler, S=cfg.S)
    Z = init_inducing(train_ds.inputs, cfg.M, cfg.seed)
    model = GpModel.build(spec, Z, C=C, likelihood=likelihood,
                          noise_variance=cfg.noise_variance,
                          sample_replace=replace)
    net = None
    if likelihood == "logistic_pg":
        net = RecognitionNet.create(train_ds.inputs.shape[1],
                                    hidden=cfg.recog_hidden, seed=cfg.seed)
    return model, net


def _train_targets(cfg, ds):
    if cfg.task == "toy_symmetric":
        return ds.targets
    if cfg.task == "binary_oddeven":
        return ds.labels.astype(float)
    return np.eye(10)[ds.labels]          # one-hot regression targets


def trainable_params(model, net):
    params = model.params()
    if net is not None:
        params = params + net.params()
    return params


def bound_lr_overrides(model, lr_bounds):
    return {p.name: lr_bounds for p in model.kernel.sampler.params()}


def bound_summary(model):
    """One float describing the learned augmentation width (degrees when
    the sampler is a rotation)."""
    sampler = model.kernel.sampler
    if sampler.kind == "affine":
        if sampler.bounds.mode == "rotation_only":
            return float(np.rad2deg(sampler.bounds.alpha))
        return float(np.mean(sampler.bounds.halfwidth.value()))
    if sampler.kind == "elastic":
        return float(sampler.elastic.amplitude.value())
    return 0.0


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _gaussian_nlpd(y, mean, var):
    return 0.5 * np.log(2.0 * np.pi * var) + (y - mean) ** 2 / (2.0 * var)


def evaluate(model, net, ds, cfg, limit=None, seed=0):
    """Test error percentage and mean NLPD on a dataset (or a prefix).

    Regression tasks report RMSE in the error slot.  Deterministic for a
    given seed: the prediction stream is fixed, not advanced.
    """
    if ds.inputs.shape[1] != model.inducing.Z.raw.shape[1]:
        raise ShapeMismatch(
            f"data is {ds.inputs.shape[1]}-dimensional, model expects "
            f"{model.inducing.Z.raw.shape[1]}")
    n = ds.N if limit is None else min(limit, ds.N)
    X = ds.inputs[:n]
    stream = RngStream(seed, ("eval_predict",))

    if model.likelihood == "logistic_pg":
        probs = _in_chunks(lambda B: predict_proba(B, model, cfg.S_pred, stream), X)
        y = ds.labels[:n]
        pred = np.where(probs >= 0.5, 1, -1)
        err = 100.0 * np.mean(pred != y)
        p_true = np.where(y == 1, probs, 1.0 - probs)
        nlpd = float(np.mean(-np.log(np.clip(p_true, 1e-12, None))))
        return err, nlpd

    mean, var = _in_chunks(
        lambda B: predict(B, model, cfg.S_pred, stream), X, pair=True)
    if cfg.task == "toy_symmetric":
        y = ds.targets[:n]
        rmse = float(np.sqrt(np.mean((mean[:, 0] - y) ** 2)))
        nlpd = float(np.mean(_gaussian_nlpd(y, mean[:, 0], var[:, 0])))
        return rmse, nlpd
    y = np.eye(10)[ds.labels[:n]]
    err = 100.0 * np.mean(np.argmax(mean, axis=1) != ds.labels[:n])
    nlpd = float(np.mean(np.sum(_gaussian_nlpd(y, mean, var), axis=1)))
    return err, nlpd


def _in_chunks(fn, X, size=500, pair=False):
    outs = [fn(X[i:i + size]) for i in range(0, len(X), size)]
    if pair:
        return (np.concatenate([o[0] for o in outs]),
                np.concatenate([o[1] for o in outs]))
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _batch_indices(N, B, seed, step):
    if B >= N:
        return np.arange(N)
    u = draw_array(RngStream(seed, ("batch", str(step))), "uniform01", (N,))
    return np.argsort(u)[:B]


def _elbo(cfg, model, net, X, y, stream, n_total, ctx=None):
    if model.likelihood == "logistic_pg":
        return elbo_logistic(X, y, model, net, stream, n_total=n_total, ctx=ctx)
    return elbo_gaussian(X, y, model, stream, n_total=n_total, ctx=ctx)


def _kl_total(model):
    K, f = kuu(model.inducing.Z.value(), model.kernel.base)
    return float(sum(kl_qu(q, f) for q in model.qs))


def train_elbo(cfg, model, net, train_ds, limit=512):
    """The training-set bound estimate reported alongside evaluations.

    Uses the same fixed stream and train-set prefix as the metrics rows,
    so values are comparable across eval calls and resumes.
    """
    n = min(train_ds.N, limit)
    y = _train_targets(cfg, train_ds)
    return float(_elbo(cfg, model, net, train_ds.inputs[:n], y[:n],
                       RngStream(cfg.seed, ("metrics_elbo",)),
                       n_total=train_ds.N))


def state_tensors(model, net, adam):
    out = {p.name: p.raw for p in trainable_params(model, net)}
    out.update(adam.state_tensors())
    return out


def restore_state(model, net, adam, tensors):
    for p in trainable_params(model, net):
        p.raw = tensors[p.name]
    adam.load_state(tensors)


def train(cfg, resume=None, log=None):
    """Run (or continue) one experiment; returns the final checkpoint path.

    Writes ``metrics.csv`` and ``checkpoint.igp`` under cfg.out_dir, plus
    periodic ``ckpt_<step>.igp`` snapshots every cfg.ckpt_every steps.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    train_ds, test_ds = load_task(cfg)
    y = _train_targets(cfg, train_ds)
    model, net = build_model(cfg, train_ds)
    adam = Adam(trainable_params(model, net), lr=cfg.lr,
                lr_overrides=bound_lr_overrides(model, cfg.lr_bounds))

    start_step = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        # out_dir is where results land, not part of the model definition,
        # so resuming into a fresh directory is fine
        def scrub(text):
            return "\n".join(l for l in text.splitlines()
                             if not l.startswith("out_dir"))
        if scrub(ck.config_text) != scrub(cfg.to_text()):
            raise ValueError("checkpoint was written by a different config")
        restore_state(model, net, adam, ck.tensors)
        start_step = ck.step

    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    fresh = start_step == 0 or not os.path.exists(metrics_path)
    t0 = time.perf_counter()
    with open(metrics_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_COLUMNS)
        for step in range(start_step, cfg.steps):
            idx = _batch_indices(train_ds.N, cfg.batch, cfg.seed, step)
            try:
                ctx = ad.GradientContext()
                loss = _elbo(cfg, model, net, train_ds.inputs[idx], y[idx],
                             RngStream(cfg.seed, ("elbo", str(step))),
                             n_total=train_ds.N, ctx=ctx)
                adam.step(ad.backward(loss, ctx))
            except Exception as exc:
                raise RuntimeError(
                    f"training aborted at step {step}, batch ids "
                    f"{idx[:8].tolist()}...: {exc}") from exc

            done = step + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                row = _metrics_row(cfg, model, net, train_ds, test_ds, y,
                                   done, t0)
                writer.writerow(row)
                fh.flush()
                if log:
                    log(" ".join(f"{k}={v}" for k, v in
                                 zip(METRICS_COLUMNS, row)))
            if done % cfg.ckpt_every == 0 and done != cfg.steps:
                save_checkpoint(os.path.join(cfg.out_dir, f"ckpt_{done}.igp"),
                                done, cfg.to_text(),
                                state_tensors(model, net, adam))

    final = os.path.join(cfg.out_dir, "checkpoint.igp")
    save_checkpoint(final, cfg.steps, cfg.to_text(),
                    state_tensors(model, net, adam))
    return final


def _metrics_row(cfg, model, net, train_ds, test_ds, y, step, t0):
    elbo = train_elbo(cfg, model, net, train_ds)
    kl = _kl_total(model)
    err, nlpd = evaluate(model, net, test_ds, cfg, limit=1000, seed=cfg.seed)
    return (step, f"{elbo:.6f}", f"{elbo + kl:.6f}", f"{kl:.6f}",
            f"{err:.4f}", f"{nlpd:.6f}", f"{bound_summary(model):.6f}",
            f"{time.perf_counter() - t0:.3f}")


def rebuild_from_checkpoint(path, cfg=None):
    """Model (+net) with parameters exactly as stored in a checkpoint."""
    ck = load_checkpoint(path)
    cfg = ExperimentConfig.from_text(ck.config_text) if cfg is None else cfg
    train_ds, test_ds = load_task(cfg)
    model, net = build_model(cfg, train_ds)
    for p in trainable_params(model, net):
        p.raw = ck.tensors[p.name]
    return model, net, cfg, train_ds, test_ds


# ---------------------------------------------------------------------------
# runnable experiments
# ---------------------------------------------------------------------------

def dump_augmented(model, ds, k, S, out_dir, seed=0):
    """Write one PGM sheet per source image: framed source + S samples.

    Returns the written paths and, for affine samplers, the drawn
    coefficient vectors so the spread can be audited.
    """
    if ds.image_shape is None:
        raise ShapeMismatch("dump_augmented needs an image task")
    os.makedirs(out_dir, exist_ok=True)
    H, W = ds.image_shape
    sampler = model.kernel.sampler
    paths, coeffs = [], []
    for i in range(min(k, ds.N)):
        img = ds.inputs[i].reshape(H, W)
        stream = RngStream(seed, ("dump", str(i)))
        if S == 0:
            samples = []
        elif sampler.kind == "affine":
            phi = sampler.draw_phi(S, stream)
            coeffs.append(phi)
            mats = sampler._matrices(phi)
            samples = list(warp_batch(np.broadcast_to(img, (S, H, W)), mats))
        else:
            # finite orbits are drawn without replacement, so show at most
            # every orbit point once
            n = min(S, sampler.P) if sampler.kind == "finite_orbit" else S
            samples = [np.asarray(ad.value_of(s)).reshape(H, W)
                       for s in draw_set(img, sampler, n, stream)]
        path = os.path.join(out_dir, f"augmented_{i:03d}.pgm")
        with open(path, "wb") as fh:
            fh.write(to_pgm(sample_sheet(img, samples)))
        paths.append(path)
    return paths, coeffs


def toy_demo(seed=0, steps=800, log=None):
    """Fit the swap-invariant model and the RBF baseline on the toy task.

    Returns exact log marginal likelihoods (with a chunked-conditional
    decomposition of each) and mirrored-half test RMSEs for both models.
    """
    out = {}
    train_ds, test_ds = load_toy_symmetric(seed=seed)
    for kernel in ("invariant", "rbf"):
        cfg = ExperimentConfig(task="toy_symmetric", kernel=kernel,
                               sampler="swap" if kernel == "invariant" else "identity",
                               seed=seed, M=25, steps=steps, batch=64,
                               lengthscale=0.3, noise_variance=0.05, lr=5e-3)
        model, _ = build_model(cfg, train_ds)
        adam = Adam(model.params(), lr=cfg.lr)
        y = train_ds.targets
        for step in range(steps):
            ctx = ad.GradientContext()
            loss = elbo_gaussian(train_ds.inputs, y, model,
                                 RngStream(seed, ("toy", str(step))), ctx=ctx)
            adam.step(ad.backward(loss, ctx))
            if log and (step + 1) % 200 == 0:
                log(f"{kernel}: step {step + 1}, elbo {ad.value_of(loss):.3f}")

        base = model.kernel.base
        if kernel == "invariant":
            gram = kf_exact_gram_fn(model.kernel)
        else:
            gram = rbf_gram_fn(base)
        noise = float(model.noise.value())
        lml = exact_lml(train_ds.inputs, y, gram, noise)
        chunks = chunked_lml(train_ds.inputs, y, gram, noise, [10] * 5)
        mean, _ = predict(test_ds.inputs, model, S_pred=cfg.S_pred)
        rmse = float(np.sqrt(np.mean((mean[:, 0] - test_ds.targets) ** 2)))
        out[kernel] = {"lml": lml, "chunked": chunks, "rmse": rmse}
    return out


def estimator_check(log=print, draws=4000, seed=0):
    """Unbiasedness audit of the moment estimators, printed as PASS/FAIL.

    Rotation orbit of size 8 on an 8-dimensional input; for S in {2, 3}
    and both sampling modes, the Monte-Carlo mean of each estimator over
    ``draws`` replicas must land within 3 standard errors of the exact
    full-orbit value.  Returns True when every line passes.
    """
    from ..svgp import VariationalGaussian, moments

    rng = np.random.default_rng(seed)
    spec = InvariantKernelSpec(
        RbfParams(1.3, 1.1),
        AugmentationSampler.finite_orbit(OrbitSpec.rotation_grid(8)), S=2)
    Z = rng.standard_normal((4, 8))
    x = rng.standard_normal(8)

    all_ok = True
    exact_model = GpModel.build(spec, Z)
    qr = rng.standard_normal(4)
    for q in exact_model.qs:
        q.m.raw = qr
    exact = moments(x[None, :], exact_model, RngStream(0, ("e",)), S=8)

    for replace, mode in ((False, "without-replacement"), (True, "iid")):
        model = GpModel.build(spec, Z, sample_replace=replace)
        model.qs[0].m.raw = qr
        model.qs[0].raw_L = exact_model.qs[0].raw_L
        for S in (2, 3):
            reps = moments(np.tile(x, (draws, 1)), model,
                           RngStream(seed, ("mc", mode, str(S))), S=S)
            for label, est, target in (
                    ("mu", reps.mu, exact.mu),
                    ("mu_sq", reps.mu_sq, exact.mu_sq),
                    ("var", reps.var, exact.var)):
                vals = est[:, 0]
                se = vals.std(ddof=1) / np.sqrt(draws)
                gap = abs(vals.mean() - target[0, 0])
                ok = bool(gap <= 3 * se)
                all_ok = all_ok and ok
                log(f"{'PASS' if ok else 'FAIL'} {mode} S={S} {label}: "
                    f"|bias| {gap:.2e} vs 3se {3 * se:.2e}")
    return all_ok
