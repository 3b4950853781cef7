"""Scikit-learn style wrappers around the invariant GP models.

These cover the common cases (regression, binary classification) with
the fit/predict surface sklearn tooling expects; the experiment harness
drives the same models directly for anything finer-grained.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import autodiff as ad
from .harness.config import ExperimentConfig
from .harness.train import Adam, bound_lr_overrides, build_sampler, init_inducing
from .kernels import InvariantKernelSpec, RbfParams
from .numcore import RngStream, draw_array
from .pgclassify import RecognitionNet, elbo_logistic, predict_proba
from .svgp import GpModel, elbo_gaussian, predict


class _GpEstimatorBase(BaseEstimator):
    def _sampler_config(self):
        # reuse the harness sampler factory; task/kernel fields are inert here
        return ExperimentConfig(
            kernel="rbf" if self.sampler == "identity" else "invariant",
            sampler=self.sampler,
            init_alpha_degrees=self.init_alpha_degrees,
            init_halfwidth=self.init_halfwidth,
            elastic_amplitude=self.elastic_amplitude,
            elastic_smoothness=self.elastic_smoothness)

    def _build_model(self, X, C, likelihood):
        sampler, replace = build_sampler(self._sampler_config(), self.image_shape)
        spec = InvariantKernelSpec(RbfParams(self.variance, self.lengthscale),
                                   sampler, S=self.S)
        M = min(self.M, X.shape[0])
        Z = init_inducing(X, M, self.seed)
        return GpModel.build(spec, Z, C=C, likelihood=likelihood,
                             noise_variance=self.noise_variance,
                             sample_replace=replace)

    def _fit_loop(self, X, y, model, net, elbo_fn):
        params = model.params() + (net.params() if net is not None else [])
        adam = Adam(params, lr=self.lr,
                    lr_overrides=bound_lr_overrides(model, self.lr_bounds))
        N = X.shape[0]
        history = []
        for step in range(self.steps):
            if self.batch >= N:
                Xb, yb = X, y
            else:
                u = draw_array(RngStream(self.seed, ("fit_batch", str(step))),
                               "uniform01", (N,))
                idx = np.argsort(u)[:self.batch]
                Xb, yb = X[idx], y[idx]
            ctx = ad.GradientContext()
            loss = elbo_fn(Xb, yb, model, net,
                           RngStream(self.seed, ("fit", str(step))),
                           N, ctx)
            adam.step(ad.backward(loss, ctx))
            history.append(float(ad.value_of(loss)))
        return history

    def _check_predict_input(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected "
                             f"{self.n_features_in_}")
        return X


class InvariantGpRegressor(RegressorMixin, _GpEstimatorBase):
    """Sparse GP regression with a (learnable) invariant kernel.

    ``sampler`` picks the augmentation family: "identity" recovers a
    plain RBF model, "swap" averages the two coordinate orders, and the
    image samplers ("rotation_only", "affine_full", "elastic") need
    ``image_shape`` to interpret rows as pixels.
    """

    def __init__(self, sampler="identity", M=20, S=2, S_pred=50,
                 variance=1.0, lengthscale=1.0, noise_variance=0.1,
                 steps=300, lr=5e-3, lr_bounds=1e-2, batch=200,
                 init_alpha_degrees=10.0, init_halfwidth=0.05,
                 elastic_amplitude=1.0, elastic_smoothness=3.0,
                 image_shape=None, seed=0):
        self.sampler = sampler
        self.M = M
        self.S = S
        self.S_pred = S_pred
        self.variance = variance
        self.lengthscale = lengthscale
        self.noise_variance = noise_variance
        self.steps = steps
        self.lr = lr
        self.lr_bounds = lr_bounds
        self.batch = batch
        self.init_alpha_degrees = init_alpha_degrees
        self.init_halfwidth = init_halfwidth
        self.elastic_amplitude = elastic_amplitude
        self.elastic_smoothness = elastic_smoothness
        self.image_shape = image_shape
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True, dtype=float)
        self.n_features_in_ = X.shape[1]
        model = self._build_model(X, C=1, likelihood="gaussian")
        self.elbo_history_ = self._fit_loop(
            X, y.astype(float), model, None,
            lambda Xb, yb, m, _n, s, N, ctx: elbo_gaussian(
                Xb, yb, m, s, n_total=N, ctx=ctx))
        self.model_ = model
        return self

    def predict(self, X, return_std=False):
        X = self._check_predict_input(X)
        mean, var = predict(X, self.model_, S_pred=self.S_pred,
                            stream=RngStream(self.seed, ("predict",)))
        if return_std:
            return mean[:, 0], np.sqrt(var[:, 0])
        return mean[:, 0]


class InvariantGpClassifier(ClassifierMixin, _GpEstimatorBase):
    """Binary GP classification with the tilted logistic bound.

    Labels may be any two values; they are mapped onto -1/+1 internally
    and ``classes_`` keeps the original encoding.
    """

    def __init__(self, sampler="identity", M=20, S=2, S_pred=50,
                 variance=1.0, lengthscale=1.0,
                 steps=300, lr=5e-3, lr_bounds=1e-2, batch=200,
                 init_alpha_degrees=10.0, init_halfwidth=0.05,
                 elastic_amplitude=1.0, elastic_smoothness=3.0,
                 recog_hidden=32, image_shape=None, seed=0):
        self.sampler = sampler
        self.M = M
        self.S = S
        self.S_pred = S_pred
        self.variance = variance
        self.lengthscale = lengthscale
        self.steps = steps
        self.lr = lr
        self.lr_bounds = lr_bounds
        self.batch = batch
        self.init_alpha_degrees = init_alpha_degrees
        self.init_halfwidth = init_halfwidth
        self.elastic_amplitude = elastic_amplitude
        self.elastic_smoothness = elastic_smoothness
        self.recog_hidden = recog_hidden
        self.image_shape = image_shape
        self.seed = seed

    # the PG model has no observation-noise parameter
    noise_variance = 1.0

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"binary classifier got {len(self.classes_)} "
                             "classes")
        self.n_features_in_ = X.shape[1]
        signs = np.where(y == self.classes_[1], 1.0, -1.0)
        model = self._build_model(X, C=1, likelihood="logistic_pg")
        net = RecognitionNet.create(X.shape[1], hidden=self.recog_hidden,
                                    seed=self.seed)
        self.elbo_history_ = self._fit_loop(
            X, signs, model, net,
            lambda Xb, yb, m, n, s, N, ctx: elbo_logistic(
                Xb, yb, m, n, s, n_total=N, ctx=ctx))
        self.model_ = model
        self.net_ = net
        return self

    def predict_proba(self, X):
        X = self._check_predict_input(X)
        p1 = predict_proba(X, self.model_, S_pred=self.S_pred,
                           stream=RngStream(self.seed, ("predict",)))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[(probs[:, 1] >= 0.5).astype(int)]
