"""Gaussian process regression around a user-supplied prior mean.

The posterior only models the residual between observations and the prior
mean, so a map-derived prior is corrected locally as data arrives::

    mean(x) = M(x) + k(x)^T (K + s2 I)^-1 (y - M(X))
    var(x)  = k(x, x) - k(x)^T (K + s2 I)^-1 k(x)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import check_points, check_targets


class GPNumericalError(ArithmeticError):
    """Raised when the kernel matrix cannot be factorized."""


@dataclass(frozen=True)
class KernelParams:
    length_scale: float = 0.1
    signal_variance: float = 1.0
    noise_variance: float = 0.01

    def __post_init__(self):
        if not self.length_scale > 0:
            raise ValueError(f"length_scale must be positive, got {self.length_scale}")
        if not self.signal_variance > 0:
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        if not self.noise_variance >= 0:
            raise ValueError(f"noise_variance must be non-negative, got {self.noise_variance}")


def kernel_eval(a, b, params: KernelParams) -> float:
    """Squared-exponential covariance between two descriptors."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    d2 = float(np.sum((a - b) ** 2))
    return params.signal_variance * float(np.exp(-0.5 * d2 / params.length_scale ** 2))


def kernel_matrix(A: np.ndarray, B: np.ndarray, params: KernelParams) -> np.ndarray:
    d2 = (np.sum(A ** 2, axis=1)[:, None] + np.sum(B ** 2, axis=1)[None, :] - 2.0 * A @ B.T)
    np.maximum(d2, 0.0, out=d2)
    return params.signal_variance * np.exp(-0.5 * d2 / params.length_scale ** 2)


def _zero_mean(X):
    return np.zeros(X.shape[0])


class MapPriorGP(RegressorMixin, BaseEstimator):
    """GP regressor with fixed squared-exponential hyperparameters.

    Parameters
    ----------
    length_scale : float, default=0.1
        Kernel length scale in descriptor units.
    signal_variance : float, default=1.0
        Prior variance ``k(x, x)``.
    noise_variance : float, default=0.01
        Observation noise variance added to the kernel diagonal.
    prior_mean : callable, optional
        Maps an ``(n, d)`` array to ``n`` prior means. Zero when omitted.

    Attributes
    ----------
    X_train_, y_train_ : ndarray
        Observations, possibly empty.
    n_variance_clamps_ : int
        How many predicted variances were negative from round-off and set to 0.
    """

    def __init__(self, length_scale=0.1, signal_variance=1.0, noise_variance=0.01, prior_mean=None):
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.noise_variance = noise_variance
        self.prior_mean = prior_mean

    @property
    def kernel(self) -> KernelParams:
        return KernelParams(self.length_scale, self.signal_variance, self.noise_variance)

    def _prior(self, X):
        fn = self.prior_mean if self.prior_mean is not None else _zero_mean
        m = np.asarray(fn(X), dtype=float).reshape(-1)
        if m.shape[0] != X.shape[0]:
            raise ValueError("prior_mean returned the wrong number of values")
        return m

    def fit(self, X, y):
        kernel = self.kernel
        X = check_points(X)
        y = check_targets(y, X.shape[0])
        self.X_train_ = X
        self.y_train_ = y
        self.n_features_in_ = X.shape[1]
        self.n_variance_clamps_ = 0
        if X.shape[0] == 0:
            self.L_ = np.zeros((0, 0))
            self.alpha_ = np.zeros(0)
            return self
        self.prior_train_ = self._prior(X)
        K = kernel_matrix(X, X, kernel)
        K[np.diag_indices_from(K)] += kernel.noise_variance
        try:
            c, lower = cho_factor(K, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise GPNumericalError(
                "kernel matrix is not positive definite; duplicate inputs need noise_variance > 0"
            ) from exc
        self.L_ = np.tril(c)
        self.alpha_ = cho_solve((c, lower), y - self.prior_train_, check_finite=False)
        return self

    @property
    def n_observations(self) -> int:
        return 0 if not hasattr(self, "X_train_") else self.X_train_.shape[0]

    def predict(self, X, return_std=False, return_var=False):
        """Posterior mean, and optionally standard deviation or variance."""
        fitted = hasattr(self, "X_train_")
        X = check_points(X, self.n_features_in_ if fitted else None)
        kernel = self.kernel
        mean = self._prior(X)
        var = np.full(X.shape[0], kernel.signal_variance)
        if fitted and self.X_train_.shape[0] > 0:
            Ks = kernel_matrix(X, self.X_train_, kernel)
            mean = mean + Ks @ self.alpha_
            if return_std or return_var:
                v = solve_triangular(self.L_, Ks.T, lower=True, check_finite=False)
                var = var - np.sum(v * v, axis=0)
                neg = var < 0
                if np.any(neg):
                    self.n_variance_clamps_ += int(np.count_nonzero(neg))
                    var = np.where(neg, 0.0, var)
        if return_var:
            return mean, var
        if return_std:
            return mean, np.sqrt(var)
        return mean


def gp_update(model: MapPriorGP, x_new, y_new) -> MapPriorGP:
    """Return a new model with one more observation; ``model`` is untouched."""
    x_new = np.asarray(x_new, dtype=float).reshape(1, -1)
    if model.n_observations:
        if x_new.shape[1] != model.n_features_in_:
            raise ValueError(f"x_new has {x_new.shape[1]} features, expected {model.n_features_in_}")
        X = np.vstack([model.X_train_, x_new])
        y = np.append(model.y_train_, float(y_new))
    else:
        X, y = x_new, np.array([float(y_new)])
    return type(model)(**model.get_params(deep=False)).fit(X, y)


def gp_predict(model: MapPriorGP, x) -> tuple[float, float]:
    """Posterior ``(mean, variance)`` at a single descriptor."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    mean, var = model.predict(x, return_var=True)
    return float(mean[0]), float(var[0])
