"""scikit-learn style front end for rate estimation.

``fit`` consumes samples of the scaled queue excess (or a regime for the
exact oracle); ``predict`` maps x values to rates ``-ln P(X >= x) / b_n^2``.
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .laws import make_law
from .ldp_lab import birth_death_stationary, rate_from_counts
from .quasipotential import quasipotential_curve

__all__ = ["EmpiricalRateEstimator", "BirthDeathRateEstimator", "QuasipotentialRateEstimator"]


def _column(X):
    X = check_array(X, ensure_2d=False, dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError("expected a single feature column")
        X = X[:, 0]
    return X


class EmpiricalRateEstimator(BaseEstimator):
    """Rates from stationary samples of X.

    Parameters
    ----------
    b_n : float
        Moderate-deviation scale.
    level : float
        Confidence level of the Wilson band.
    """

    def __init__(self, b_n=1.0, level=0.95):
        self.b_n = b_n
        self.level = level

    def fit(self, X, y=None):
        X = _column(X)
        if not self.b_n > 0:
            raise ValueError("b_n must be positive")
        self.samples_ = np.sort(X)
        self.n_samples_ = X.size
        return self

    def _estimates(self, x):
        check_is_fitted(self, "samples_")
        x = _column(x)
        hits = self.n_samples_ - np.searchsorted(self.samples_, x, side="left")
        return rate_from_counts(hits, self.n_samples_, self.b_n, x, level=self.level)

    def predict(self, X):
        """Rate per x; NaN where no sample reached x (only a lower bound is known)."""
        return np.array([r.rate for r in self._estimates(X)])

    def predict_interval(self, X):
        est = self._estimates(X)
        return np.array([r.band_low for r in est]), np.array([r.band_high for r in est])


class BirthDeathRateEstimator(BaseEstimator):
    """Exact M/M/n rates; ``fit`` takes no data, only the regime parameters."""

    def __init__(self, n=100, beta=1.0, mu=1.0, b_n=None):
        self.n = n
        self.beta = beta
        self.mu = mu
        self.b_n = b_n

    def fit(self, X=None, y=None):
        b = float(self.n) ** 0.1 if self.b_n is None else float(self.b_n)
        rho = 1.0 - self.beta * b / math.sqrt(self.n)
        self.law_ = birth_death_stationary(int(self.n), self.n * self.mu * rho, self.mu)
        self.b_n_ = b
        return self

    def predict(self, X):
        check_is_fitted(self, "law_")
        x = _column(X)
        p = self.law_.x_tail(x, self.b_n_)
        return -np.log(p) / self.b_n_ ** 2


class QuasipotentialRateEstimator(BaseEstimator):
    """Numerical quasipotential; ``fit`` solves at the given x values and
    ``predict`` returns those values (other x are solved on demand)."""

    def __init__(self, service="exponential", service_params=None, sigma=1.0, beta=1.0,
                 T_grid=(2.0, 4.0, 8.0, 16.0, 32.0), dt=None, cells=32):
        self.service = service
        self.service_params = service_params
        self.sigma = sigma
        self.beta = beta
        self.T_grid = T_grid
        self.dt = dt
        self.cells = cells

    def _solve(self, xs):
        law = make_law(self.service, **(self.service_params or {"rate": 1.0}))
        kw = {"service": law, "sigma": self.sigma, "beta": self.beta, "cells": self.cells}
        if self.dt is not None:
            kw["dt"] = self.dt
        res = quasipotential_curve(list(xs), self.T_grid, keep_controls=False, **kw)
        return {r.x: r.I_s for r in res}

    def fit(self, X, y=None):
        x = _column(X)
        self.values_ = self._solve(np.unique(x))
        return self

    def predict(self, X):
        check_is_fitted(self, "values_")
        x = _column(X)
        missing = [v for v in np.unique(x) if float(v) not in self.values_]
        if missing:
            self.values_.update(self._solve(missing))
        return np.array([self.values_[float(v)] for v in x])
