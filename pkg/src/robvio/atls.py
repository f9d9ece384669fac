"""Adaptive truncated least squares kernel.

The kernel is expressed through its outlier-process (Black-Rangarajan)
form: a weight per feature plus a penalty on that weight. Everything here is
in pixel units.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

R_HAT_FLOOR = 1.0
TRUNC_FLOOR = 0.5
_EDGE = 1.0 - 1e-6


class AtlsConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AtlsShape:
    r_max: float
    r_hat_max: float
    r_trunc: float
    mu: float

    @property
    def saturation(self):
        """Cost value of a fully rejected residual."""
        return self.r_hat_max * self.r_trunc


def compute_r_hat_max(residuals, weights, floor=R_HAT_FLOOR):
    """Largest current residual among trusted (weight one) features.

    The floor is returned when no feature is trusted and also acts as a lower
    bound, so noise-free data cannot collapse the truncation range to zero.
    """
    residuals = np.asarray(residuals, dtype=float)
    weights = np.asarray(weights, dtype=float)
    trusted = residuals[weights == 1.0]
    if trusted.size == 0:
        return float(floor)
    return max(float(np.sqrt(np.max(trusted ** 2))), float(floor))


def _mu(r_hat_max, r_trunc):
    return r_hat_max / (r_trunc - r_hat_max)


def build_shape(r_max, r_hat_max) -> AtlsShape:
    if not r_max > 0:
        raise AtlsConfigError("r_max must be positive")
    if r_hat_max < 0:
        raise AtlsConfigError("r_hat_max must be non-negative")
    r_trunc = min(r_max, 2.0 * r_hat_max)
    if r_trunc <= 0:
        raise AtlsConfigError("degenerate truncation range; use a positive r_hat_max floor")
    if r_hat_max < 0.5 * r_max:
        return AtlsShape(r_max, r_hat_max, r_trunc, 1.0)
    r_hat_max = min(r_hat_max, r_trunc * _EDGE)
    return AtlsShape(r_max, r_hat_max, r_trunc, _mu(r_hat_max, r_trunc))


def narrow(shape: AtlsShape, floor=TRUNC_FLOOR) -> AtlsShape:
    """Halve the truncation range and recompute mu from it."""
    r_trunc = max(0.5 * shape.r_trunc, floor)
    r_hat_max = min(shape.r_hat_max, r_trunc * _EDGE)
    return AtlsShape(shape.r_max, r_hat_max, r_trunc, _mu(r_hat_max, r_trunc))


def penalty(shape: AtlsShape, w):
    """Outlier-process penalty paired with the truncated cost."""
    w = np.asarray(w, dtype=float)
    return shape.mu * shape.r_hat_max * shape.r_trunc * (1.0 - w) / (shape.mu + w)


def weight_update(shape: AtlsShape, r):
    """Closed-form minimizer of ``w * r**2 + penalty(w)`` over w in [0, 1]."""
    r = np.asarray(r, dtype=float)
    scalar = r.ndim == 0
    r = np.atleast_1d(r)
    mu = shape.mu
    k = math.sqrt(mu * (mu + 1.0) * shape.r_hat_max * shape.r_trunc)
    out = np.empty_like(r)
    inlier = r * r < shape.r_hat_max ** 2
    outlier = r * r >= shape.r_trunc ** 2
    mid = ~(inlier | outlier)
    out[inlier] = 1.0
    out[outlier] = 0.0
    out[mid] = np.clip(k / r[mid] - mu, 0.0, 1.0)
    return float(out[0]) if scalar else out


def effective_cost(shape: AtlsShape, r):
    """Truncated cost evaluated through the weight/penalty pair."""
    w = weight_update(shape, r)
    return w * np.asarray(r, dtype=float) ** 2 + penalty(shape, w)


def clamp_weight(w_new, w_prev):
    return np.minimum(w_new, w_prev)


def residual_for_new_feature(residual_norms):
    """Conservative residual of a not-yet-optimized feature: the worst
    reprojection error over its observations in the window."""
    residual_norms = np.asarray(residual_norms, dtype=float)
    if residual_norms.size == 0:
        raise ValueError("feature has no observations")
    return float(np.max(residual_norms))
