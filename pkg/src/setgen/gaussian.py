"""Closed-form ML fitting of a diagonal Gaussian and the fit's input gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Descriptors are unit-norm, so coordinates live in [-1, 1]; the floor stops
# likelihood spikes on tiny or duplicated sets.
VAR_FLOOR = 1e-4

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GaussianModel:
    """Diagonal-covariance Gaussian: mean vector and per-coordinate variance."""

    mean: np.ndarray  # (n,)
    var: np.ndarray   # (n,), every entry >= VAR_FLOOR

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


@dataclass
class GaussianFitGrads:
    """Derivatives of the fitted parameters w.r.t. the input descriptors.

    The mean derivative is the same scalar for every (observation, coordinate)
    pair; ``dphi_dd[j, c]`` is the derivative of the fitted variance of
    coordinate ``c`` w.r.t. descriptor ``j``'s coordinate ``c``.  Cross
    coordinate derivatives vanish identically.
    """

    dmu_dd: float        # 1 / N
    dphi_dd: np.ndarray  # (N, n)


def _as_descriptor_set(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] == 0 or D.shape[1] == 0:
        raise ValueError("descriptor set must be a nonempty (N, n) array")
    if not np.all(np.isfinite(D)):
        raise ValueError("descriptor set contains non-finite values")
    return D


def fit_gaussian(D) -> GaussianModel:
    """ML fit: per-coordinate sample mean and (1/N)-normalized variance, floored."""
    D = _as_descriptor_set(D)
    mean = D.mean(axis=0)
    var = ((D - mean) ** 2).mean(axis=0)
    return GaussianModel(mean=mean, var=np.maximum(var, VAR_FLOOR))


def _check_point(model: GaussianModel, z: np.ndarray) -> None:
    if z.shape[-1] != model.dim:
        raise ValueError(
            f"point dimension {z.shape[-1]} != model dimension {model.dim}"
        )


def gaussian_logpdf(model: GaussianModel, z) -> float:
    """Log-density of a single point under the diagonal Gaussian."""
    z = np.asarray(z, dtype=float)
    _check_point(model, z)
    return float(gaussian_logpdf_many(model, z[None, :])[0])


def gaussian_logpdf_many(model: GaussianModel, Z) -> np.ndarray:
    """Vectorized log-density for a batch of points, shape (M, n) -> (M,)."""
    Z = np.asarray(Z, dtype=float)
    _check_point(model, Z)
    diff = Z - model.mean
    quad = (diff * diff / model.var).sum(axis=1)
    return -0.5 * (model.dim * LOG_2PI + np.log(model.var).sum() + quad)


def gaussian_fit_grads(D) -> GaussianFitGrads:
    """Analytic derivatives of the ML fit w.r.t. each descriptor coordinate.

    The mean moves at rate 1/N.  The variance derivative is (2/N)(d - mu);
    coordinates clamped by the variance floor are locally constant, so their
    derivative is zero.
    """
    D = _as_descriptor_set(D)
    N = D.shape[0]
    mean = D.mean(axis=0)
    raw_var = ((D - mean) ** 2).mean(axis=0)
    dphi = (2.0 / N) * (D - mean)
    dphi[:, raw_var < VAR_FLOOR] = 0.0
    return GaussianFitGrads(dmu_dd=1.0 / N, dphi_dd=dphi)
