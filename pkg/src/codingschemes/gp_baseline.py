"""Infinite-width lazy baseline: NNGP kernels and the ridgeless GP predictor."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .numerics import cholesky_with_jitter, symmetrize
from .tasks import Dataset

logger = logging.getLogger(__name__)

NONLINEARITIES = ("linear", "erf-sigmoid", "relu")


@dataclass
class GPKernel:
    nonlinearity: str = "linear"
    L: int = 1
    sigma_l2: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.sigma_l2 is None:
            self.sigma_l2 = [1.0] * self.L
        if len(self.sigma_l2) != self.L:
            raise ValueError("need one prior variance per layer")


def _correlation(q12, q11, q22):
    denom = np.sqrt(q11 * q22)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(denom > 0, q12 / np.where(denom > 0, denom, 1.0), 0.0)
    if np.any(np.abs(c) > 1 + 1e-12):
        warnings.warn("correlation outside [-1, 1]; clamping", RuntimeWarning)
    return np.clip(c, -1.0, 1.0)


def _layer(nonlinearity: str, q12, q11, q22):
    """<phi(z1) phi(z2)> for zero-mean Gaussians with covariance [[q11,q12],[q12,q22]]."""
    if nonlinearity == "linear":
        return q12
    if nonlinearity == "relu":
        c = _correlation(q12, q11, q22)
        theta = np.arccos(c)
        return np.sqrt(q11 * q22) / (2 * np.pi) * (np.sin(theta) + (np.pi - theta) * c)
    # phi(z) = (1 + erf(a z)) / 2 with a = sqrt(pi)/2, so 2 a^2 = pi / 2
    arg = 0.5 * np.pi * q12 / np.sqrt((1 + 0.5 * np.pi * q11) * (1 + 0.5 * np.pi * q22))
    if np.any(np.abs(arg) > 1 + 1e-12):
        warnings.warn("arcsine argument outside [-1, 1]; clamping", RuntimeWarning)
    return 0.25 + np.arcsin(np.clip(arg, -1.0, 1.0)) / (2 * np.pi)


def kernel_recursion(k: GPKernel, K12, K11, K22):
    """Propagate input overlaps through ``k.L`` layers.

    ``K12`` holds cross overlaps and ``K11``/``K22`` the matching diagonal
    overlaps (broadcastable); returns the last-layer values.
    """
    K12, K11, K22 = (np.asarray(a, dtype=float) for a in (K12, K11, K22))
    for s2 in k.sigma_l2:
        q12, q11, q22 = s2 * K12, s2 * K11, s2 * K22
        K12, K11, K22 = (_layer(k.nonlinearity, q12, q11, q22),
                         _layer(k.nonlinearity, q11, q11, q11),
                         _layer(k.nonlinearity, q22, q22, q22))
    return K12


def gp_kernel(k: GPKernel, X1: np.ndarray, X2: Optional[np.ndarray] = None) -> np.ndarray:
    """NNGP kernel between input columns; a scalar for two vectors.

    With ``X2`` omitted the symmetric Gram matrix of ``X1`` is returned.
    """
    X1 = np.asarray(X1, dtype=float)
    vector = X1.ndim == 1
    X1 = X1[:, None] if vector else X1
    same = X2 is None
    X2 = X1 if same else np.asarray(X2, dtype=float)
    X2 = X2[:, None] if X2.ndim == 1 else X2
    N0 = X1.shape[0]
    K12 = X1.T @ X2 / N0
    d1 = np.sum(X1 * X1, axis=0) / N0
    d2 = np.sum(X2 * X2, axis=0) / N0
    out = kernel_recursion(k, K12, d1[:, None], d2[None, :])
    if same:
        out = symmetrize(out)
    if vector and out.shape == (1, 1):
        return float(out[0, 0])
    return out


def gp_diag(k: GPKernel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    d = np.sum(X * X, axis=0) / X.shape[0]
    return kernel_recursion(k, d, d, d)


@dataclass
class GPPrediction:
    mean: np.ndarray
    variance: np.ndarray
    jitter: float = 0.0


def gp_predict(k: GPKernel, d: Dataset, X_test: np.ndarray) -> GPPrediction:
    """Ridgeless GP mean k^T K^-1 Y and variance kappa - k^T K^-1 k."""
    K = gp_kernel(k, d.X)
    cho, jitter = cholesky_with_jitter(K)
    kx = gp_kernel(k, d.X, X_test)
    mean = kx.T @ linalg.cho_solve(cho, d.Y)
    v = linalg.solve_triangular(cho[0], kx, lower=True)
    var = gp_diag(k, X_test) - np.sum(v * v, axis=0)
    return GPPrediction(mean=mean, variance=np.maximum(var, 0.0), jitter=jitter)


@dataclass
class ErrorDecomposition:
    total: np.ndarray
    bias: np.ndarray
    variance: np.ndarray

    def to_dict(self) -> dict:
        return {"total": self.total.tolist(), "bias": self.bias.tolist(),
                "variance": self.variance.tolist()}


def gp_generalization_error(k: GPKernel, d: Dataset, X_test: np.ndarray,
                            Y_test: np.ndarray) -> ErrorDecomposition:
    """Class-wise error: mean over test inputs of squared bias plus variance."""
    pred = gp_predict(k, d, X_test)
    bias = np.mean((np.asarray(Y_test) - pred.mean) ** 2, axis=0)
    variance = np.full(d.m, float(np.mean(pred.variance)))
    return ErrorDecomposition(total=bias + variance, bias=bias, variance=variance)
