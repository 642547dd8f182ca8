"""Shared numerical kernels.

Gaussian expectations (Gauss-Hermite and closed forms for the two
nonlinearities used throughout), symmetric-matrix helpers, and a generic
solver for self-consistency equations.

Gauss-Hermite convention: ``numpy.polynomial.hermite.hermgauss`` returns
nodes ``x_k`` and weights ``w_k`` for ``int exp(-x^2) g(x) dx`` with
``sum(w_k) == sqrt(pi)``.  Expectations under ``N(mean, variance)`` are then

    E[f] = sum_k w_k f(mean + sqrt(2 variance) x_k) / sqrt(pi).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import linalg
from scipy.special import erf, ndtr

logger = logging.getLogger(__name__)

SQRT_PI = np.sqrt(np.pi)
DEFAULT_ORDER = 80


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite nodes and raw weights (weights sum to sqrt(pi))."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def normal_nodes(self) -> np.ndarray:
        """Nodes for a standard normal variable."""
        return np.sqrt(2.0) * self.nodes

    @property
    def normal_weights(self) -> np.ndarray:
        """Weights for a standard normal variable; they sum to one."""
        return self.weights / SQRT_PI


_RULES: dict[int, QuadratureRule] = {}


def hermite_rule(order: int = DEFAULT_ORDER) -> QuadratureRule:
    if order < 2:
        raise ValueError("quadrature order must be >= 2")
    rule = _RULES.get(order)
    if rule is None:
        x, w = hermgauss(order)
        x.setflags(write=False)
        w.setflags(write=False)
        rule = QuadratureRule(order=order, nodes=x, weights=w)
        _RULES[order] = rule
    return rule


def gauss_hermite_expect(f: Callable, mean=0.0, variance=1.0,
                         rule: Optional[QuadratureRule] = None):
    """Expectation of ``f(z)`` for ``z ~ N(mean, variance)``.

    ``mean`` and ``variance`` broadcast; ``f`` must accept arrays.
    """
    rule = rule or hermite_rule()
    if rule.order < 2:
        raise ValueError("quadrature order must be >= 2")
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise DomainError("variance must be nonnegative")
    scale = np.sqrt(2.0 * variance)[..., None]
    z = mean[..., None] + scale * rule.nodes
    out = np.sum(rule.weights * f(z), axis=-1) / SQRT_PI
    return out if out.ndim else float(out)


def erf_sigmoid(z):
    """phi(z) = (1 + erf(sqrt(pi) z / 2)) / 2; slope 1/2 at the origin."""
    return 0.5 * (1.0 + erf(0.5 * SQRT_PI * np.asarray(z, dtype=float)))


def erf_sigmoid_prime(z):
    z = np.asarray(z, dtype=float)
    return 0.5 * np.exp(-np.pi * z * z / 4.0)


def relu(z):
    return np.maximum(np.asarray(z, dtype=float), 0.0)


def relu_prime(z):
    return (np.asarray(z, dtype=float) > 0).astype(float)


def softplus(z, c: float = 10.0):
    """Smooth ReLU surrogate ``log(1 + exp(c z)) / c``."""
    return np.logaddexp(0.0, c * np.asarray(z, dtype=float)) / c


def softplus_prime(z, c: float = 10.0):
    from scipy.special import expit
    return expit(c * np.asarray(z, dtype=float))


def gauss_mean_erf(mu, variance):
    """<phi(z)> for z ~ N(mu, variance) with the erf sigmoid.

    Closed form phi(mu / sqrt(1 + pi variance / 2)).
    """
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise DomainError("variance must be nonnegative")
    out = erf_sigmoid(np.asarray(mu, dtype=float) / np.sqrt(1.0 + 0.5 * np.pi * variance))
    return out if np.ndim(out) else float(out)


def gauss_mean_relu(mu, variance):
    """<max(0, z)> for z ~ N(mu, variance).

    sigma/sqrt(2 pi) exp(-mu^2 / 2 sigma^2) + mu H(-mu/sigma), with H the
    Gaussian tail probability; reduces to max(0, mu) at zero variance.
    """
    mu = np.asarray(mu, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < 0):
        raise DomainError("variance must be nonnegative")
    sigma = np.sqrt(variance)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(sigma > 0, mu / np.where(sigma > 0, sigma, 1.0), 0.0)
        smooth = sigma * np.exp(-0.5 * r * r) / np.sqrt(2 * np.pi) + mu * ndtr(r)
    out = np.where(sigma > 0, smooth, np.maximum(mu, 0.0))
    return out if out.ndim else float(out)


def symmetrize(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {M.shape}")
    return 0.5 * (M + M.T)


def is_psd(M: np.ndarray, tol: float = 1e-8) -> bool:
    w = np.linalg.eigvalsh(symmetrize(M))
    scale = max(float(np.max(np.abs(w))), 1e-300)
    return bool(w.min() >= -tol * scale)


def pseudo_inverse(M: np.ndarray, rank_tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric matrix by eigendecomposition.

    Eigenvalues with ``|lambda| <= rank_tol * max|lambda|`` are dropped.
    """
    w, V = np.linalg.eigh(symmetrize(M))
    cutoff = rank_tol * np.max(np.abs(w), initial=0.0)
    keep = np.abs(w) > cutoff
    if not np.any(keep):
        return np.zeros_like(V)
    Vk = V[:, keep]
    return symmetrize((Vk / w[keep]) @ Vk.T)


def range_basis(M: np.ndarray, rank_tol: float = 1e-10):
    """Orthonormal basis of the range of symmetric ``M`` and its eigenvalues."""
    w, V = np.linalg.eigh(symmetrize(M))
    keep = np.abs(w) > rank_tol * np.max(np.abs(w), initial=0.0)
    return V[:, keep], w[keep]


def matrix_root(M: np.ndarray, k: int, tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD ``R`` with ``R**k == M`` for symmetric PSD ``M``."""
    if int(k) != k or k < 1:
        raise ValueError("k must be a positive integer")
    w, V = np.linalg.eigh(symmetrize(M))
    scale = np.max(np.abs(w), initial=0.0)
    if w.size and w.min() < -tol * max(scale, 1e-300):
        raise DomainError(f"matrix has negative eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return symmetrize((V * w ** (1.0 / k)) @ V.T)


def matrix_power_sym(M: np.ndarray, p: float) -> np.ndarray:
    """Real power of a symmetric positive definite matrix."""
    w, V = np.linalg.eigh(symmetrize(M))
    if w.min() <= 0 and p < 0:
        raise np.linalg.LinAlgError("singular matrix raised to a negative power")
    return symmetrize((V * w ** p) @ V.T)


def cholesky_with_jitter(K: np.ndarray, jitters=(0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)):
    """Cholesky factor of ``K``, escalating diagonal jitter on failure.

    Jitter is relative to the mean diagonal.  Returns ``(factor, jitter)``
    in scipy ``cho_factor`` form.
    """
    K = symmetrize(K)
    scale = float(np.mean(np.diag(K))) or 1.0
    for j in jitters:
        try:
            c = linalg.cho_factor(K + j * scale * np.eye(len(K)), lower=True)
        except linalg.LinAlgError:
            continue
        if j:
            logger.warning("Cholesky needed jitter %.0e", j)
        return c, j
    raise np.linalg.LinAlgError("Cholesky failed after maximum jitter")


@dataclass
class SolveResult:
    x: np.ndarray
    residual_norm: float
    converged: bool
    n_iter: int
    history: list = field(default_factory=list)
    message: str = ""


def fd_jacobian(residual: Callable, x: np.ndarray, r0: Optional[np.ndarray] = None,
                rel_step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian, step ``rel_step * (1 + |x_j|)``."""
    x = np.asarray(x, dtype=float)
    if r0 is None:
        r0 = residual(x)
    J = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = rel_step * (1.0 + abs(x[j]))
        xp = x.copy()
        xp[j] += h
        xm = x.copy()
        xm[j] -= h
        J[:, j] = (residual(xp) - residual(xm)) / (2 * h)
    return J


def solve_self_consistent(residual: Callable, init, tol: float = 1e-10,
                          max_iter: int = 500, jac: Optional[Callable] = None,
                          rel_step: float = 1e-6) -> SolveResult:
    """Drive ``residual(x)`` to zero by minimizing ``|residual(x)|^2``.

    Levenberg-Marquardt on the auxiliary squared loss: each step uses the
    gradient ``J^T r`` and Gauss-Newton curvature, with ``J`` from ``jac`` or
    central differences.  Only steps that lower the residual norm are
    accepted, so ``history`` is non-increasing.  Failure to reach ``tol``
    is reported through ``converged=False`` with the best iterate.
    """
    x = np.array(init, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("initial point must be finite")
    r = np.asarray(residual(x), dtype=float).ravel()
    norm = float(np.linalg.norm(r))
    history = [norm]
    lam = 1e-3
    it = 0
    message = "max_iter reached"
    while it < max_iter:
        if norm <= tol:
            message = "converged"
            break
        it += 1
        J = jac(x) if jac is not None else fd_jacobian(residual, x, r, rel_step)
        g = J.T @ r
        A = J.T @ J
        d = np.diag(A).copy()
        d[d < 1e-12] = 1e-12
        accepted = False
        while lam < 1e16:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", linalg.LinAlgWarning)
                    step = -linalg.solve(A + lam * np.diag(d), g, assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                lam *= 10.0
                continue
            x_new = x + step
            r_new = np.asarray(residual(x_new), dtype=float).ravel()
            norm_new = float(np.linalg.norm(r_new))
            if np.isfinite(norm_new) and norm_new < norm:
                x, r, norm = x_new, r_new, norm_new
                lam = max(lam / 5.0, 1e-15)
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            message = "no descent step found"
            break
        history.append(norm)
    else:
        if norm <= tol:
            message = "converged"
    converged = norm <= tol
    if converged:
        message = "converged"
    return SolveResult(x=x, residual_norm=norm, converged=converged,
                       n_iter=it, history=history, message=message)
