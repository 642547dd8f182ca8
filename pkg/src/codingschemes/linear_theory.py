"""Zero-temperature posterior of deep linear networks in the non-lazy regime.

In the large-P limit the single-neuron readout posterior is N(0, U) with

    U^(L+1) = sigma_a^(2L) / prod(sigma_l^2) * Y^T K0^+ Y,

and every kernel is the prior kernel plus a rank-m learned part.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import DomainError, matrix_root, pseudo_inverse, symmetrize
from .tasks import Dataset, InputKernel


class NumericalError(ArithmeticError):
    pass


def default_sigma_a2(P: int, L: int) -> float:
    return float(P) ** (-1.0 / L)


@dataclass
class LinearSolution:
    U: np.ndarray
    L: int
    sigma_a2: float
    sigma_l2: np.ndarray
    dataset: Dataset
    K0_pinv: np.ndarray

    @property
    def kernel(self) -> InputKernel:
        return self.dataset.input_kernel()

    def U_power(self, p: int) -> np.ndarray:
        """U**p for integer p, negative powers on the range of U.

        A negative power is an error if the targets reach the null space of U.
        """
        w, V = np.linalg.eigh(self.U)
        if p >= 0:
            return symmetrize((V * w ** p) @ V.T)
        cutoff = 1e-12 * max(float(np.abs(w).max(initial=0.0)), 1e-300)
        null = np.abs(w) <= cutoff
        if np.any(null):
            leak = np.abs(self.dataset.Y @ V[:, null]).max(initial=0.0)
            if leak > 1e-10:
                raise NumericalError("readout covariance U is singular on the target span")
        wi = np.zeros_like(w)
        wi[~null] = w[~null] ** p
        return symmetrize((V * wi) @ V.T)

    def learned_strength(self, layer: int) -> float:
        """sigma_a^(2(L-l)) / prod_{l'>l} sigma_l'^2."""
        return self.sigma_a2 ** (self.L - layer) / float(np.prod(self.sigma_l2[layer:]))

    def to_dict(self) -> dict:
        return {"U": self.U.tolist(), "L": self.L, "sigma_a2": self.sigma_a2,
                "sigma_l2": list(map(float, self.sigma_l2)), "P": self.dataset.P,
                "m": self.dataset.m, "N0": self.dataset.N0,
                "dataset_digest": self.dataset.digest()}


def solve_readout_covariance(d: Dataset, L: int = 1, sigma_a2: Optional[float] = None,
                             sigma_l2: Optional[Sequence[float]] = None,
                             rank_tol: float = 1e-10) -> LinearSolution:
    """Readout covariance U from the large-P self-consistency.

    ``sigma_a2`` defaults to P^(-1/L); ``sigma_l2`` to ones.
    """
    if L < 1:
        raise ValueError("depth L must be >= 1")
    if sigma_a2 is None:
        sigma_a2 = default_sigma_a2(d.P, L)
    if sigma_a2 <= 0:
        raise ValueError("sigma_a2 must be positive")
    s2 = np.ones(L) if sigma_l2 is None else np.asarray(sigma_l2, dtype=float)
    if s2.shape != (L,):
        raise ValueError(f"need {L} hidden prior variances, got {s2.shape}")
    K0_pinv = pseudo_inverse(d.input_kernel().K0, rank_tol)
    rhs = sigma_a2 ** L / np.prod(s2) * (d.Y.T @ K0_pinv @ d.Y)
    try:
        U = matrix_root(rhs, L + 1)
    except DomainError as exc:
        raise NumericalError(f"Y^T K0^+ Y is not PSD: {exc}") from None
    return LinearSolution(U=U, L=L, sigma_a2=float(sigma_a2), sigma_l2=s2, dataset=d,
                          K0_pinv=K0_pinv)


def training_kernels(sol: LinearSolution) -> list:
    """Posterior-averaged kernels K_1..K_L on the training inputs."""
    d = sol.dataset
    K0 = d.input_kernel().K0
    out = []
    for layer in range(1, sol.L + 1):
        prior = np.prod(sol.sigma_l2[:layer]) * K0
        learned = d.Y @ sol.U_power(-(sol.L - layer + 1)) @ d.Y.T
        out.append(symmetrize(prior + sol.learned_strength(layer) * learned))
    return out


def mean_predictor(sol: LinearSolution, X_test: np.ndarray) -> np.ndarray:
    """f(x) = Y^T K0^+ k0(x) for every test column; shape (P*, m)."""
    k0 = sol.kernel.k0(np.atleast_2d(np.asarray(X_test, dtype=float).T).T)
    return k0.T @ sol.K0_pinv @ sol.dataset.Y


def test_kernels(sol: LinearSolution, x1: np.ndarray, x2: np.ndarray) -> list:
    """kappa_1..kappa_L for a pair of inputs."""
    ker = sol.kernel
    f1 = mean_predictor(sol, np.asarray(x1)[:, None])[0]
    f2 = mean_predictor(sol, np.asarray(x2)[:, None])[0]
    kappa0 = ker.kappa0(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
    out = []
    for layer in range(1, sol.L + 1):
        learned = f1 @ sol.U_power(-(sol.L - layer + 1)) @ f2
        out.append(float(np.prod(sol.sigma_l2[:layer]) * kappa0
                         + sol.learned_strength(layer) * learned))
    return out


def conditional_input_variance(sol: LinearSolution, x: np.ndarray) -> float:
    """kappa0(x) - k0(x)^T K0^+ k0(x)."""
    x = np.asarray(x, dtype=float)
    k0 = sol.kernel.k0(x)
    return float(sol.kernel.kappa0(x) - k0 @ sol.K0_pinv @ k0)


def predictor_variance(sol: LinearSolution, x: np.ndarray, N: float) -> np.ndarray:
    """Posterior covariance of the network output at ``x`` for width ``N``.

    sigma_a^(2(1-L)) prod(sigma_l^2) / N * U^L * (kappa0 - k0^T K0^+ k0).
    At L=1 this is U (kappa0 - k0^T K0^+ k0) / N.
    """
    if N <= 0:
        raise ValueError("width N must be positive")
    resid = max(conditional_input_variance(sol, x), 0.0)
    pref = sol.sigma_a2 ** (1 - sol.L) * np.prod(sol.sigma_l2) / N
    return symmetrize(pref * sol.U_power(sol.L) * resid)


def sample_readout(sol: LinearSolution, count: int, seed: int = 0) -> np.ndarray:
    """i.i.d. draws from N(0, U); shape (count, m)."""
    rng = np.random.default_rng(seed)
    root = matrix_root(sol.U, 2)
    return rng.standard_normal((count, sol.U.shape[0])) @ root
