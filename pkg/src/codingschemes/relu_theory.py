"""Saddle-point theory for one-hidden-layer ReLU networks.

The posterior splits into ``n`` outlier neurons, whose readouts and
preactivations are O(sqrt(N)), and an exchangeable bulk.  In rescaled
units the outliers satisfy

    a_i = t^T phi(z_i) / P,      K0^+ z_i = sigma1^2 phi'(z_i) (t a_i),

and the conjugate field is fixed by

    Y = (1 - n/N) <phi(z)>_{z|a0} a0^T + sum_i phi(z_i) a_i^T + T t,

with the bulk readout ``a0 = t^T <phi(z)>_{z|a0} / P``.  The bulk is either
dropped or, for K0 = I, evaluated in closed form.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_ndtr

from .numerics import (gauss_mean_relu, hermite_rule, range_basis, relu, relu_prime,
                       softplus, softplus_prime, solve_self_consistent, symmetrize)
from .tasks import Dataset, UnsupportedConfiguration

logger = logging.getLogger(__name__)

BULK_MODES = ("neglected", "quadrature")
_INV_SQRT_2PI = 1.0 / np.sqrt(2 * np.pi)


@dataclass
class ReLUSolution:
    t: np.ndarray
    a0: Optional[np.ndarray]
    a_bar: np.ndarray  # n x m
    z_bar: np.ndarray  # n x P
    bulk_mode: str
    T: float
    N: Optional[float]
    residual: float
    converged: bool
    dataset: Dataset
    sigma1_2: float = 1.0
    sign_consistent: bool = True
    smooth_residual: float = np.nan
    residual_families: dict = field(default_factory=dict)
    message: str = ""

    @property
    def n(self) -> int:
        return self.a_bar.shape[0]

    @property
    def outliers(self) -> list:
        return list(zip(self.a_bar, self.z_bar))

    def coded_classes(self) -> list:
        """Class carrying most of each outlier's activation mass."""
        d = self.dataset
        out = []
        for z in self.z_bar:
            mass = np.array([relu(z[d.labels == c]).sum() for c in range(d.m)])
            out.append(int(np.argmax(mass)))
        return out

    def class_purity(self) -> np.ndarray:
        """Fraction of each outlier's activation mass on its coded class."""
        d = self.dataset
        out = []
        for z in self.z_bar:
            f = relu(z)
            tot = f.sum()
            mass = np.array([f[d.labels == c].sum() for c in range(d.m)])
            out.append(mass.max() / tot if tot > 0 else 0.0)
        return np.array(out)

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "a0": None if self.a0 is None else self.a0.tolist(),
                "outliers": [{"a_bar": a.tolist(), "z_bar": z.tolist()} for a, z in self.outliers],
                "n": self.n, "bulk_mode": self.bulk_mode, "T": self.T, "N": self.N,
                "residual": self.residual, "converged": self.converged,
                "sign_consistent": self.sign_consistent,
                "residual_families": self.residual_families, "message": self.message,
                "dataset_digest": self.dataset.digest()}


def bulk_moments(h, sigma1_2: float = 1.0):
    """log Z, <phi(z)>, <phi(z)^2> for ``z ~ N(0, s2) exp(h relu(z))``.

    With u = z/s and g = h s, ``Z = 1/2 + exp(g^2/2) Phi(g)``; everything
    is evaluated through ``q = exp(-g^2/2) / Phi(g)`` to stay finite.
    """
    s = np.sqrt(sigma1_2)
    g = np.asarray(h, dtype=float) * s
    lr = 0.5 * g * g + log_ndtr(g)
    q = np.exp(-lr)
    denom = 1.0 + 0.5 * q
    m1 = (g + q * _INV_SQRT_2PI) / denom
    m2 = (1.0 + g * g + g * q * _INV_SQRT_2PI) / denom
    logZ = lr + np.log1p(0.5 * q)
    return logZ, s * m1, sigma1_2 * m2


def _is_identity(K0: np.ndarray) -> bool:
    return bool(np.abs(K0 - np.eye(len(K0))).max() < 1e-8)


def _class_targets(d: Dataset) -> np.ndarray:
    Yc = np.full((d.m, d.m), d.y_minus)
    np.fill_diagonal(Yc, d.y_plus)
    return Yc


def solve(d: Dataset, n: int, T: float = 0.0, bulk_mode: str = "neglected",
          init_seed: int = 0, N: Optional[float] = None, sigma1_2: float = 1.0,
          smooth_c: float = 10.0, tol: float = 1e-10, max_iter: int = 300,
          rank_tol: float = 1e-10, init_noise: float = 0.0,
          codes: Optional[Sequence[int]] = None, init: Optional[dict] = None) -> ReLUSolution:
    """Solve the outlier/bulk saddle point for ``n`` outliers.

    The joint system is first solved with the softplus surrogate of slope
    ``smooth_c``; the active sets it produces are then frozen and the system
    re-solved with the exact ReLU.  ``codes`` assigns a class to every
    outlier for the initialization (default ``i mod m``).  ``init`` may give
    a starting point as a dict with keys ``t`` (P x m), ``a_bar`` (n x m),
    ``z_bar`` (n x P) and optionally ``a0``, e.g. rescaled sampler outliers.
    """
    if n < 1:
        raise ValueError("need at least one outlier")
    if bulk_mode not in BULK_MODES:
        raise ValueError(f"unknown bulk mode {bulk_mode!r}")
    K0 = d.input_kernel().K0
    if bulk_mode == "quadrature" and not _is_identity(K0):
        raise UnsupportedConfiguration("bulk quadrature requires K0 == I")
    P, m = d.P, d.m
    codes = [i % m for i in range(n)] if codes is None else list(codes)
    if len(codes) != n:
        raise ValueError("need one coded class per outlier")
    V, lam = range_basis(K0, rank_tol)
    r = V.shape[1]
    Y = d.Y
    bulk = bulk_mode == "quadrature"
    fac = 1.0 if N is None else 1.0 - n / N

    def unpack(x):
        i = 0
        t = x[i:i + P * m].reshape(P, m); i += P * m
        A = x[i:i + n * m].reshape(n, m); i += n * m
        C = x[i:i + n * r].reshape(n, r); i += n * r
        a0 = x[i:i + m] if bulk else None
        return t, A, C, a0

    def make_residual(f, fp):
        def residual(x):
            t, A, C, a0 = unpack(x)
            Z = C @ V.T
            F = f(Z)
            H = A @ t.T
            fitted = F.T @ A + T * t
            parts = [(C - sigma1_2 * lam * ((fp(Z) * H) @ V)).ravel(),
                     (A - F @ t / P).ravel()]
            if bulk:
                _, mb, _ = bulk_moments(t @ a0, sigma1_2)
                fitted = fitted + fac * np.outer(mb, a0)
                parts.append(a0 - t.T @ mb / P)
            parts.insert(2, (Y - fitted).ravel())
            return np.concatenate(parts)
        return residual

    # initial point: coded-class preactivations +-1, t aligned with Y
    Z0 = np.where(d.labels[None, :] == np.array(codes)[:, None], 1.0, -1.0)
    F0 = relu(Z0)
    t0 = Y.copy()
    A0 = F0 @ t0 / P
    # rescale so the target equation holds on average
    scale = np.sqrt(max(np.sum(Y * Y), 1e-300) / max(np.sum((F0.T @ A0) ** 2), 1e-300))
    t0 *= scale
    A0 *= scale
    a00 = np.zeros(m)
    if init is not None:
        t0 = np.asarray(init["t"], dtype=float).reshape(P, m)
        A0 = np.asarray(init["a_bar"], dtype=float).reshape(n, m)
        Z0 = np.asarray(init["z_bar"], dtype=float).reshape(n, P)
        if init.get("a0") is not None:
            a00 = np.asarray(init["a0"], dtype=float).reshape(m)
    x0 = [t0.ravel(), A0.ravel(), (Z0 @ V).ravel()]
    if bulk:
        x0.append(a00)
    x0 = np.concatenate(x0)
    if init_noise:
        x0 = x0 + init_noise * np.random.default_rng(init_seed).standard_normal(x0.size)

    smooth = solve_self_consistent(
        make_residual(lambda z: softplus(z, smooth_c), lambda z: softplus_prime(z, smooth_c)),
        x0, tol=tol, max_iter=max_iter)

    # exact polish with frozen active sets
    _, _, C, _ = unpack(smooth.x)
    mask = (C @ V.T) > 0
    exact = solve_self_consistent(
        make_residual(lambda z: np.where(mask, z, 0.0), lambda z: mask.astype(float)),
        smooth.x, tol=tol, max_iter=max_iter)
    t, A, C, a0 = unpack(exact.x)
    Z = C @ V.T
    if _is_identity(K0):
        Z = np.where(mask, Z, np.minimum(Z, 0.0))
    # consistency of the frozen active sets with the exact ReLU
    ok = bool(np.all(Z[mask] > 0))
    inactive = ~mask
    if np.any(inactive):
        ok &= bool(np.all(Z[inactive] <= 1e-9))
        if _is_identity(K0):
            H = A @ t.T
            ok &= bool(np.all(H[inactive] <= 1e-9))
    sol = ReLUSolution(t=t, a0=a0, a_bar=A, z_bar=Z, bulk_mode=bulk_mode, T=T, N=N,
                       residual=np.nan, converged=False, dataset=d, sigma1_2=sigma1_2,
                       sign_consistent=ok, smooth_residual=smooth.residual_norm,
                       message=exact.message)
    fam = saddle_residuals(sol, rank_tol)
    sol.residual_families = fam
    sol.residual = float(np.sqrt(sum(v ** 2 for v in fam.values())))
    sol.converged = bool(sol.residual <= max(tol, 1e-8) * 10 and ok)
    if not ok:
        sol.message += "; active sets inconsistent with exact ReLU"
    return sol


def saddle_residuals(sol: ReLUSolution, rank_tol: float = 1e-10) -> dict:
    """Exact-ReLU residual norms of the mode, readout and target equations."""
    d = sol.dataset
    K0 = d.input_kernel().K0
    V, lam = range_basis(K0, rank_tol)
    P = d.P
    F = relu(sol.z_bar)
    H = sol.a_bar @ sol.t.T
    # K0^+ z - sigma1^2 phi'(z) t a, on the range of K0
    mode = V.T @ sol.z_bar.T / lam[:, None] - sol.sigma1_2 * V.T @ (relu_prime(sol.z_bar) * H).T
    fitted = F.T @ sol.a_bar + sol.T * sol.t
    out = {"mode": float(np.linalg.norm(mode)),
           "readout": float(np.linalg.norm(sol.a_bar - F @ sol.t / P))}
    if sol.a0 is not None:
        fac = 1.0 if sol.N is None else 1.0 - sol.n / sol.N
        _, mb, _ = bulk_moments(sol.t @ sol.a0, sol.sigma1_2)
        fitted = fitted + fac * np.outer(mb, sol.a0)
        out["bulk"] = float(np.linalg.norm(sol.a0 - sol.t.T @ mb / P))
    out["target"] = float(np.linalg.norm(d.Y - fitted))
    return out


def sweep_n(d: Dataset, ns: Optional[Sequence[int]] = None, **kwargs) -> tuple:
    """Solve for each outlier count; return (accepted solution or None, all solutions).

    The accepted count is the converged one with the smallest exact residual.
    """
    ns = [d.m - 1, d.m, d.m + 1] if ns is None else list(ns)
    sols = {}
    for n in ns:
        if n < 1:
            continue
        sols[n] = solve(d, n, **kwargs)
    ok = [s for s in sols.values() if s.converged]
    best = min(ok, key=lambda s: s.residual) if ok else None
    return best, sols


def toy_oracle(d: Dataset) -> dict:
    """Closed-form outliers for orthogonal inputs, bulk dropped, T = 0.

    Outlier c codes class c with ``z = s_c`` on that class and 0 elsewhere,
    ``s_c^4 = |y_c|^2 / p_c``, ``a_c = y_c / s_c`` and ``tau_c = y_c / (p_c s_c^2)``.
    """
    Yc = _class_targets(d)
    p = d.class_fractions
    s = (np.sum(Yc ** 2, axis=1) / p) ** 0.25
    return {"s": s, "a_bar": Yc / s[:, None], "tau": Yc / (p * s ** 2)[:, None]}


def _bulk_test_means(sol: ReLUSolution, W: np.ndarray, cond: np.ndarray,
                     second: bool = False) -> np.ndarray:
    """Bulk <phi(z(x))> (or second moment) for test coefficient columns W (K0 = I)."""
    logZ, mb, m2 = bulk_moments(sol.t @ sol.a0, sol.sigma1_2)
    mz, vz = _tilted_z_moments(sol.t @ sol.a0, sol.sigma1_2)
    rule = hermite_rule(120)
    out = np.zeros(W.shape[1])
    for j in range(W.shape[1]):
        w = W[:, j]
        k = int(np.argmax(np.abs(w)))
        m_rest = w @ mz - w[k] * mz[k]
        v_rest = (w ** 2) @ vz - w[k] ** 2 * vz[k] + sol.sigma1_2 * cond[j]
        if v_rest < 1e-14 and abs(m_rest) < 1e-14 and w[k] >= 0:
            # a training input: exact moments of the tilted coordinate
            out[j] = w[k] ** 2 * m2[k] if second else w[k] * mb[k]
            continue
        # integrate the dominant coordinate over its tilted law on a grid
        h = float(sol.t[k] @ sol.a0)
        zs = np.sqrt(sol.sigma1_2) * rule.normal_nodes
        lw = np.log(rule.normal_weights) + h * relu(zs)
        pw = np.exp(lw - lw.max())
        pw /= pw.sum()
        u = w[k] * zs + m_rest
        if second:
            vals = gauss_mean_relu(u, v_rest) ** 2 + _relu_var(u, v_rest)
        else:
            vals = gauss_mean_relu(u, v_rest)
        out[j] = pw @ vals
    return out


def _relu_var(mu, var):
    """Var[relu(z)] for z ~ N(mu, var)."""
    from scipy.special import ndtr
    mu = np.asarray(mu, dtype=float)
    s = np.sqrt(max(var, 0.0))
    if s == 0:
        return np.zeros_like(mu)
    r = mu / s
    e2 = (mu ** 2 + var) * ndtr(r) + mu * s * np.exp(-0.5 * r * r) * _INV_SQRT_2PI
    return np.maximum(e2 - gauss_mean_relu(mu, var) ** 2, 0.0)


def _tilted_z_moments(h, sigma1_2: float):
    """Mean and variance of z under N(0, s2) exp(h relu(z))."""
    s = np.sqrt(sigma1_2)
    g = np.asarray(h, dtype=float) * s
    lr = 0.5 * g * g + log_ndtr(g)
    q = np.exp(-lr)
    denom = 1.0 + 0.5 * q
    pos1 = g + q * _INV_SQRT_2PI
    pos2 = 1.0 + g * g + g * q * _INV_SQRT_2PI
    # negative half: mass q/2 relative, mean -sqrt(2/pi), second moment 1
    neg1 = -0.5 * q * np.sqrt(2 / np.pi)
    neg2 = 0.5 * q
    m1 = (pos1 + neg1) / denom
    m2 = (pos2 + neg2) / denom
    return s * m1, sigma1_2 * np.maximum(m2 - m1 * m1, 0.0)


def _test_statistics(sol: ReLUSolution, X: np.ndarray, rank_tol: float = 1e-10):
    from .numerics import pseudo_inverse
    ker = sol.dataset.input_kernel()
    Kp = pseudo_inverse(ker.K0, rank_tol)
    k0 = ker.k0(X)
    W = Kp @ k0
    cond = np.maximum(ker.kappa0(X) - np.sum(k0 * W, axis=0), 0.0)
    return W, cond


def predictor(sol: ReLUSolution, X: np.ndarray) -> np.ndarray:
    """Mean predictor on test columns; shape (P*, m)."""
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    W, cond = _test_statistics(sol, X)
    out = relu(sol.z_bar @ W).T @ sol.a_bar
    if sol.a0 is not None:
        fac = 1.0 if sol.N is None else 1.0 - sol.n / sol.N
        out = out + fac * np.outer(_bulk_test_means(sol, W, cond), sol.a0)
    return out


def kernel(sol: ReLUSolution, X_eval: Optional[np.ndarray] = None) -> np.ndarray:
    """Outlier Gram matrix plus the bulk second moment (quadrature mode).

    Without ``X_eval`` the kernel is evaluated on the training inputs.
    """
    if X_eval is None:
        F = relu(sol.z_bar)
        K = F.T @ F
        if sol.a0 is not None:
            _, mb, m2 = bulk_moments(sol.t @ sol.a0, sol.sigma1_2)
            B = np.outer(mb, mb)
            np.fill_diagonal(B, m2)
            K = K + B
        return symmetrize(K)
    X_eval = np.asarray(X_eval, dtype=float)
    W, cond = _test_statistics(sol, X_eval)
    F = relu(sol.z_bar @ W)
    K = F.T @ F
    if sol.a0 is not None:
        mb = _bulk_test_means(sol, W, cond)
        B = np.outer(mb, mb)
        np.fill_diagonal(B, _bulk_test_means(sol, W, cond, second=True))
        K = K + B
    return symmetrize(K)
