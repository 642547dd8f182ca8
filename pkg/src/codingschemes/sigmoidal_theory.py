"""Saddle-point theory for one-hidden-layer erf-sigmoid networks.

The readout posterior concentrates on a few atoms ``a_g`` with population
fractions ``P_g``.  Together with the conjugate field ``t`` (P x m) they
solve

    a_g = t^T <phi(z)>_{z|a_g} / P
    Y   = sum_g P_g <phi(z)>_{z|a_g} a_g^T + T t
    P_g = exp(-P E(a_g|t)) / sum_g' exp(-P E(a_g'|t))

with the single-neuron energy ``E(a|t) = a.a/2 - log <exp(a^T t^T phi(z))>/P``
and ``sigma_a^2 = 1/P``.  Two routes are provided: orthogonal inputs
(K0 = I), where expectations factorize over inputs and are computed by
1-D quadrature, and general inputs, where ``P(z|a_g)`` is replaced by a
point mass at the mode ``z_g``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .numerics import (DEFAULT_ORDER, QuadratureRule, SolveResult, erf_sigmoid,
                       erf_sigmoid_prime, gauss_mean_erf, hermite_rule, range_basis,
                       solve_self_consistent, symmetrize)
from .tasks import Dataset, UnsupportedConfiguration

logger = logging.getLogger(__name__)

phi = erf_sigmoid
dphi = erf_sigmoid_prime

# value of phi at the saturating initial preactivation +-2
_INIT_Z = 2.0


@dataclass(frozen=True, order=True)
class CodePattern:
    """Subset of classes that activate a neuron, e.g. ``CodePattern.parse("110")``."""

    bits: tuple

    @classmethod
    def parse(cls, text: str) -> "CodePattern":
        text = text.replace("-", "").strip()
        if not text or set(text) - {"0", "1"}:
            raise ValueError(f"bad code pattern {text!r}")
        return cls(tuple(int(c) for c in text))

    @classmethod
    def from_active(cls, active: Iterable[int], m: int) -> "CodePattern":
        active = set(active)
        return cls(tuple(int(r in active) for r in range(m)))

    @property
    def m(self) -> int:
        return len(self.bits)

    @property
    def active(self) -> frozenset:
        return frozenset(r for r, b in enumerate(self.bits) if b)

    @property
    def empty(self) -> bool:
        return not any(self.bits)

    def permuted(self, perm: Sequence[int]) -> "CodePattern":
        """Relabel classes: class ``r`` becomes ``perm[r]``."""
        bits = [0] * self.m
        for r, b in enumerate(self.bits):
            bits[perm[r]] = b
        return CodePattern(tuple(bits))

    def __str__(self) -> str:
        return "".join(map(str, self.bits))


def parse_codes(codes) -> list:
    out = []
    for c in codes:
        out.append(c if isinstance(c, CodePattern) else CodePattern.parse(str(c)))
    return out


def enumerate_codes(m: int) -> list:
    """All nonempty codes for ``m`` classes (m <= 4)."""
    if m > 4:
        raise UnsupportedConfiguration("code enumeration is limited to m <= 4")
    return [CodePattern(b) for b in itertools.product((0, 1), repeat=m) if any(b)]


@dataclass
class Branch:
    a: np.ndarray
    weight: float
    code: CodePattern
    hypothesis: CodePattern
    z: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "weight": self.weight, "code": str(self.code),
                "hypothesis": str(self.hypothesis),
                "z": None if self.z is None else self.z.tolist()}


@dataclass
class SigmoidalSolution:
    t: np.ndarray
    branches: list
    T: float
    energies: list
    energy_t: float
    residual: float
    converged: bool
    mode: str
    dataset: Dataset
    sigma1_2: float = 1.0
    order: int = DEFAULT_ORDER
    message: str = ""
    residual_families: dict = field(default_factory=dict)
    weight_mode: str = "boltzmann"

    @property
    def weights(self) -> np.ndarray:
        return np.array([b.weight for b in self.branches])

    @property
    def atoms(self) -> np.ndarray:
        return np.array([b.a for b in self.branches])

    @property
    def codes(self) -> list:
        return [b.code for b in self.branches]

    @property
    def code_set(self) -> frozenset:
        return frozenset(str(b.code) for b in self.branches)

    @property
    def hypothesis_set(self) -> frozenset:
        return frozenset(str(b.hypothesis) for b in self.branches)

    @property
    def codes_match(self) -> bool:
        """Every branch realizes its hypothesized code."""
        return all(b.code == b.hypothesis for b in self.branches)

    @property
    def energy_spread(self) -> float:
        return float(np.ptp(self.energies)) if self.energies else 0.0

    def to_dict(self) -> dict:
        return {"mode": self.mode, "T": self.T, "converged": self.converged,
                "residual": self.residual, "energy_t": self.energy_t,
                "energies": list(map(float, self.energies)),
                "energy_spread": self.energy_spread, "message": self.message,
                "weight_mode": self.weight_mode,
                "residual_families": self.residual_families,
                "branches": [b.to_dict() for b in self.branches], "t": self.t.tolist(),
                "dataset_digest": self.dataset.digest()}


# --- tilted single-input statistics -------------------------------------------

class TiltedStats:
    """Moments of ``z ~ N(0, s2) exp(h phi(z))`` on a Gauss-Hermite grid."""

    def __init__(self, rule: QuadratureRule, sigma1_2: float = 1.0):
        self.rule = rule
        self.z = np.sqrt(sigma1_2) * rule.normal_nodes
        self.w = rule.normal_weights
        self.phi = phi(self.z)

    def probs(self, h: np.ndarray):
        h = np.asarray(h, dtype=float)
        e = h[..., None] * self.phi
        shift = e.max(axis=-1, keepdims=True)
        W = self.w * np.exp(e - shift)
        Z = W.sum(axis=-1, keepdims=True)
        return W / Z, np.log(Z[..., 0]) + shift[..., 0]

    def __call__(self, h: np.ndarray):
        """Return (log Z, <phi>, Var[phi])."""
        p, logZ = self.probs(h)
        g = p @ self.phi
        var = np.maximum(p @ self.phi ** 2 - g * g, 0.0)
        return logZ, g, var

    def z_moments(self, h: np.ndarray):
        p, _ = self.probs(h)
        mz = p @ self.z
        return mz, np.maximum(p @ self.z ** 2 - mz * mz, 0.0)


def _class_targets(d: Dataset) -> np.ndarray:
    """Row c holds the target vector of class c."""
    Yc = np.full((d.m, d.m), d.y_minus)
    np.fill_diagonal(Yc, d.y_plus)
    return Yc


def _code_activation(codes, m: int) -> np.ndarray:
    return np.array([[phi(_INIT_Z) if b else phi(-_INIT_Z) for b in c.bits] for c in codes])


def _initial_guess(Yc: np.ndarray, p: np.ndarray, S: np.ndarray):
    """Class-level readouts and conjugate field consistent with activations S (n x m)."""
    n = S.shape[0]
    weights = np.full(n, 1.0 / n)
    # Yc[c] = sum_g P_g S[g, c] A[g]
    A = np.linalg.lstsq(S.T * weights, Yc, rcond=None)[0]
    # A[g] = sum_c p_c S[g, c] tau[c]
    tau = np.linalg.lstsq(S * p, A, rcond=None)[0]
    return tau, A


def _check_identity(d: Dataset, tol: float = 1e-8):
    K0 = d.input_kernel().K0
    if np.abs(K0 - np.eye(d.P)).max() > tol:
        raise UnsupportedConfiguration("orthogonal solver requires K0 == I")


WEIGHT_MODES = ("boltzmann", "free")


def _check_weights(weights: str) -> bool:
    if weights not in WEIGHT_MODES:
        raise ValueError(f"unknown weight mode {weights!r}")
    return weights == "boltzmann"


# --- orthogonal inputs ---------------------------------------------------------

def solve_orthogonal(d: Dataset, codes, T: float = 0.0, init_seed: int = 0,
                     expectation: str = "quadrature", order: int = DEFAULT_ORDER,
                     sigma1_2: float = 1.0, tol: float = 1e-10, max_iter: int = 300,
                     init_noise: float = 0.0, init=None,
                     weights: str = "boltzmann") -> SigmoidalSolution:
    """Solve the saddle-point equations for orthogonal inputs.

    Class symmetry reduces ``t`` to one m-vector per class and the branch
    statistics to one value per (branch, class).  ``expectation`` selects
    exact 1-D quadrature (``"quadrature"``) or the point-mass approximation
    (``"delta"``) used by :func:`solve_general`.  The full P x m residual is
    evaluated at the reduced solution and reported.
    """
    _check_identity(d)
    codes = parse_codes(codes)
    if any(c.m != d.m for c in codes):
        raise ValueError("code length must equal the number of classes")
    if expectation not in ("quadrature", "delta"):
        raise ValueError(f"unknown expectation {expectation!r}")
    m, n, P = d.m, len(codes), d.P
    p = d.class_fractions
    Yc = _class_targets(d)
    stats = TiltedStats(hermite_rule(order), sigma1_2)
    delta = expectation == "delta"
    boltzmann = _check_weights(weights)

    def unpack(x):
        tau = x[:m * m].reshape(m, m)
        A = x[m * m:m * m + n * m].reshape(n, m)
        s = np.concatenate([[0.0], x[m * m + n * m:m * m + n * m + n - 1]])
        Zc = x[m * m + n * m + n - 1:].reshape(n, m) if delta else None
        return tau, A, s, Zc

    def branch_stats(tau, A, Zc):
        H = A @ tau.T  # H[g, c] = tau_c . a_g
        if delta:
            G = phi(Zc)
            logZ = H * G - Zc ** 2 / (2 * sigma1_2)
            return H, logZ, G
        logZ, G, _ = stats(H)
        return H, logZ, G

    def residual(x):
        tau, A, s, Zc = unpack(x)
        H, logZ, G = branch_stats(tau, A, Zc)
        Pw = softmax(s)
        E = 0.5 * np.sum(A * A, axis=1) - logZ @ p
        parts = [(A - (G * p) @ tau).ravel(),
                 (Yc - (G.T * Pw) @ A - T * tau).ravel()]
        if boltzmann:
            parts.append(s[1:] - s[0] + P * (E[1:] - E[0]))
        if delta:
            parts.append((Zc - sigma1_2 * H * dphi(Zc)).ravel())
        return np.concatenate(parts)

    if init is None:
        S = _code_activation(codes, m)
        tau0, A0 = _initial_guess(Yc, p, S)
        x0 = [tau0.ravel(), A0.ravel(), np.zeros(n - 1)]
        if delta:
            x0.append(np.where(np.array([c.bits for c in codes]) > 0, _INIT_Z, -_INIT_Z).ravel())
        x0 = np.concatenate(x0)
    else:
        x0 = np.asarray(init, dtype=float)
    if init_noise:
        x0 = x0 + init_noise * np.random.default_rng(init_seed).standard_normal(x0.size)

    res = solve_self_consistent(residual, x0, tol=tol, max_iter=max_iter)
    tau, A, s, Zc = unpack(res.x)
    H, logZ, G = branch_stats(tau, A, Zc)
    Pw = softmax(s)
    t = tau[d.labels]
    branches = []
    for g in range(n):
        if delta:
            z = Zc[g][d.labels]
        else:
            z = stats.z_moments(H[g])[0][d.labels]
        branches.append(Branch(a=A[g].copy(), weight=float(Pw[g]),
                               code=CodePattern(tuple(int(v > 0.5) for v in G[g])),
                               hypothesis=codes[g], z=z))
    sol = SigmoidalSolution(t=t, branches=branches, T=T, energies=[], energy_t=np.nan,
                            residual=np.nan, converged=False,
                            mode="delta" if delta else "quadrature", dataset=d,
                            sigma1_2=sigma1_2, order=order, message=res.message,
                            weight_mode=weights)
    sol.energies = branch_energy(sol, d)
    sol.energy_t = energy_t(sol)
    fam = saddle_residuals(sol)
    sol.residual_families = fam
    sol.residual = float(np.sqrt(sum(v ** 2 for v in fam.values())))
    sol.converged = bool(res.converged and sol.residual <= max(tol, 1e-8) * 10)
    return sol


# --- general inputs ------------------------------------------------------------

def solve_general(d: Dataset, codes, T: float = 0.0, init_seed: int = 0,
                  sigma1_2: float = 1.0, tol: float = 1e-10, max_iter: int = 300,
                  rank_tol: float = 1e-10, init_noise: float = 0.0,
                  init=None, weights: str = "boltzmann") -> SigmoidalSolution:
    """Point-mass saddle point for arbitrary input kernels.

    ``init`` is a previous solution or a dict with keys ``t``, ``atoms``,
    ``z`` and ``weights`` (see ``init_from_samples``).

    Unknowns are ``t``, the atoms ``a_g``, the modes ``z_g`` (restricted to
    the range of K0) and the branch weights.  The mode equation
    ``K0^+ z_g = sigma1^2 phi'(z_g) t a_g`` is solved in the form
    ``z_g = sigma1^2 K0 (phi'(z_g) t a_g)`` projected on the range of K0.
    """
    codes = parse_codes(codes)
    boltzmann = _check_weights(weights)
    m, n, P = d.m, len(codes), d.P
    K0 = d.input_kernel().K0
    V, lam = range_basis(K0, rank_tol)
    r = V.shape[1]
    Y = d.Y

    def unpack(x):
        i = 0
        t = x[i:i + P * m].reshape(P, m); i += P * m
        A = x[i:i + n * m].reshape(n, m); i += n * m
        C = x[i:i + n * r].reshape(n, r); i += n * r
        s = np.concatenate([[0.0], x[i:i + n - 1]])
        return t, A, C, s

    def residual(x):
        t, A, C, s = unpack(x)
        Z = C @ V.T  # n x P
        F = phi(Z)
        H = A @ t.T  # n x P, (t a_g)_mu
        Pw = softmax(s)
        Ez = 0.5 * np.sum(C * C / lam, axis=1) / sigma1_2 - np.sum(H * F, axis=1)
        E = 0.5 * np.sum(A * A, axis=1) + Ez / P
        parts = [(C - sigma1_2 * lam * ((dphi(Z) * H) @ V)).ravel(),
                 (A - F @ t / P).ravel(),
                 (Y - (F.T * Pw) @ A - T * t).ravel()]
        if boltzmann:
            parts.append(s[1:] - s[0] + P * (E[1:] - E[0]))
        return np.concatenate(parts)

    if isinstance(init, dict):
        t0 = np.asarray(init["t"], dtype=float).reshape(P, m)
        A0 = np.asarray(init["atoms"], dtype=float).reshape(n, m)
        Z0 = np.asarray(init["z"], dtype=float).reshape(n, P)
        s0 = np.log(np.maximum(np.asarray(init["weights"], dtype=float), 1e-300))
        s0 = (s0 - s0[0])[1:]
    elif init is not None:
        t0 = init.t
        A0 = init.atoms
        Z0 = np.array([b.z for b in init.branches])
        s0 = np.log(np.maximum(init.weights, 1e-300))
        s0 = (s0 - s0[0])[1:]
    else:
        p = d.class_fractions
        S = _code_activation(codes, m)
        tau0, A0 = _initial_guess(_class_targets(d), p, S)
        t0 = tau0[d.labels]
        bits = np.array([c.bits for c in codes])
        Z0 = np.where(bits[:, d.labels] > 0, _INIT_Z, -_INIT_Z).astype(float)
        s0 = np.zeros(n - 1)
    x0 = np.concatenate([t0.ravel(), A0.ravel(), (Z0 @ V).ravel(), s0])
    if init_noise:
        x0 = x0 + init_noise * np.random.default_rng(init_seed).standard_normal(x0.size)

    res = solve_self_consistent(residual, x0, tol=tol, max_iter=max_iter)
    t, A, C, s = unpack(res.x)
    Z = C @ V.T
    F = phi(Z)
    Pw = softmax(s)
    branches = []
    for g in range(n):
        cls_mean = np.array([F[g][d.labels == c].mean() if np.any(d.labels == c) else 0.0
                             for c in range(m)])
        branches.append(Branch(a=A[g].copy(), weight=float(Pw[g]),
                               code=CodePattern(tuple(int(v > 0.5) for v in cls_mean)),
                               hypothesis=codes[g], z=Z[g].copy()))
    sol = SigmoidalSolution(t=t, branches=branches, T=T, energies=[], energy_t=np.nan,
                            residual=np.nan, converged=False, mode="delta", dataset=d,
                            sigma1_2=sigma1_2, message=res.message, weight_mode=weights)
    sol.energies = branch_energy(sol, d)
    sol.energy_t = energy_t(sol)
    fam = saddle_residuals(sol, rank_tol=rank_tol)
    sol.residual_families = fam
    sol.residual = float(np.sqrt(sum(v ** 2 for v in fam.values())))
    sol.converged = bool(res.converged and sol.residual <= max(tol, 1e-8) * 10)
    return sol


def init_from_samples(d: Dataset, readouts: np.ndarray, preacts: np.ndarray,
                      outputs: np.ndarray, codes, T: float) -> dict:
    """Starting point for ``solve_general`` from a sampled network.

    ``readouts`` (N x m) and ``preacts`` (N x P) are per-neuron posterior
    means, ``outputs`` (P x m) the mean training output and ``codes`` one
    code per neuron.  Atoms, modes and weights are per-code averages and
    fractions; ``t = (Y - f) / T`` from the target equation.  Returns the
    init dict together with the distinct nonempty codes in a fixed order.
    """
    if T <= 0:
        raise ValueError("sample-based initialization needs T > 0")
    codes = [str(c) for c in codes]
    distinct = sorted({c for c in codes if "1" in c})
    if not distinct:
        raise ValueError("no nonempty codes among the samples")
    idx = [[i for i, c in enumerate(codes) if c == u] for u in distinct]
    w = np.array([len(i) for i in idx], dtype=float)
    init = {"t": (d.Y - np.asarray(outputs)) / T,
            "atoms": np.array([np.asarray(readouts)[i].mean(axis=0) for i in idx]),
            "z": np.array([np.asarray(preacts)[i].mean(axis=0) for i in idx]),
            "weights": w / w.sum()}
    return init, distinct


# --- derived quantities -----------------------------------------------------------

def _branch_phi_stats(sol: SigmoidalSolution, g: int):
    """Per-input (log-partition, <phi>, Var[phi]) for branch g."""
    b = sol.branches[g]
    h = sol.t @ b.a
    if sol.mode == "delta":
        f = phi(b.z)
        return h * f - b.z ** 2 / (2 * sol.sigma1_2), f, np.zeros_like(f)
    stats = TiltedStats(hermite_rule(sol.order), sol.sigma1_2)
    return stats(h)


def branch_energy(sol: SigmoidalSolution, d: Optional[Dataset] = None) -> list:
    """Single-neuron energy E(a_g|t) of every branch.

    Quadrature mode uses ``a.a/2 - sum_mu log<exp(h_mu phi)>/P`` (K0 = I);
    point-mass mode uses ``a.a/2 + E(z_g|a_g,t)/P``.
    """
    d = d or sol.dataset
    out = []
    for g, b in enumerate(sol.branches):
        if sol.mode == "delta" and not _is_identity(d):
            Kp = _pinv_cached(d)
            Ez = 0.5 * b.z @ Kp @ b.z / sol.sigma1_2 - (sol.t @ b.a) @ phi(b.z)
            out.append(float(0.5 * b.a @ b.a + Ez / d.P))
        else:
            logZ, _, _ = _branch_phi_stats(sol, g)
            out.append(float(0.5 * b.a @ b.a - logZ.sum() / d.P))
    return out


_PINV_CACHE: dict = {}


def _pinv_cached(d: Dataset, rank_tol: float = 1e-10) -> np.ndarray:
    from .numerics import pseudo_inverse
    key = (d.digest(), rank_tol)
    if key not in _PINV_CACHE:
        if len(_PINV_CACHE) > 8:
            _PINV_CACHE.clear()
        _PINV_CACHE[key] = pseudo_inverse(d.input_kernel().K0, rank_tol)
    return _PINV_CACHE[key]


def _is_identity(d: Dataset) -> bool:
    if d.N0 < d.P:
        return False
    return bool(np.abs(d.input_kernel().K0 - np.eye(d.P)).max() < 1e-8)


def energy_t(sol: SigmoidalSolution) -> float:
    """Order-parameter energy E(t), per training input, for ranking solutions.

    -T tr(t^T t)/2 + tr(t^T Y) + logsumexp_g(-P E(a_g|t)), all divided by P.
    """
    d = sol.dataset
    E = np.asarray(sol.energies)
    return float((-0.5 * sol.T * np.sum(sol.t ** 2) + np.sum(sol.t * d.Y)) / d.P
                 - logsumexp(-d.P * E) / d.P)


def saddle_residuals(sol: SigmoidalSolution, rank_tol: float = 1e-10) -> dict:
    """Norms of every residual family over the full P x m system."""
    d = sol.dataset
    P = d.P
    out = {"readout": 0.0, "target": 0.0}
    fitted = np.zeros_like(d.Y)
    for g, b in enumerate(sol.branches):
        _, f, _ = _branch_phi_stats(sol, g)
        out["readout"] += float(np.sum((b.a - sol.t.T @ f / P) ** 2))
        fitted += b.weight * np.outer(f, b.a)
    out["readout"] = np.sqrt(out["readout"])
    out["target"] = float(np.linalg.norm(d.Y - fitted - sol.T * sol.t))
    if sol.weight_mode == "boltzmann":
        logw = np.log(np.maximum(sol.weights, 1e-300))
        E = np.asarray(sol.energies)
        out["weights"] = float(np.linalg.norm((logw - logw[0]) + P * (E - E[0])))
    if sol.mode == "delta":
        K0 = d.input_kernel().K0
        V, lam = range_basis(K0, rank_tol)
        mode = 0.0
        for b in sol.branches:
            rhs = sol.sigma1_2 * dphi(b.z) * (sol.t @ b.a)
            # K0^+ z - sigma1^2 phi'(z) t a, projected on the range of K0
            mode += float(np.sum((V.T @ b.z / lam - V.T @ rhs) ** 2))
        out["mode"] = float(np.sqrt(mode))
    return out


def finite_P_correction(sol: SigmoidalSolution, P: Optional[int] = None) -> list:
    """Per-branch covariance ``E''(a_g)^{-1} / P`` of the readout atoms.

    ``E''(a) = I - t^T Cov[phi(z)]_{z|a} t / P``; a branch whose ``E''`` is
    not positive definite is unstable and gets ``None``.
    """
    d = sol.dataset
    P = d.P if P is None else P
    out = []
    for g in range(len(sol.branches)):
        _, _, var = _branch_phi_stats(sol, g)
        Epp = np.eye(d.m) - (sol.t.T * var) @ sol.t / d.P
        w = np.linalg.eigvalsh(symmetrize(Epp))
        if w.min() <= 0:
            logger.warning("branch %d has non positive-definite curvature", g)
            out.append(None)
            continue
        out.append(symmetrize(np.linalg.inv(Epp)) / P)
    return out


def mixture_density(sol: SigmoidalSolution, component: int, grid: np.ndarray,
                    P: Optional[int] = None) -> np.ndarray:
    """Marginal density of readout component ``component`` as a Gaussian mixture."""
    covs = finite_P_correction(sol, P)
    out = np.zeros_like(np.asarray(grid, dtype=float))
    for b, cov in zip(sol.branches, covs):
        s2 = cov[component, component] if cov is not None else 1e-12
        out += b.weight * np.exp(-(grid - b.a[component]) ** 2 / (2 * s2)) / np.sqrt(2 * np.pi * s2)
    return out


def _test_statistics(sol: SigmoidalSolution, X: np.ndarray, rank_tol: float = 1e-10):
    """Coefficients w = K0^+ k0(x) and conditional variances for columns of X."""
    d = sol.dataset
    ker = d.input_kernel()
    Kp = _pinv_cached(d, rank_tol)
    k0 = ker.k0(X)
    W = Kp @ k0
    cond = np.maximum(ker.kappa0(X) - np.sum(k0 * W, axis=0), 0.0)
    return W, cond


def _branch_test_means(sol: SigmoidalSolution, X: np.ndarray, second: bool = False):
    """<phi(z(x))> (or <phi(z(x))^2>) per branch and test column; shape (n, P*)."""
    W, cond = _test_statistics(sol, X)
    s2 = sol.sigma1_2 * cond
    rule = hermite_rule(sol.order)
    n = len(sol.branches)
    out = np.zeros((n, W.shape[1]))
    for g, b in enumerate(sol.branches):
        if sol.mode == "delta":
            mu = W.T @ b.z
            if second:
                out[g] = [_gauss_phi2(mi, vi, rule) for mi, vi in zip(mu, s2)]
            else:
                out[g] = gauss_mean_erf(mu, s2)
            continue
        # quadrature mode: the dominant coefficient is integrated over its tilted
        # law, the remaining inputs contribute a moment-matched Gaussian
        stats = TiltedStats(rule, sol.sigma1_2)
        h = sol.t @ b.a
        mz, vz = stats.z_moments(h)
        p_nodes, _ = stats.probs(h)
        for j in range(W.shape[1]):
            w = W[:, j]
            k = int(np.argmax(np.abs(w)))
            m_rest = w @ mz - w[k] * mz[k]
            v_rest = (w ** 2) @ vz - w[k] ** 2 * vz[k] + s2[j]
            u = w[k] * stats.z + m_rest
            if second:
                vals = np.array([_gauss_phi2(ui, v_rest, rule) for ui in u])
            else:
                vals = gauss_mean_erf(u, v_rest)
            out[g, j] = p_nodes[k] @ vals
    return out


def _gauss_phi2(mu: float, var: float, rule) -> float:
    if var <= 0:
        return float(phi(mu) ** 2)
    z = mu + np.sqrt(2 * var) * rule.nodes
    return float(rule.weights @ phi(z) ** 2 / np.sqrt(np.pi))


def predictor(sol: SigmoidalSolution, X: np.ndarray) -> np.ndarray:
    """Mean predictor on test columns; shape (P*, m)."""
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    M = _branch_test_means(sol, X)
    return M.T @ (sol.atoms * sol.weights[:, None])


def kernels(sol: SigmoidalSolution, X_eval: Optional[np.ndarray] = None) -> np.ndarray:
    """Posterior-averaged last-layer kernel.

    Without ``X_eval`` the training kernel ``sum_g P_g <phi phi^T>_{z|a_g}``
    is returned.  Otherwise distinct inputs are decoupled given the training
    preactivations, so off-diagonal entries are products of per-input means.
    """
    d = sol.dataset
    if X_eval is None:
        K = np.zeros((d.P, d.P))
        for g, b in enumerate(sol.branches):
            _, f, var = _branch_phi_stats(sol, g)
            K += b.weight * (np.outer(f, f) + np.diag(var))
        return symmetrize(K)
    X_eval = np.asarray(X_eval, dtype=float)
    M = _branch_test_means(sol, X_eval)
    M2 = _branch_test_means(sol, X_eval, second=True)
    w = sol.weights
    K = (M.T * w) @ M
    np.fill_diagonal(K, w @ M2)
    return symmetrize(K)


@dataclass
class HypothesisResult:
    codes: tuple
    solution: SigmoidalSolution
    min_weight: float = 0.0

    @property
    def accepted(self) -> bool:
        """Converged, every branch realizes its code with weight >= ``min_weight``,
        and every branch curvature is positive definite."""
        s = self.solution
        return (s.converged and s.codes_match and bool(np.all(s.weights >= self.min_weight))
                and all(c is not None for c in finite_P_correction(s)))


_RESTARTS = ((0.0, 0), (0.2, 1), (0.5, 2))


def scan_hypotheses(d: Dataset, hypotheses, solver=None, min_weight: Optional[float] = None,
                    restarts=_RESTARTS, **kwargs) -> list:
    """Solve every code hypothesis; accepted results first, each group sorted by E(t).

    Each hypothesis is retried from perturbed initial points (``restarts``
    holds ``(init_noise, init_seed)`` pairs) until one is accepted.  A branch
    counts as present when its weight is at least ``min_weight`` (default
    ``1/P``, one neuron at N = P).
    """
    solver = solver or (solve_orthogonal if _is_identity(d) else solve_general)
    min_weight = 1.0 / d.P if min_weight is None else min_weight
    out = []
    for codes in hypotheses:
        codes = tuple(parse_codes(codes))
        best = None
        for noise, seed in restarts:
            try:
                sol = solver(d, codes, init_noise=noise, init_seed=seed, **kwargs)
            except (np.linalg.LinAlgError, FloatingPointError) as exc:
                logger.info("hypothesis %s failed: %s", [str(c) for c in codes], exc)
                continue
            hr = HypothesisResult(codes, sol, min_weight)
            if best is None or hr.accepted or sol.residual < best.solution.residual:
                best = hr
            if hr.accepted:
                break
        if best is not None:
            out.append(best)
    out.sort(key=lambda h: (not h.accepted, h.solution.energy_t))
    return out


def symmetric_hypotheses(m: int, swap: Sequence[int]) -> list:
    """Code sets invariant under exchanging the two classes in ``swap``."""
    perm = list(range(m))
    perm[swap[0]], perm[swap[1]] = swap[1], swap[0]
    orbits = []
    seen = set()
    for c in enumerate_codes(m):
        if c in seen:
            continue
        orb = sorted({c, c.permuted(perm)})
        seen.update(orb)
        orbits.append(orb)
    out = []
    for k in range(1, len(orbits) + 1):
        for combo in itertools.combinations(orbits, k):
            out.append(tuple(c for orb in combo for c in orb))
    return out
