"""Coding-scheme extraction, empirical kernels and theory/sampler comparison."""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from .gp_baseline import ErrorDecomposition
from .sigmoidal_theory import CodePattern

logger = logging.getLogger(__name__)

# scheme boundaries; the source gives qualitative definitions only
SPARSE_FRACTION = 0.05
SPARSE_CODE_MAX = 0.02
REDUNDANT_CODE_MIN = 0.05
REDUNDANT_FRACTION = 0.5
DIP_ALPHA = 0.01


@dataclass
class CodeAssignment:
    codes: list
    class_means: np.ndarray  # N x m
    threshold: float
    reference: float  # global max class mean

    @property
    def N(self) -> int:
        return len(self.codes)

    def histogram(self) -> dict:
        return dict(Counter(str(c) for c in self.codes))


@dataclass
class SchemeSummary:
    histogram: dict
    coding_fraction: float
    label: str
    participation_ratio: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"histogram": self.histogram, "coding_fraction": self.coding_fraction,
                "label": self.label, "participation_ratio": self.participation_ratio,
                "diagnostics": self.diagnostics}


def class_means(acts: np.ndarray, labels: np.ndarray, m: Optional[int] = None) -> np.ndarray:
    """Per-neuron mean activation on each class; N x m (NaN for empty classes)."""
    acts = np.asarray(acts, dtype=float)
    labels = np.asarray(labels)
    m = int(labels.max()) + 1 if m is None else m
    out = np.full((acts.shape[0], m), np.nan)
    for r in range(m):
        sel = labels == r
        if np.any(sel):
            out[:, r] = acts[:, sel].mean(axis=1)
    return out


def extract_codes(acts: np.ndarray, labels, threshold: float = 0.5,
                  m: Optional[int] = None) -> CodeAssignment:
    """Threshold class-mean postactivations relative to their global maximum."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    cm = class_means(acts, labels, m)
    ref = float(np.nanmax(cm)) if cm.size else 0.0
    if ref > 0:
        bits = np.nan_to_num(cm, nan=-np.inf) >= threshold * ref
    else:
        bits = np.zeros(cm.shape, dtype=bool)
    codes = [CodePattern(tuple(int(b) for b in row)) for row in bits]
    return CodeAssignment(codes=codes, class_means=cm, threshold=threshold, reference=ref)


# --- Hartigan's dip ----------------------------------------------------------------

def dip_statistic(x) -> float:
    """Hartigan's dip: sup distance of the ECDF to the nearest unimodal CDF.

    Iterates the greatest-convex-minorant / least-concave-majorant
    construction on the sorted sample; the minimum value is ``1/(2n)``.
    """
    x = np.sort(np.asarray(x, dtype=float).ravel())
    n = x.size
    if n < 4 or x[0] == x[-1]:
        return 0.5 / max(n, 1)
    # hull pointers for the minorant (mn) and majorant (mj)
    mn = np.zeros(n, dtype=int)
    for j in range(1, n):
        mn[j] = j - 1
        while True:
            a = mn[j]
            b = mn[a]
            if a == 0 or (x[j] - x[a]) * (a - b) < (x[a] - x[b]) * (j - a):
                break
            mn[j] = b
    mj = np.full(n, n - 1, dtype=int)
    for k in range(n - 2, -1, -1):
        mj[k] = k + 1
        while True:
            a = mj[k]
            b = mj[a]
            if a == n - 1 or (x[k] - x[a]) * (a - b) < (x[a] - x[b]) * (k - a):
                break
            mj[k] = b
    low, high = 0, n - 1
    dip = 1.0
    gcm = np.zeros(n + 1, dtype=int)
    lcm = np.zeros(n + 1, dtype=int)
    while True:
        gcm[0] = high
        i = 0
        while gcm[i] > low:
            gcm[i + 1] = mn[gcm[i]]
            i += 1
        l_gcm = ig = i
        ix = ig - 1
        lcm[0] = low
        i = 0
        while lcm[i] < high:
            lcm[i + 1] = mj[lcm[i]]
            i += 1
        l_lcm = ih = i
        iv = 1
        d = 1.0
        if l_gcm != 1 or l_lcm != 1:
            d = 0.0
            while True:
                gx = gcm[ix]
                lv = lcm[iv]
                if gx > lv:
                    gl = gcm[ix + 1]
                    dx = (lv - gl + 1) - (x[lv] - x[gl]) * (gx - gl) / (x[gx] - x[gl])
                    iv += 1
                    if dx >= d:
                        d, ig, ih = dx, ix + 1, iv - 1
                else:
                    ll = lcm[iv - 1]
                    dx = (x[gx] - x[ll]) * (lv - ll) / (x[lv] - x[ll]) - (gx - ll - 1)
                    ix -= 1
                    if dx >= d:
                        d, ig, ih = dx, ix + 1, iv
                ix = max(ix, 0)
                iv = min(iv, l_lcm)
                if gcm[ix] == lcm[iv]:
                    break
        if d < dip:
            break
        dip_l = 0.0
        for j in range(ig, l_gcm):
            tmax = 1.0
            a, b = gcm[j], gcm[j + 1]
            if a - b > 1 and x[a] != x[b]:
                c = (a - b) / (x[a] - x[b])
                jj = np.arange(b, a + 1)
                tmax = max(tmax, float(np.max((jj - b + 1) - (x[jj] - x[b]) * c)))
            dip_l = max(dip_l, tmax)
        dip_u = 0.0
        for j in range(ih, l_lcm):
            tmax = 1.0
            a, b = lcm[j], lcm[j + 1]
            if b - a > 1 and x[b] != x[a]:
                c = (b - a) / (x[b] - x[a])
                jj = np.arange(a, b + 1)
                tmax = max(tmax, float(np.max((x[jj] - x[a]) * c - (jj - a - 1))))
            dip_u = max(dip_u, tmax)
        dip = max(dip, dip_l, dip_u)
        if low == gcm[ig] and high == lcm[ih]:
            break
        low, high = gcm[ig], lcm[ih]
    return dip / (2 * n)


@lru_cache(maxsize=32)
def _uniform_dips(n: int, reps: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort([dip_statistic(rng.random(n)) for _ in range(reps)])


def dip_test(x, reps: int = 500, seed: int = 0) -> tuple:
    """Dip and its p-value against the uniform null (Monte Carlo, ``reps`` draws)."""
    x = np.asarray(x, dtype=float).ravel()
    x = x[np.isfinite(x)]
    d = dip_statistic(x)
    null = _uniform_dips(x.size, reps, seed)
    p = (np.sum(null >= d) + 1) / (reps + 1)
    return d, float(p)


def participation_ratio(acts: np.ndarray) -> float:
    """(sum_i s_i)^2 / sum_i s_i^2 with s_i the mean squared activation of neuron i."""
    s = np.mean(np.asarray(acts, dtype=float) ** 2, axis=1)
    den = float(np.sum(s * s))
    return float(np.sum(s) ** 2 / den) if den > 0 else 0.0


def classify_scheme(ca: CodeAssignment, acts: Optional[np.ndarray] = None,
                    alpha: float = DIP_ALPHA, seed: int = 0) -> SchemeSummary:
    """Label a code assignment as sparse, redundant or analog.

    Rules are tried in that order: sparse (coding fraction < 5% and every
    code on at most 2% of neurons), redundant (every nonempty code on at
    least 5% of neurons and coding fraction > 50%), analog (no significant
    bimodality of the pooled class means under the dip test).  When none
    applies the label follows the coding fraction and ``rule`` is
    ``"fallback"``.
    """
    N = ca.N
    hist = ca.histogram()
    nonempty = {k: v for k, v in hist.items() if "1" in k}
    n_coding = sum(nonempty.values())
    frac = n_coding / N if N else 0.0
    pooled = ca.class_means[np.isfinite(ca.class_means)]
    dip, p = dip_test(pooled, seed=seed) if pooled.size >= 4 else (0.0, 1.0)
    diag = {"dip": dip, "dip_p": p, "n_coding": n_coding, "threshold": ca.threshold}
    if frac < SPARSE_FRACTION and all(v <= SPARSE_CODE_MAX * N for v in nonempty.values()):
        label, rule = "sparse", "sparse"
    elif nonempty and frac > REDUNDANT_FRACTION and all(
            v >= REDUNDANT_CODE_MIN * N for v in nonempty.values()):
        label, rule = "redundant", "redundant"
    elif p >= alpha:
        label, rule = "analog", "analog"
    else:
        label, rule = ("redundant" if frac >= REDUNDANT_FRACTION else "sparse"), "fallback"
    diag["rule"] = rule
    pr = participation_ratio(acts) if acts is not None else float("nan")
    return SchemeSummary(histogram=hist, coding_fraction=frac, label=label,
                         participation_ratio=pr, diagnostics=diag)


def threshold_sensitivity(acts, labels, thresholds=(0.3, 0.5, 0.7), m=None) -> dict:
    return {str(t): extract_codes(acts, labels, t, m).histogram() for t in thresholds}


# --- kernels and errors ---------------------------------------------------------------

def empirical_kernel(acts) -> np.ndarray:
    """(1/N) Phi^T Phi; a list of activation matrices is averaged."""
    if isinstance(acts, (list, tuple)):
        if not acts:
            raise ValueError("empty chain")
        return sum(empirical_kernel(a) for a in acts) / len(acts)
    acts = np.asarray(acts, dtype=float)
    if not np.all(np.isfinite(acts)):
        raise ValueError("non-finite activations")
    K = acts.T @ acts / acts.shape[0]
    return 0.5 * (K + K.T)


def compare_kernels(K_theory: np.ndarray, K_empirical: np.ndarray) -> float:
    """Relative Frobenius distance |A - B| / |A|."""
    A = np.asarray(K_theory, dtype=float)
    B = np.asarray(K_empirical, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"kernel shapes differ: {A.shape} vs {B.shape}")
    return float(np.linalg.norm(A - B) / np.linalg.norm(A))


def generalization_error(predictions, targets) -> ErrorDecomposition:
    """Per-class bias/variance split over chain samples.

    ``predictions`` has shape (S, P*, m); the variance uses the population
    (ddof=0) estimator so that total = bias + variance exactly.
    """
    F = np.asarray(predictions, dtype=float)
    if F.ndim != 3:
        raise ValueError("predictions must have shape (samples, P*, m)")
    if F.shape[0] < 2:
        raise ValueError("need at least two samples for the variance part")
    Y = np.asarray(targets, dtype=float)
    mean = F.mean(axis=0)
    bias = np.mean((Y - mean) ** 2, axis=0)
    var = np.mean(F.var(axis=0), axis=0)
    return ErrorDecomposition(total=bias + var, bias=bias, variance=var)


@dataclass
class ClusterMatch:
    centers: np.ndarray
    fractions: np.ndarray
    rel_errors: np.ndarray
    labels: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_errors))

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "fractions": self.fractions.tolist(),
                "rel_errors": self.rel_errors.tolist(), "max_rel_error": self.max_rel_error}


def match_clusters(readouts: np.ndarray, atoms: np.ndarray, iters: int = 50) -> ClusterMatch:
    """k-means of readout rows seeded at the theory atoms.

    Cluster ``g`` is matched to atom ``g``; relative errors are
    ``|center - atom| / |atom|``.
    """
    R = np.asarray(readouts, dtype=float)
    atoms = np.asarray(atoms, dtype=float)
    centers, labels = kmeans2(R, atoms.copy(), iter=iters, minit="matrix", missing="warn")
    frac = np.bincount(labels, minlength=len(atoms)) / len(R)
    err = np.linalg.norm(centers - atoms, axis=1) / np.linalg.norm(atoms, axis=1)
    return ClusterMatch(centers=centers, fractions=frac, rel_errors=err, labels=labels)


# --- emitters ---------------------------------------------------------------------------

def write_matrix_csv(path, M: np.ndarray, header: Optional[Sequence[str]] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row in M:
            w.writerow([repr(float(v)) for v in row])


def write_histogram_csv(path, hist: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code", "count"])
        for k in sorted(hist):
            w.writerow([k, hist[k]])


def write_errors_csv(path, errors: dict):
    """``errors`` maps a source name to an ErrorDecomposition."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "class", "total", "bias", "variance"])
        for name, e in errors.items():
            for r in range(len(e.total)):
                w.writerow([name, r, float(e.total[r]), float(e.bias[r]), float(e.variance[r])])


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, default=_default))


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, CodePattern):
        return str(o)
    raise TypeError(type(o))
