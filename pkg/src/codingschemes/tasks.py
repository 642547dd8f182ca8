"""Classification tasks: the orthogonal toy task and real-data ingestion."""
from __future__ import annotations

import csv
import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


class ValidationError(ValueError):
    pass


class UnsupportedConfiguration(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CountError(ValueError):
    pass


class DegenerateInputError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"input {index} is all zero after mean subtraction")
        self.index = index


def one_hot(labels: np.ndarray, m: int, y_plus: float, y_minus: float) -> np.ndarray:
    Y = np.full((len(labels), m), float(y_minus))
    Y[np.arange(len(labels)), labels] = float(y_plus)
    return Y


@dataclass(frozen=True)
class Dataset:
    """Inputs ``X`` (N0 x P), targets ``Y`` (P x m) and integer labels."""

    X: np.ndarray
    Y: np.ndarray
    labels: np.ndarray
    y_plus: float
    y_minus: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for a in (self.X, self.Y, self.labels):
            a.setflags(write=False)

    @property
    def N0(self) -> int:
        return self.X.shape[0]

    @property
    def P(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    @property
    def class_fractions(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.m) / self.P

    def input_kernel(self) -> "InputKernel":
        return InputKernel(self.X)

    def with_targets(self, y_plus: float, y_minus: float) -> "Dataset":
        return replace(self, Y=one_hot(self.labels, self.m, y_plus, y_minus),
                       y_plus=float(y_plus), y_minus=float(y_minus))

    def digest(self) -> str:
        """Content hash over inputs, targets and labels."""
        h = hashlib.sha256()
        for a in (self.X, self.Y, self.labels.astype(np.int64)):
            h.update(np.ascontiguousarray(a).tobytes())
            h.update(str(a.shape).encode())
        return h.hexdigest()


class InputKernel:
    """K0 = X^T X / N0 with its test-input counterparts."""

    def __init__(self, X: np.ndarray):
        self.X = np.asarray(X, dtype=float)
        self.N0 = self.X.shape[0]
        K0 = self.X.T @ self.X / self.N0
        self.K0 = 0.5 * (K0 + K0.T)

    def k0(self, x: np.ndarray) -> np.ndarray:
        """Train-test overlaps, shape (P,) for a vector or (P, P*) for columns."""
        return self.X.T @ np.asarray(x, dtype=float) / self.N0

    def kappa0(self, x1: np.ndarray, x2: Optional[np.ndarray] = None):
        x1 = np.asarray(x1, dtype=float)
        x2 = x1 if x2 is None else np.asarray(x2, dtype=float)
        if x1.ndim == 1:
            return float(x1 @ x2) / self.N0
        return np.sum(x1 * x2, axis=0) / self.N0


def largest_remainder_counts(P: int, ratios: Sequence[float]) -> np.ndarray:
    exact = np.asarray(ratios, dtype=float) * P
    counts = np.floor(exact).astype(int)
    short = P - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _check_ratios(ratios) -> np.ndarray:
    r = np.asarray(ratios, dtype=float)
    if r.ndim != 1 or r.size == 0 or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-12:
        raise ValidationError(f"ratios {list(ratios)} do not form a probability vector")
    return r


def make_toy_task(P: int, N0: int, m: int, ratios: Sequence[float],
                  assignment: str = "fixed-ratio", y_plus: float = 1.0,
                  y_minus: float = 0.0, seed: int = 0) -> Dataset:
    """Mutually orthogonal inputs with random class labels.

    Inputs are a random orthonormal P-frame in R^N0 scaled by sqrt(N0), so
    that K0 is exactly the identity.
    """
    r = _check_ratios(ratios)
    if len(r) != m:
        raise ValidationError(f"expected {m} ratios, got {len(r)}")
    if N0 < P:
        raise UnsupportedConfiguration(f"orthogonal inputs need N0 >= P (N0={N0}, P={P})")
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((N0, P)))
    Q = Q * np.sign(np.diag(R))
    X = np.sqrt(N0) * Q
    if assignment == "fixed-ratio":
        labels = np.repeat(np.arange(m), largest_remainder_counts(P, r))
        labels = rng.permutation(labels)
    elif assignment == "iid":
        labels = rng.choice(m, size=P, p=r)
    else:
        raise ValidationError(f"unknown assignment {assignment!r}")
    return Dataset(X=X, Y=one_hot(labels, m, y_plus, y_minus), labels=labels,
                   y_plus=float(y_plus), y_minus=float(y_minus),
                   meta={"kind": "toy", "seed": seed, "ratios": list(map(float, r))})


# --- file formats -----------------------------------------------------------

def _open_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path: str) -> np.ndarray:
    """Parse an IDX file (unsigned-byte payload, big-endian header)."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise ParseError("file too short for IDX magic", len(raw))
    zero, dtype_code, ndim = raw[0:2], raw[2], raw[3]
    if zero != b"\x00\x00" or dtype_code != 0x08:
        raise ParseError(f"bad IDX magic 0x{raw[:4].hex()}", 0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ParseError("truncated IDX header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_end])
    size = int(np.prod(dims)) if dims else 0
    if len(raw) < header_end + size:
        raise ParseError(f"IDX payload truncated, expected {size} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header_end).reshape(dims)


def write_idx(path: str, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(">" + "I" * array.ndim, *array.shape)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def _labels_path_for(images_path: str) -> str:
    for a, b in (("images-idx3", "labels-idx1"), ("images.idx3", "labels.idx1"), ("images", "labels")):
        if a in os.path.basename(images_path):
            return os.path.join(os.path.dirname(images_path),
                                os.path.basename(images_path).replace(a, b))
    raise ValidationError(f"cannot infer labels file for {images_path}")


def read_csv_table(path: str):
    """Rows of ``label,pix0,...,pixK``; returns (inputs as rows, labels)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "label":
            raise ParseError("CSV header must start with 'label'", 0)
        width = len(header) - 1
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise ParseError(f"line {lineno}: expected {width + 1} fields, got {len(row)}",
                                 _line_offset(path, lineno))
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}", _line_offset(path, lineno)) from None
    return np.asarray(rows, dtype=float).reshape(-1, width), np.asarray(labels, dtype=int)


def _line_offset(path: str, lineno: int) -> int:
    with open(path, "rb") as fh:
        off = 0
        for i, line in enumerate(fh, start=1):
            if i == lineno:
                return off
            off += len(line)
    return off


def load_dataset(path: str, format: str, classes: Sequence[int], P: int,
                 y_plus: float = 1.0, y_minus: float = 0.0,
                 labels_path: Optional[str] = None) -> Dataset:
    """First ``P`` inputs in file order whose label lies in ``classes``.

    Labels are remapped to ``0..m-1`` in ascending order of the original
    class index.  Inputs are returned raw; see :func:`preprocess`.
    """
    if format == "idx":
        images = read_idx(path)
        labels_all = read_idx(labels_path or _labels_path_for(path)).astype(int)
        if images.shape[0] != labels_all.shape[0]:
            raise ParseError("image and label counts differ", 4)
        rows = images.reshape(images.shape[0], -1).astype(float)
    elif format == "csv":
        rows, labels_all = read_csv_table(path)
    else:
        raise ValidationError(f"unknown format {format!r}")
    classes = sorted(set(int(c) for c in classes))
    mask = np.isin(labels_all, classes)
    idx = np.flatnonzero(mask)
    if idx.size < P:
        raise CountError(f"requested {P} inputs from classes {classes}, file has {idx.size}")
    idx = idx[:P]
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[c] for c in labels_all[idx]], dtype=int)
    X = rows[idx].T.copy()
    return Dataset(X=X, Y=one_hot(labels, len(classes), y_plus, y_minus), labels=labels,
                   y_plus=float(y_plus), y_minus=float(y_minus),
                   meta={"kind": "file", "path": os.path.abspath(path), "classes": classes})


def to_grayscale(images: np.ndarray) -> np.ndarray:
    """Luminance of RGB images with the channel on the last axis."""
    return np.asarray(images, dtype=float) @ np.array([0.299, 0.587, 0.114])


def preprocess(d: Dataset, norm_target: Optional[float] = None) -> Dataset:
    """Remove each input's mean and rescale it to squared norm ``norm_target``.

    ``norm_target`` defaults to N0.
    """
    target = float(d.N0 if norm_target is None else norm_target)
    X = d.X - d.X.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(X, axis=0)
    bad = np.flatnonzero(norms <= 1e-12 * max(1.0, float(np.abs(d.X).max(initial=0.0))))
    if bad.size:
        raise DegenerateInputError(int(bad[0]))
    X = X * (np.sqrt(target) / norms)
    return replace(d, X=X, meta={**d.meta, "norm_target": target})


def random_project(d: Dataset, target_dim: int, seed: int = 0,
                   norm_target: Optional[float] = None) -> Dataset:
    """Project inputs with a seeded orthonormal-row matrix, then renormalize.

    Only the norms are reset after projection: the per-input coordinate mean
    is not rotation invariant, so re-centring would change K0 even for a
    square (isometric) projection.
    """
    if target_dim > d.N0 or target_dim < 1:
        raise ValueError(f"target_dim {target_dim} must lie in [1, N0={d.N0}]")
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((d.N0, target_dim)))
    Q = Q * np.sign(np.diag(R))
    X = Q.T @ d.X
    norms = np.linalg.norm(X, axis=0)
    bad = np.flatnonzero(norms <= 1e-12 * max(1.0, float(np.abs(d.X).max(initial=0.0))))
    if bad.size:
        raise DegenerateInputError(int(bad[0]))
    target = float(target_dim if norm_target is None else norm_target)
    X = X * (np.sqrt(target) / norms)
    return replace(d, X=X, meta={**d.meta, "projection_seed": seed, "norm_target": target})


# --- persistence --------------------------------------------------------------

def save_dataset(d: Dataset, path: str) -> None:
    """Single ``.npz`` container with dimensions, labels, reals and metadata."""
    meta = {"N0": d.N0, "P": d.P, "m": d.m, "y_plus": d.y_plus, "y_minus": d.y_minus,
            "meta": d.meta, "digest": d.digest()}
    with open(path, "wb") as fh:
        np.savez(fh, X=d.X, Y=d.Y, labels=d.labels.astype(np.int64),
                 header=np.array(json.dumps(meta)))


def load_saved_dataset(path: str) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["header"]))
        d = Dataset(X=z["X"].copy(), Y=z["Y"].copy(), labels=z["labels"].astype(int),
                    y_plus=meta["y_plus"], y_minus=meta["y_minus"], meta=meta.get("meta", {}))
    if (d.N0, d.P, d.m) != (meta["N0"], meta["P"], meta["m"]):
        raise ParseError("stored dimensions disagree with arrays", 0)
    return d
