#!/usr/bin/env python3
"""Write a small MNIST subset as IDX files under data/.

The mlxtend wheel ships 5000 MNIST digits (500 per class) as a gzipped CSV
with 784 pixel columns followed by the label.  The wheel is fetched with
``pip download`` (so any configured package mirror is used), the rows are
shuffled with a fixed seed, and the first ``--train`` rows become the
training split, the rest the test split.
"""
import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from codingschemes.tasks import write_idx  # noqa: E402

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_rows(wheel=None) -> np.ndarray:
    with tempfile.TemporaryDirectory() as tmp:
        if wheel is None:
            subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps",
                            "--only-binary", ":all:", "-d", tmp, "-q"], check=True)
            wheel = next(Path(tmp).glob("mlxtend-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            raw = gzip.decompress(zf.read(MEMBER))
    return np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(ROOT / "data"))
    ap.add_argument("--train", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--wheel", default=None, help="use a local mlxtend wheel")
    args = ap.parse_args(argv)

    rows = fetch_rows(args.wheel)
    if rows.shape[1] != 785:
        raise SystemExit(f"unexpected CSV width {rows.shape[1]}")
    rows = rows[np.random.default_rng(args.seed).permutation(len(rows))]
    images = rows[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = rows[:, 784].astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": slice(0, args.train), "test": slice(args.train, None)}
    for name, sl in splits.items():
        write_idx(str(out / f"mnist-{name}-images-idx3-ubyte.gz"), images[sl])
        write_idx(str(out / f"mnist-{name}-labels-idx1-ubyte.gz"), labels[sl])
        print(f"{name}: {len(labels[sl])} digits, class counts {np.bincount(labels[sl], minlength=10)}")


if __name__ == "__main__":
    main()
