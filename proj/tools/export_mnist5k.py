#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Write the 5000-image MNIST sample bundled with mlxtend as IDX files.

The CSV (mlxtend/data/data/mnist_5k.csv.gz) holds 784 pixel columns followed by
the label, sorted by class. Each class is split 400/100 into train/test and the
training file is shuffled with a fixed seed so that any tail slice of it is
class balanced. Optional 2x2 mean pooling halves the resolution.
"""

import argparse
import gzip
import struct
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv", help="path to mnist_5k.csv.gz")
    ap.add_argument("--out", default="data", help="output directory")
    ap.add_argument("--prefix", default="mnist5k")
    ap.add_argument("--pool", type=int, default=1, help="mean-pool factor (1 keeps 28x28)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    raw = np.loadtxt(gzip.open(args.csv, "rt"), delimiter=",")
    images = raw[:, :-1].reshape(-1, 28, 28)
    labels = raw[:, -1].astype(np.int64)
    if args.pool > 1:
        p = args.pool
        images = images.reshape(-1, 28 // p, p, 28 // p, p).mean(axis=(2, 4))
    images = np.rint(images).clip(0, 255).astype(np.uint8)

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        idx = rng.permutation(idx)
        cut = len(idx) * 4 // 5
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        write_idx(out / f"{args.prefix}-{split}-images.idx", images[idx], 0x00000803)
        write_idx(out / f"{args.prefix}-{split}-labels.idx", labels[idx], 0x00000801)
        print(f"{split}: {len(idx)} images of {images.shape[1]}x{images.shape[2]}")


if __name__ == "__main__":
    main()
