#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into gzipped IDX files.

The package ships 10,000 MNIST digits as per-class JSON files with pixels
normalized to three decimals. Multiplying back by 255 recovers the original
bytes exactly. The digits are shuffled with a fixed seed and split into a
6,000-sample train set and a 4,000-sample test set.

usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def write_idx(prefix, images, labels):
    with gzip.GzipFile(prefix + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(prefix + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            data = json.load(f)["data"]
        assert len(data) % 784 == 0
        pix = np.rint(np.asarray(data, dtype=np.float64) * 255.0).reshape(-1, 784)
        images.append(pix)
        labels.append(np.full(len(pix), digit))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    os.makedirs(dst, exist_ok=True)
    write_idx(os.path.join(dst, "train"), images[:6000], labels[:6000])
    write_idx(os.path.join(dst, "t10k"), images[6000:], labels[6000:])
    print(f"wrote {len(labels)} digits to {dst}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
