"""Convert the 5,000-image MNIST sample shipped with mlxtend into IDX files.

Usage: python3 scripts/mnist5k_to_idx.py path/to/mlxtend-*.whl data/mnist-5k

Per class, the first 400 images go to the train split and the last 100 to the
test split; both splits are then shuffled with a fixed seed.
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def write_idx(path, arr, magic):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in arr.shape:
            f.write(struct.pack(">I", d))
        f.write(arr.astype(np.uint8).tobytes())


def main(wheel, out):
    z = zipfile.ZipFile(wheel)
    raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    a = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels, labels = a[:, :-1], a[:, -1]
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[:400])
        test_idx.extend(idx[400:])
    rng = np.random.default_rng(20190101)
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)
    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        write_idx(f"{out}/{prefix}-images-idx3-ubyte.gz", pixels[idx].reshape(-1, 28, 28), 2051)
        write_idx(f"{out}/{prefix}-labels-idx1-ubyte.gz", labels[idx], 2049)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
