"""Build the MNIST desk subset used by the tests from the 5k sample bundled with mlxtend.

Usage: python3 tools/make_mnist_fixture.py <mlxtend wheel> <out dir>

The bundled CSV holds 500 images per digit (784 pixel columns, label last).
We take 200 per class for training and 50 per class for testing, shuffle both
with a fixed seed, and write gzipped IDX files.
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from dmcr2.data import dumps_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TRAIN_PER_CLASS = 200
TEST_PER_CLASS = 50
SEED = 20240601


def main(wheel, out):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)
    rng = np.random.default_rng(SEED)
    train, test = [], []
    for k in range(10):
        idx = rng.permutation(np.flatnonzero(labels == k))
        train.append(idx[:TRAIN_PER_CLASS])
        test.append(idx[TRAIN_PER_CLASS : TRAIN_PER_CLASS + TEST_PER_CLASS])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", np.concatenate(train)), ("t10k", np.concatenate(test))):
        idx = rng.permutation(idx)
        imgs = images[idx].reshape(-1, 28, 28)
        # mtime=0 keeps the archives byte-identical across rebuilds
        (out / f"{name}-images-idx3-ubyte.gz").write_bytes(gzip.compress(dumps_idx(imgs), mtime=0))
        (out / f"{name}-labels-idx1-ubyte.gz").write_bytes(gzip.compress(dumps_idx(labels[idx]), mtime=0))


if __name__ == "__main__":
    main(*sys.argv[1:3])
