#!/usr/bin/env python3
"""Regenerate the bundled datasets under data/.

MNIST subset: the 5,000-image MNIST sample shipped with mlxtend
(mlxtend/data/data/mnist_5k.csv.gz, 500 images per digit). Split per digit
into 200 train / 100 test images and written as standard IDX files.

Image Segmentation: the UCI table shipped with river
(river/datasets/segment.csv.zip, 2,310 rows). River drops the
region-pixel-count attribute, which is the constant 9 in the UCI release;
it is restored so the table has the original 19 attributes.

Usage: prepare_data.py MLXTEND_WHEEL RIVER_SDIST
"""
import gzip
import io
import random
import struct
import sys
import tarfile
import zipfile
from pathlib import Path

OUT = Path(__file__).resolve().parent


def write_idx(images, labels, stem):
    with open(OUT / "mnist" / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(OUT / "mnist" / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def mnist(wheel):
    z = zipfile.ZipFile(wheel)
    rows = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode().splitlines()
    by_label = {}
    for row in rows:
        vals = row.split(",")
        by_label.setdefault(int(vals[-1]), []).append([int(float(v)) for v in vals[:-1]])
    rng = random.Random(20240501)
    train, test = [], []
    for label in sorted(by_label):
        imgs = by_label[label]
        rng.shuffle(imgs)
        train += [(img, label) for img in imgs[:200]]
        test += [(img, label) for img in imgs[200:300]]
    rng.shuffle(train)
    rng.shuffle(test)
    (OUT / "mnist").mkdir(exist_ok=True)
    write_idx([i for i, _ in train], [l for _, l in train], "train")
    write_idx([i for i, _ in test], [l for _, l in test], "t10k")


def segmentation(sdist):
    with tarfile.open(sdist) as tar:
        member = next(m for m in tar.getmembers() if m.name.endswith("datasets/segment.csv.zip"))
        blob = tar.extractfile(member).read()
    z = zipfile.ZipFile(io.BytesIO(blob))
    lines = z.read(z.namelist()[0]).decode().splitlines()
    out = []
    for i, line in enumerate(lines):
        cols = line.split(",")
        cols.insert(2, "region-pixel-count" if i == 0 else "9")
        out.append(",".join(cols))
    (OUT / "segment.csv").write_text("\n".join(out) + "\n")


if __name__ == "__main__":
    mnist(sys.argv[1])
    segmentation(sys.argv[2])
