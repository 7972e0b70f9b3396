#!/usr/bin/env python3
"""Convert a CSV of MNIST digits (784 pixel columns + label column) into the
four standard IDX files, so `--mnist-dir` can point at a small real subset.

Default source: the 5000-digit sample bundled in the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz). Pass --wheel or --csv explicitly.
"""

import argparse
import csv
import gzip
import io
import pathlib
import struct
import sys
import zipfile

WHEEL_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(args):
    if args.csv:
        opener = gzip.open if args.csv.endswith(".gz") else open
        with opener(args.csv, "rt") as fh:
            return list(csv.reader(fh))
    with zipfile.ZipFile(args.wheel) as zf:
        text = gzip.decompress(zf.read(WHEEL_MEMBER)).decode()
    return list(csv.reader(io.StringIO(text)))


def idx_bytes(magic, dims, payload):
    head = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    return head + bytes(payload)


def write(path, data, compress):
    if compress:
        with gzip.open(str(path) + ".gz", "wb") as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--wheel", help="path to an mlxtend wheel")
    src.add_argument("--csv", help="CSV (optionally .gz) with 784 pixels then the label per row")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--gzip", action="store_true", help="write .gz files")
    args = ap.parse_args()

    rows = [r for r in read_rows(args) if r]
    images, labels = [], []
    for r in rows:
        if len(r) != 785:
            sys.exit(f"expected 785 columns, got {len(r)}")
        px = [int(round(float(v))) for v in r[:784]]
        if any(p < 0 or p > 255 for p in px):
            sys.exit("pixel outside 0..255")
        images.append(px)
        labels.append(int(float(r[784])))

    # the bundled CSV is sorted by class: split per class, then interleave
    by_class = {}
    for img, lab in zip(images, labels):
        by_class.setdefault(lab, []).append(img)
    parts = {"train": [], "t10k": []}
    for lab, imgs in sorted(by_class.items()):
        cut = len(imgs) - int(len(imgs) * args.test_fraction)
        parts["train"].append([(img, lab) for img in imgs[:cut]])
        parts["t10k"].append([(img, lab) for img in imgs[cut:]])
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for prefix, groups in parts.items():
        items = [g[i] for i in range(max(map(len, groups))) for g in groups if i < len(g)]
        pix = [p for img, _ in items for p in img]
        write(out / f"{prefix}-images-idx3-ubyte", idx_bytes(2051, (len(items), 28, 28), pix), args.gzip)
        write(out / f"{prefix}-labels-idx1-ubyte", idx_bytes(2049, (len(items),), [l for _, l in items]), args.gzip)
        counts[prefix] = len(items)
    print(f"wrote {counts['train']} train / {counts['t10k']} test digits to {out}")


if __name__ == "__main__":
    main()
