#!/usr/bin/env python3
"""Write the 5,000-digit MNIST sample bundled with mlxtend as IDX files.

The sample holds 500 training-split digits per class. The first 400 of each
class become the train split, the remaining 100 the test split. Both splits are
shuffled with a fixed seed so that files are not sorted by class.

    python3 tools/make_mnist_subset.py --csv path/to/mnist_5k.csv.gz --out data/mnist-5k
"""
import argparse
import gzip
import pathlib
import random
import struct


def locate_csv():
    try:
        import mlxtend.data.mnist as m
    except ImportError:
        raise SystemExit("mlxtend not installed; pass --csv explicitly")
    return pathlib.Path(m.DATA_PATH)


def write_idx(out_dir, prefix, rows):
    n = len(rows)
    with open(out_dir / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))
    with open(out_dir / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(label for _, label in rows))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--csv", type=pathlib.Path)
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/mnist-5k"))
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    path = args.csv or locate_csv()
    by_class = {}
    with gzip.open(path, "rt") as f:
        for line in f:
            vals = [int(float(v)) for v in line.strip().split(",")]
            by_class.setdefault(vals[-1], []).append((vals[:-1], vals[-1]))

    train, test = [], []
    for label in sorted(by_class):
        rows = by_class[label]
        cut = len(rows) - args.test_per_class
        train.extend(rows[:cut])
        test.extend(rows[cut:])
    rng = random.Random(args.seed)
    rng.shuffle(train)
    rng.shuffle(test)

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out, "train", train)
    write_idx(args.out, "t10k", test)
    print(f"wrote {len(train)} train / {len(test)} test digits to {args.out}")


if __name__ == "__main__":
    main()
