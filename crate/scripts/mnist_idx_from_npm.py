#!/usr/bin/env python3
"""Rebuild IDX files from the 10,000 MNIST digits bundled in the `mnist` npm package.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_idx_from_npm.py package/src/digits data/mnist

Pixels are stored there as byte/255 rounded to three decimals, so rounding
back to bytes recovers the original values exactly. The digits are shuffled
with a fixed seed and split 8000 train / 2000 test.
"""
import json
import os
import random
import struct
import sys


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst):
    samples = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            px = bytes(int(round(v * 255)) for v in flat[i * 784:(i + 1) * 784])
            samples.append((px, digit))
    random.Random(0).shuffle(samples)
    os.makedirs(dst, exist_ok=True)
    splits = {"train": samples[:8000], "t10k": samples[8000:10000]}
    for name, rows in splits.items():
        write_idx(os.path.join(dst, f"{name}-images-idx3-ubyte"), 0x803,
                  [len(rows), 28, 28], b"".join(p for p, _ in rows))
        write_idx(os.path.join(dst, f"{name}-labels-idx1-ubyte"), 0x801,
                  [len(rows)], bytes(l for _, l in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
