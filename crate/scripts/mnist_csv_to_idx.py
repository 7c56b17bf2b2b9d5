#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Convert the 5000-image MNIST CSV bundled with mlxtend into IDX files.

Usage: mnist_csv_to_idx.py <mlxtend wheel or mnist_5k.csv.gz> <output dir>

Each CSV row is `pixel_0,...,pixel_783,label` with pixels in 0..255.
"""

import gzip
import struct
import sys
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(source: Path) -> list[list[int]]:
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as z:
            raw = z.read(MEMBER)
    else:
        raw = source.read_bytes()
    text = gzip.decompress(raw).decode()
    return [[int(float(v)) for v in line.split(",")] for line in text.splitlines() if line]


def main() -> None:
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    rows = read_rows(Path(sys.argv[1]))
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    labels = bytes(r[-1] for r in rows)
    pixels = bytes(v for r in rows for v in r[:-1])
    assert all(len(r) == 785 for r in rows) and max(labels) <= 9
    (out / "mnist-5k-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, len(rows), 28, 28) + pixels)
    (out / "mnist-5k-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, len(rows)) + labels)
    print(f"wrote {len(rows)} images to {out}")


if __name__ == "__main__":
    main()
