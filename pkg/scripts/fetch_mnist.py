#!/usr/bin/env python3
"""Download the four MNIST IDX files into data/mnist (gzip-compressed).

The files come from the ``mnist-data`` package on the npm registry, which
ships the original uncompressed IDX files.  Use ``--url`` to point at a
mirror or a local copy of the tarball.
"""
import argparse
import gzip
import hashlib
import io
import tarfile
import urllib.request
from pathlib import Path

URL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"
NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
SIZES = {"train-images-idx3-ubyte": 47040016, "train-labels-idx1-ubyte": 60008,
         "t10k-images-idx3-ubyte": 7840016, "t10k-labels-idx1-ubyte": 10008}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--url", default=URL, help="tarball URL or local path")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if all((out / f"{n}.gz").exists() for n in NAMES):
        print(f"{out}: already present")
        return
    src = Path(args.url)
    blob = src.read_bytes() if src.exists() else urllib.request.urlopen(args.url).read()
    print(f"tarball sha256 {hashlib.sha256(blob).hexdigest()}")
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for name in NAMES:
            raw = tar.extractfile(f"package/data/{name}").read()
            if len(raw) != SIZES[name]:
                raise SystemExit(f"{name}: expected {SIZES[name]} bytes, got {len(raw)}")
            with gzip.open(out / f"{name}.gz", "wb") as f:
                f.write(raw)
            print(f"wrote {out / name}.gz")


if __name__ == "__main__":
    main()
