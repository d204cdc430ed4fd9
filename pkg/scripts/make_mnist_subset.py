"""Write the bundled 5k-sample MNIST subset as gzipped IDX files.

The subset is the 5,000-image MNIST sample shipped inside the ``mlxtend``
wheel (``mlxtend/data/data/mnist_5k.csv.gz``, 500 images per digit, rows
sorted by label). Pass either the wheel file or rely on an installed
``mlxtend``:

    python scripts/make_mnist_subset.py --wheel mlxtend-0.24.0-py3-none-any.whl
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from stlsnn.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv(wheel):
    if wheel is not None:
        with zipfile.ZipFile(wheel) as z:
            raw = z.read(MEMBER)
    else:
        import mlxtend

        raw = (Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz").read_bytes()
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    return images, labels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel", type=Path, default=None)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data")
    args = ap.parse_args()
    images, labels = read_csv(args.wheel)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "mnist5k-images-idx3-ubyte.gz", images)
    write_idx(args.out / "mnist5k-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} samples to {args.out}")


if __name__ == "__main__":
    main()
