"""Write the 5,000-digit MNIST sample bundled with mlxtend as gzipped IDX files.

The sample holds 500 digits per class. The first 400 of each class go to the
train files, the remaining 100 to the t10k files. Usage:

    pip download --no-deps -d /tmp/wheels mlxtend
    python3 scripts/extract_mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist
"""

import gzip
import struct
import sys
import zipfile
from pathlib import Path

TRAIN_PER_CLASS = 400


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(wheel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().splitlines()
    seen = {}
    splits = {"train": ([], []), "t10k": ([], [])}
    for row in rows:
        values = [int(float(v)) for v in row.split(",")]
        pixels, label = values[:-1], values[-1]
        assert len(pixels) == 784
        count = seen.get(label, 0)
        seen[label] = count + 1
        images, labels = splits["train" if count < TRAIN_PER_CLASS else "t10k"]
        images.append(bytes(pixels))
        labels.append(label)
    for name, (images, labels) in splits.items():
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [len(images), 28, 28], b"".join(images))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(labels)], bytes(labels))
        print(name, len(images))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
