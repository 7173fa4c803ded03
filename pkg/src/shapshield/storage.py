"""On-disk formats: a generic array-blob container, the image raster format,
and tabular CSV export.

Blob container layout (little-endian):
    bytes 0..3   magic b"SSBL"
    bytes 4..7   uint32 header length L
    bytes 8..8+L UTF-8 JSON header {"meta": ..., "arrays": [{name, shape, dtype}]}
    then the raw C-order bytes of each array, in header order.

Raster layout (little-endian):
    bytes 0..7   magic b"SSRAS001"
    4 x uint32   n, channels, height, width
    n x uint8    labels
    n x uint8    split flags (0 train, 1 test)
    float64      pixel data, C-order (n, channels, height, width)

Both round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

BLOB_MAGIC = b"SSBL"
RASTER_MAGIC = b"SSRAS001"

_ALLOWED_DTYPES = {"float64", "int64", "uint8", "bool"}


def write_blob(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if str(arr.dtype) not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported array dtype {arr.dtype} for '{name}'")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        payload.append(arr.tobytes())
    header = json.dumps({"meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for chunk in payload:
            f.write(chunk)


def read_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BLOB_MAGIC:
            raise ValueError(f"{path}: not a blob file (magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return header["meta"], arrays


def write_raster(path, images: np.ndarray, labels: np.ndarray,
                 split_flags: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"raster expects (n, c, h, w) images, got {images.shape}")
    n, c, h, w = images.shape
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC)
        f.write(struct.pack("<4I", n, c, h, w))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(split_flags, dtype=np.uint8).tobytes())
        f.write(images.tobytes())


def read_raster(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != RASTER_MAGIC:
            raise ValueError(f"{path}: not a raster file (magic {magic!r})")
        n, c, h, w = struct.unpack("<4I", f.read(16))
        labels = np.frombuffer(f.read(n), dtype=np.uint8).copy()
        split_flags = np.frombuffer(f.read(n), dtype=np.uint8).copy()
        data = np.frombuffer(f.read(n * c * h * w * 8), dtype=np.float64)
    return data.reshape(n, c, h, w).copy(), labels, split_flags


def write_tabular_csv(path, features: np.ndarray, labels: np.ndarray,
                      split_flags: np.ndarray) -> None:
    n, m = features.shape
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join([f"f{j}" for j in range(m)] + ["label", "split"]) + "\n")
        for i in range(n):
            row = ",".join(f"{v:.17g}" for v in features[i])
            f.write(f"{row},{int(labels[i])},{int(split_flags[i])}\n")


def read_tabular_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        m = len(header) - 2
        feats, labels, flags = [], [], []
        for line in f:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            feats.append([float(v) for v in parts[:m]])
            labels.append(int(parts[m]))
            flags.append(int(parts[m + 1]))
    return (np.asarray(feats, dtype=np.float64),
            np.asarray(labels, dtype=np.int64),
            np.asarray(flags, dtype=np.int64))
