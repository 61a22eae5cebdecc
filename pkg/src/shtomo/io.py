"""Small file writers for images and tables."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    """Write ``image`` (values in [0, 1]) as a binary 16-bit PGM."""
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    data = np.round(img * 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[pos + 1:], dtype=dtype, count=w * h)
    return data.reshape(h, w).astype(float) / maxval


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
