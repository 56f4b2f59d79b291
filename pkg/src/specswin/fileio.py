"""On-disk formats: SPT1 tensors, PPM frames, key-value manifests, CSV.

SPT1 layout: magic bytes ``53 50 54 31`` ("SPT1"), little-endian u32 rank,
rank little-endian u32 extents, then row-major little-endian IEEE-754 float32
data. All floats in CSV files are emitted with 6 decimal places.
"""

import os
import struct

import numpy as np

from .errors import DataError

SPT1_MAGIC = b"SPT1"


def save_spt1(path, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SPT1_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(arr.tobytes())


def load_spt1(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read tensor file {path}: {exc}") from exc
    if blob[:4] != SPT1_MAGIC:
        raise DataError(f"{path}: bad magic, not an SPT1 file")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    if data.size != count:
        raise DataError(f"{path}: truncated SPT1 payload")
    return data.reshape(shape).copy()


def save_ppm(path, frame):
    """Write one frame (H, W) or (H, W, ch) with values in [0, 1] as binary P6."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w, _ = img.shape
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def format_float(x):
    return f"{x:.6f}"


def write_csv(path, header, rows):
    """Rows are sequences; floats get fixed 6-decimal formatting."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, (float, np.floating)):
                cells.append(format_float(cell))
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_kv(path, mapping):
    """Flat key=value file, keys sorted for reproducible bytes."""
    with open(path, "w") as fh:
        for key in sorted(mapping):
            fh.write(f"{key}={mapping[key]}\n")


def read_kv(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def atomic_replace_dir(tmp_dir, final_dir):
    """Atomically promote a fully written directory to its final name."""
    if os.path.exists(final_dir):
        backup = final_dir + ".old"
        if os.path.exists(backup):
            import shutil

            shutil.rmtree(backup)
        os.rename(final_dir, backup)
        os.rename(tmp_dir, final_dir)
        import shutil

        shutil.rmtree(backup)
    else:
        os.rename(tmp_dir, final_dir)
