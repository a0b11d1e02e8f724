"""PFM / 16-bit PNG image files and atomic output writes."""

import contextlib
import json
import os
import re
import tempfile

import numpy as np
import png

from unrollcam.errors import InvalidArgumentError


class PfmError(InvalidArgumentError):
    """Malformed PFM file."""


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temp path next to ``path``; rename it over ``path`` only on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_json(path, obj):
    with atomic_path(path) as tmp:
        with open(tmp, "w") as f:
            json.dump(obj, f, indent=2)
            f.write("\n")


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: invalid JSON ({exc})") from None


_HEADER_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def read_pfm(path):
    """Read a PFM file. Returns float64 (H, W) for ``Pf`` or (H, W, 3) for ``PF``.

    Rows are stored bottom-to-top; the returned array is top-to-bottom.
    """
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag == b"Pf":
            channels = 1
        elif tag == b"PF":
            channels = 3
        else:
            raise PfmError(f"{path}: bad PFM identifier {tag[:8]!r}")
        dims = _HEADER_DIMS.match(f.readline())
        if dims is None:
            raise PfmError(f"{path}: bad PFM dimension line")
        width, height = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(f.readline().strip())
        except ValueError:
            raise PfmError(f"{path}: bad PFM scale line") from None
        if scale == 0:
            raise PfmError(f"{path}: PFM scale must be non-zero")
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != count:
        raise PfmError(f"{path}: expected {count} floats, found {data.size}")
    img = data.reshape(height, width, channels)[::-1].astype(np.float64)
    return img[:, :, 0] if channels == 1 else img


def write_pfm(path, img):
    """Write a (H, W), (H, W, 1) or (H, W, 3) array as little-endian PFM (float32)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise InvalidArgumentError(f"PFM stores 1 or 3 channels, got shape {arr.shape}")
    height, width = arr.shape[:2]
    payload = np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes()
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(tag + b"\n" + f"{width} {height}\n".encode() + b"-1.0\n")
            f.write(payload)


def write_png16(path, img):
    """Clamp to [0, 1], round to 16-bit, write linear (no gamma) PNG."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        greyscale = True
        planes = 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        greyscale = False
        planes = 3
    else:
        raise InvalidArgumentError(f"PNG export needs 1 or 3 channels, got shape {arr.shape}")
    q = np.rint(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    rows = q.reshape(q.shape[0], -1)
    writer = png.Writer(width=q.shape[1], height=q.shape[0], bitdepth=16, greyscale=greyscale, planes=planes)
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as f:
            writer.write(f, rows.tolist())


def read_png16(path):
    """Read a PNG written by :func:`write_png16` back to float64 in [0, 1]."""
    width, height, rows, info = png.Reader(filename=os.fspath(path)).read()
    planes = info["planes"]
    arr = np.array([np.asarray(r, dtype=np.float64) for r in rows]).reshape(height, width, planes)
    return arr / (2 ** info["bitdepth"] - 1)


def read_image(path):
    """Load ``.pfm`` or ``.png`` as float64 (H, W, C)."""
    path = os.fspath(path)
    if path.lower().endswith(".pfm"):
        img = read_pfm(path)
    elif path.lower().endswith(".png"):
        img = read_png16(path)
    else:
        raise InvalidArgumentError(f"unsupported image extension: {path}")
    return img[:, :, None] if img.ndim == 2 else img


def write_image(path, img):
    """Write ``.pfm`` losslessly (float32) or ``.png`` clamped 16-bit."""
    path = os.fspath(path)
    if path.lower().endswith(".pfm"):
        write_pfm(path, img)
    elif path.lower().endswith(".png"):
        write_png16(path, img)
    else:
        raise InvalidArgumentError(f"unsupported image extension: {path}")
