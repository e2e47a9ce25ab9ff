"""Image resampling, tissue masks and file I/O.

Arrays are laid out (H, W) or (H, W, C).  Pixel ``(i, j)`` has its center at
coordinate ``(i, j)``, and rotation is about ``((H - 1) / 2, (W - 1) / 2)``, so
quarter-turn rotation and integer nearest upsampling commute exactly.
Positive angles rotate counter-clockwise as displayed, matching
``np.rot90``.

Binary formats
--------------
* PGM ``P5`` / PPM ``P6`` with maxval 255.
* TensorFile: ``b"SRET"``, version u16, rank u16, rank x u64 dims, then
  float32 payload, all little-endian, row-major.
"""
from __future__ import annotations

import os
import struct

import numpy as np
from scipy import ndimage

IGNORE = 255
WHITE = 1.0
TISSUE_THRESHOLD = 0.85

TENSOR_MAGIC = b"SRET"
TENSOR_VERSION = 1

PLUS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# resampling


def _quarter_turns(angle):
    q, rem = divmod(float(angle), 90.0)
    if rem != 0.0:
        return None
    return int(q) % 4


def _bilinear_sample(img, ys, xs, fill):
    """Sample ``img`` (H, W, C) at float coordinates, outside pixels read as ``fill``."""
    H, W = img.shape[:2]
    C = img.shape[2]
    padded = np.empty((H + 2, W + 2, C), dtype=np.float64)
    padded[...] = np.asarray(fill, dtype=np.float64)
    padded[1:-1, 1:-1] = img
    y = ys + 1.0
    x = xs + 1.0
    outside = (y < 0) | (y > H + 1) | (x < 0) | (x > W + 1)
    y = np.clip(y, 0, H + 1)
    x = np.clip(x, 0, W + 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), H)
    x0 = np.minimum(np.floor(x).astype(np.int64), W)
    fy = (y - y0)[..., None]
    fx = (x - x0)[..., None]
    top = padded[y0, x0] * (1 - fx) + padded[y0, x0 + 1] * fx
    bot = padded[y0 + 1, x0] * (1 - fx) + padded[y0 + 1, x0 + 1] * fx
    out = top * (1 - fy) + bot * fy
    out[outside] = fill
    return out


def _rotation_grid(H, W, angle):
    theta = np.deg2rad(float(angle))
    c, s = np.cos(theta), np.sin(theta)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64) - cy, np.arange(W, dtype=np.float64) - cx,
                         indexing="ij")
    # output pixel (X, Y) reads the input at R(theta) (X, Y), image y axis pointing down
    src_x = c * xx - s * yy + cx
    src_y = s * xx + c * yy + cy
    return src_y, src_x


def rotate_image(img, angle, interp="bilinear", fill=WHITE):
    """Rotate ``img`` by ``angle`` degrees about its center.

    Multiples of 90 degrees are exact array permutations whatever ``interp``.
    Samples falling outside the source frame take ``fill``.
    """
    img = np.asarray(img)
    if interp not in ("bilinear", "nearest"):
        raise ValueError(f"interp must be 'bilinear' or 'nearest', got {interp!r}")
    q = _quarter_turns(angle)
    if q is not None:
        return np.ascontiguousarray(np.rot90(img, q, axes=(0, 1)))
    squeeze = img.ndim == 2
    src = img[..., None] if squeeze else img
    H, W = src.shape[:2]
    ys, xs = _rotation_grid(H, W, angle)
    if interp == "nearest":
        iy = np.floor(ys + 0.5).astype(np.int64)
        ix = np.floor(xs + 0.5).astype(np.int64)
        inside = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
        out = np.empty_like(src)
        out[...] = fill
        out[inside] = src[iy[inside], ix[inside]]
    else:
        out = _bilinear_sample(src.astype(np.float64), ys, xs, fill)
        if np.issubdtype(img.dtype, np.floating):
            out = out.astype(img.dtype)
    return out[..., 0] if squeeze else out


def rotate_label_map(labels, angle):
    """Nearest-neighbour rotation of a label map; out-of-frame pixels become IGNORE."""
    labels = np.asarray(labels)
    return rotate_image(labels, angle, interp="nearest", fill=IGNORE)


def _nearest_index(n_in, n_out):
    # source coordinate num / den in exact integers; halves round toward the centre so the
    # index map mirrors exactly, which keeps nearest resizing commuting with quarter turns
    num = (2 * np.arange(n_out, dtype=np.int64) + 1) * n_in - n_out
    den = 2 * n_out
    lower = 2 * num <= (n_in - 1) * den
    up = (2 * num + den) // (2 * den)
    down = -((den - 2 * num) // (2 * den))
    return np.clip(np.where(lower, up, down), 0, n_in - 1)


def _bilinear_weights(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(arr, out_h, out_w, interp="bilinear"):
    """Resize the two leading axes of ``arr`` with half-pixel-center sampling.

    Bilinear clamps at the border; nearest rounds exact halves toward the centre.  Integer nearest
    upsampling is a pure block repeat.
    """
    arr = np.asarray(arr)
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    H, W = arr.shape[:2]
    if interp == "nearest":
        return arr[_nearest_index(H, out_h)][:, _nearest_index(W, out_w)]
    if interp != "bilinear":
        raise ValueError(f"interp must be 'bilinear' or 'nearest', got {interp!r}")
    a = arr if np.issubdtype(arr.dtype, np.floating) else arr.astype(np.float64)
    i0, i1, f = _bilinear_weights(H, out_h)
    shape = (-1,) + (1,) * (a.ndim - 1)
    f = f.reshape(shape).astype(a.dtype)
    rows = a[i0] * (1 - f) + a[i1] * f
    j0, j1, g = _bilinear_weights(W, out_w)
    g = g.reshape((1, -1) + (1,) * (a.ndim - 2)).astype(a.dtype)
    return rows[:, j0] * (1 - g) + rows[:, j1] * g


def block_reduce_mask(mask, out_h, out_w):
    """Downsample a boolean mask; a cell is set only if its whole block is set.

    Falls back to nearest sampling when the size is not an integer multiple.
    """
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    if H % out_h or W % out_w:
        return resize(mask, out_h, out_w, "nearest")
    return mask.reshape(out_h, H // out_h, out_w, W // out_w).all(axis=(1, 3))


def block_mode(labels, out_h, out_w, n_labels=None):
    """Downsample a label map by per-block majority (ties -> smaller label).

    A block touching any IGNORE pixel becomes IGNORE.
    """
    labels = np.asarray(labels)
    H, W = labels.shape
    if H % out_h or W % out_w:
        return resize(labels, out_h, out_w, "nearest")
    fy, fx = H // out_h, W // out_w
    blocks = labels.reshape(out_h, fy, out_w, fx).transpose(0, 2, 1, 3).reshape(out_h, out_w, fy * fx)
    valid = blocks != IGNORE
    if n_labels is None:
        present = labels[labels != IGNORE]
        n_labels = int(present.max()) + 1 if present.size else 1
    counts = np.stack([(blocks == c).sum(axis=2) for c in range(n_labels)], axis=-1)
    out = counts.argmax(axis=-1).astype(labels.dtype)
    out[~valid.all(axis=2)] = IGNORE
    return out


# ---------------------------------------------------------------------------
# tissue mask


def grayscale(img):
    img = np.asarray(img, dtype=np.float64)
    if img.dtype.kind == "u" or img.max(initial=0) > 1.0:
        img = img / 255.0
    return img.mean(axis=2) if img.ndim == 3 else img


def tissue_mask(img, threshold=TISSUE_THRESHOLD):
    """Non-background pixels: gray < threshold, then plus-shaped opening and closing."""
    img = np.asarray(img)
    if np.issubdtype(img.dtype, np.integer):
        img = img / 255.0
    gray = img.mean(axis=2) if img.ndim == 3 else img
    mask = gray < threshold
    mask = ndimage.binary_opening(mask, structure=PLUS)
    mask = ndimage.binary_closing(mask, structure=PLUS)
    return mask


# ---------------------------------------------------------------------------
# conversions


def to_uint8(img):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def to_float(img, dtype=np.float32):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return (img / 255.0).astype(dtype)
    return img.astype(dtype)


# ---------------------------------------------------------------------------
# PGM / PPM


def write_pnm(path, img):
    """Write a P5 (H, W) or P6 (H, W, 3) file with maxval 255."""
    data = np.asarray(img)
    if data.dtype != np.uint8:
        if np.issubdtype(data.dtype, np.floating):
            data = to_uint8(data)
        else:
            if data.min(initial=0) < 0 or data.max(initial=0) > 255:
                raise ValueError("integer samples must lie in [0, 255]")
            data = data.astype(np.uint8)
    if data.ndim == 2:
        magic = b"P5"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) array, got shape {data.shape}")
    H, W = data.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (W, H)
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(data).tobytes())


write_pgm = write_pnm
write_ppm = write_pnm


def _parse_pnm(buf):
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise FormatError("bad magic, expected P5 or P6", 0)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        # whitespace and comments between header fields
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                if end < 0:
                    raise FormatError("unterminated header comment", pos)
                pos = end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError("expected a decimal header field", pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", pos)
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError("image dimensions must be positive", pos)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", pos)
    need = width * height * channels
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape).copy()


def read_pnm(path):
    with open(path, "rb") as fh:
        return _parse_pnm(fh.read())


read_pgm = read_pnm
read_ppm = read_pnm


def write_label_map(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label maps are 2-D")
    write_pnm(path, labels.astype(np.uint8))


def read_label_map(path):
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise FormatError("label maps must be P5", 0)
    return arr


# ---------------------------------------------------------------------------
# TensorFile


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack("<HH", TENSOR_VERSION, arr.ndim)
    header += struct.pack("<%dQ" % arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != TENSOR_MAGIC:
        raise FormatError("bad magic, expected SRET", 0)
    if len(buf) < 8:
        raise FormatError("truncated header", len(buf))
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    dims_end = 8 + 8 * rank
    if len(buf) < dims_end:
        raise FormatError("truncated dimension list", len(buf))
    dims = struct.unpack_from("<%dQ" % rank, buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    need = 4 * count
    if len(buf) - dims_end != need:
        if len(buf) - dims_end < need:
            raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - dims_end}",
                              len(buf))
        raise FormatError("trailing bytes after payload", dims_end + need)
    return np.frombuffer(buf, dtype="<f4", count=count, offset=dims_end).reshape(dims).astype(np.float32)


def write_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


# ---------------------------------------------------------------------------
# bundles: a directory of TensorFiles plus a key = value manifest


def write_bundle(directory, arrays: dict, meta: dict):
    """Write ``arrays`` as ``<name>.sret`` files and a ``manifest.txt``.

    The manifest holds ``key = value`` lines for ``meta`` followed by one
    ``tensor <name> <kind> <shape>`` line per array.  ``kind`` is the
    optional string attribute stored in ``meta['kinds'][name]``.
    """
    os.makedirs(directory, exist_ok=True)
    kinds = dict(meta.get("kinds", {}))
    lines = [f"{k} = {v}" for k, v in meta.items() if k != "kinds"]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        write_tensor(os.path.join(directory, f"{name}.sret"), arr)
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor {name} {kinds.get(name, '-')} {shape}")
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_bundle(directory):
    meta, arrays = {}, {}
    with open(os.path.join(directory, "manifest.txt"), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("tensor "):
                _, name, _kind, _shape = line.split(" ", 3)
                arrays[name] = read_tensor(os.path.join(directory, f"{name}.sret"))
            else:
                key, _, value = line.partition("=")
                meta[key.strip()] = value.strip()
    return arrays, meta
