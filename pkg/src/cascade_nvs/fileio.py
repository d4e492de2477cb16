"""PFM, PNG, PLY and parameter checkpoint readers/writers."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParseError


# --- PFM ---------------------------------------------------------------------


def write_pfm(path, data: np.ndarray) -> None:
    """Write a grayscale little-endian PFM (rows stored bottom to top)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D array, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


_PFM_STEPS = (
    (re.compile(rb"P[fF]\n"), "magic"),
    (re.compile(rb"\d+ \d+\n"), "width/height line"),
    (re.compile(rb"[-+0-9.eE]+\n"), "scale line"),
)


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    pos = 0
    fields = []
    for pat, what in _PFM_STEPS:
        m = pat.match(raw, pos)
        if m is None:
            raise ParseError(path, pos, f"malformed PFM header: bad {what}")
        fields.append((m.group(0)[:-1], pos))
        pos = m.end()
    kind = fields[0][0]
    w, h = (int(x) for x in fields[1][0].split())
    try:
        scale = float(fields[2][0])
    except ValueError:
        raise ParseError(path, fields[2][1], "invalid PFM scale") from None
    if scale == 0:
        raise ParseError(path, fields[2][1], "PFM scale must be nonzero")
    channels = 3 if kind == b"PF" else 1
    n = w * h * channels
    start = pos
    if len(raw) - start != 4 * n:
        raise ParseError(path, min(len(raw), start + 4 * n), f"expected {4 * n} payload bytes, found {len(raw) - start}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=start).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.ascontiguousarray(data.reshape(shape)[::-1])


# --- PNG ---------------------------------------------------------------------


def write_png(path, rgb) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB."""
    arr = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except (OSError, SyntaxError, ValueError) as exc:
        raise ParseError(path, 0, f"unreadable PNG: {exc}") from None
    return arr.astype(np.float64) / 255.0


# --- PLY ---------------------------------------------------------------------

_PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(path, points, colors) -> None:
    """Binary little-endian PLY with float32 xyz and uint8 rgb.

    ``colors`` are floats in [0, 1] or uint8.
    """
    points = np.asarray(points)
    colors = np.asarray(colors)
    if colors.dtype != np.uint8:
        colors = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    if len(points) != len(colors):
        raise ValueError("points and colors differ in length")
    rec = np.empty(len(points), dtype=_PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns float32 points (N, 3) and uint8 colors (N, 3)."""
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise ParseError(path, 0, "not a PLY file")
    header = raw[:end].decode("ascii", errors="replace")
    if "format binary_little_endian 1.0" not in header:
        raise ParseError(path, header.find("format"), "only binary little-endian PLY is supported")
    m = re.search(r"element vertex (\d+)", header)
    if m is None:
        raise ParseError(path, 0, "missing vertex element")
    n = int(m.group(1))
    start = end + len(b"end_header\n")
    if len(raw) - start != n * _PLY_DTYPE.itemsize:
        raise ParseError(path, start, f"expected {n * _PLY_DTYPE.itemsize} vertex bytes, found {len(raw) - start}")
    rec = np.frombuffer(raw, dtype=_PLY_DTYPE, count=n, offset=start)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1)
    cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1)
    return pts, cols


# --- parameter checkpoints -----------------------------------------------------

CHECKPOINT_MAGIC = b"CNVSP1"


def write_checkpoint(path, arrays: dict) -> None:
    """Flat container: magic, then per entry name length, name, rank, dims, f32 payload."""
    parts = [CHECKPOINT_MAGIC]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4").copy(order="C")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ParseError(path, 0, "bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise ParseError(path, pos, f"truncated {what}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        entry = pos
        (ln,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(ln, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(path, entry + 4, "name is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise ParseError(path, pos - 4, f"implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * count, "payload")
        if name in out:
            raise ParseError(path, entry, f"duplicate entry {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
