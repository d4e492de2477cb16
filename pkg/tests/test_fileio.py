import struct

import numpy as np
import pytest

from cascade_nvs.errors import ParseError
from cascade_nvs.fileio import (
    CHECKPOINT_MAGIC,
    read_checkpoint,
    read_pfm,
    read_ply,
    read_png,
    write_checkpoint,
    write_pfm,
    write_ply,
    write_png,
)


def test_pfm_roundtrip_bit_exact(tmp_path, rng):
    d = rng.normal(size=(7, 9)).astype(np.float32)
    d[0, 0] = np.float32(1e-38)
    write_pfm(tmp_path / "d.pfm", d)
    back = read_pfm(tmp_path / "d.pfm")
    assert back.dtype == np.float32 and np.array_equal(back.view(np.uint32), d.view(np.uint32))


def test_pfm_layout_is_bottom_to_top_little_endian(tmp_path):
    d = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    assert struct.unpack("<4f", raw[-16:]) == (3.0, 4.0, 1.0, 2.0)


def test_pfm_big_endian_reads(tmp_path):
    payload = struct.pack(">2f", 5.0, 6.0)
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + payload)
    assert read_pfm(tmp_path / "b.pfm").tolist() == [[5.0, 6.0]]


@pytest.mark.parametrize(
    "blob, offset",
    [(b"P5\n2 2\n-1.0\n", 0), (b"Pf\n2 x\n-1.0\n", 3), (b"Pf\n2 2\n-1..\n", 7), (b"Pf\n2 2\n-1.0\n" + b"\0" * 12, 24)],
)
def test_pfm_corruption_reports_offset(tmp_path, blob, offset):
    p = tmp_path / "bad.pfm"
    p.write_bytes(blob)
    with pytest.raises(ParseError) as e:
        read_pfm(p)
    assert e.value.offset == offset and str(p) in str(e.value)


def test_png_roundtrip_within_quantization(tmp_path, rng):
    img = rng.uniform(size=(5, 6, 3))
    write_png(tmp_path / "i.png", img)
    back = read_png(tmp_path / "i.png")
    assert back.shape == (5, 6, 3) and np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    write_png(tmp_path / "j.png", back)
    assert np.array_equal(read_png(tmp_path / "j.png"), back)


def test_png_corruption(tmp_path):
    (tmp_path / "x.png").write_bytes(b"\x89PNG garbage")
    with pytest.raises(ParseError):
        read_png(tmp_path / "x.png")


def test_ply_roundtrip_bit_exact(tmp_path, rng):
    pts = rng.normal(size=(50, 3)).astype(np.float32)
    cols = rng.integers(0, 256, size=(50, 3)).astype(np.uint8)
    write_ply(tmp_path / "c.ply", pts, cols)
    p, c = read_ply(tmp_path / "c.ply")
    assert np.array_equal(p.view(np.uint32), pts.view(np.uint32)) and np.array_equal(c, cols)
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)), np.zeros((0, 3)))
    assert read_ply(tmp_path / "e.ply")[0].shape == (0, 3)


def test_ply_corruption(tmp_path, rng):
    write_ply(tmp_path / "c.ply", rng.normal(size=(4, 3)), rng.uniform(size=(4, 3)))
    raw = (tmp_path / "c.ply").read_bytes()
    for name, blob in {"trunc": raw[:-5], "magic": b"plx" + raw[3:], "ascii": raw.replace(b"binary_little_endian", b"ascii")}.items():
        (tmp_path / f"{name}.ply").write_bytes(blob)
        with pytest.raises(ParseError):
            read_ply(tmp_path / f"{name}.ply")


def test_checkpoint_roundtrip_and_layout(tmp_path, rng):
    arrays = {"a.weight": rng.normal(size=(2, 3, 3, 3)).astype(np.float32), "b": np.float32(rng.normal(size=4)), "scalar": np.array(2.5, dtype=np.float32)}
    write_checkpoint(tmp_path / "p.ckpt", arrays)
    back = read_checkpoint(tmp_path / "p.ckpt")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape and np.array_equal(back[k].view(np.uint32), arrays[k].view(np.uint32))
    raw = (tmp_path / "p.ckpt").read_bytes()
    assert raw[:6] == CHECKPOINT_MAGIC
    # first entry: name length, name, rank, dims
    assert struct.unpack("<I", raw[6:10]) == (8,) and raw[10:18] == b"a.weight"
    assert struct.unpack("<5I", raw[18:38]) == (4, 2, 3, 3, 3)


def test_checkpoint_corruption(tmp_path):
    write_checkpoint(tmp_path / "p.ckpt", {"w": np.ones((3, 3), dtype=np.float32)})
    raw = (tmp_path / "p.ckpt").read_bytes()
    cases = {
        "magic": (b"XXXXXX" + raw[6:], 0),
        "trunc": (raw[:-1], 23),
        "rank": (raw[:11] + struct.pack("<I", 99) + raw[15:], 11),
        "dup": (raw + raw[6:], len(raw)),
    }
    for name, (blob, offset) in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(ParseError) as e:
            read_checkpoint(tmp_path / name)
        assert e.value.offset == offset, name
