"""Pinhole camera model and fronto-parallel plane homographies.

Conventions: right-handed, the camera looks down +z, image origin is the
top-left corner with u to the right and v down. Pixel (i, j) sits at the
continuous coordinate (i, j). Extrinsics map world to camera coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeometryError, ParseError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class Extrinsics:
    """World-to-camera rigid transform ``X_cam = R @ X_world + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ConfigError("rotation matrix is not orthonormal with det 1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics.K

    @property
    def R(self) -> np.ndarray:
        return self.extrinsics.R

    @property
    def t(self) -> np.ndarray:
        return self.extrinsics.t

    @property
    def center(self) -> np.ndarray:
        return self.extrinsics.center

    def with_translation_scaled(self, f: float) -> "Camera":
        """Same camera in a world whose distances are multiplied by ``f``."""
        return replace(self, extrinsics=Extrinsics(self.R, self.t * f))


def look_at(
    eye,
    target,
    up=(0.0, -1.0, 0.0),
    intrinsics: Intrinsics | None = None,
    width: int = 64,
    height: int = 64,
) -> Camera:
    """Build a camera at ``eye`` whose optical axis points at ``target``.

    ``up`` is the world direction that should appear towards the top of the
    image; with v pointing down the default makes world -y point up.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(-up, z)
    n = np.linalg.norm(x)
    if n < 1e-12:
        raise GeometryError("up vector is parallel to the viewing direction")
    x /= n
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    if intrinsics is None:
        f = 1.1 * width
        intrinsics = Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)
    return Camera(intrinsics, Extrinsics(R, -R @ eye), width, height)


def project(cam: Camera, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points (..., 3) to pixels.

    Returns:
        ``(uv, z, valid)`` where ``uv`` has shape (..., 2), ``z`` is the
        camera-frame depth and ``valid`` is false where ``z <= 0``. Pixel
        coordinates at ``z == 0`` are set to NaN instead of dividing by zero.
    """
    X = np.asarray(X, dtype=np.float64)
    Xc = X @ cam.R.T + cam.t
    z = Xc[..., 2]
    degenerate = z == 0
    zs = np.where(degenerate, 1.0, z)
    K = cam.K
    u = K[0, 0] * Xc[..., 0] / zs + K[0, 2]
    v = K[1, 1] * Xc[..., 1] / zs + K[1, 2]
    uv = np.stack([u, v], axis=-1)
    uv[degenerate] = np.nan
    return uv, z, z > 0


def backproject(cam: Camera, uv, d) -> np.ndarray:
    """Lift pixels ``uv`` (..., 2) with camera-frame depths ``d`` to world points."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("backproject requires positive depth")
    intr = cam.intrinsics
    Xc = np.stack(
        [(uv[..., 0] - intr.cx) / intr.fx * d, (uv[..., 1] - intr.cy) / intr.fy * d, d],
        axis=-1,
    )
    return (Xc - cam.t) @ cam.R


def relative_pose(src: Camera, tgt: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Transform taking target-camera coordinates to source-camera coordinates."""
    R_rel = src.R @ tgt.R.T
    t_rel = src.t - R_rel @ tgt.t
    return R_rel, t_rel


def plane_homography(src: Camera, tgt: Camera, d: float) -> np.ndarray:
    """Homography from target pixels to source pixels for the plane z = d in the target frame.

    A point on the plane satisfies n.X_t = d with n = (0, 0, 1), so
    X_s = R_rel X_t + t_rel (n.X_t) / d.
    """
    if not d > 0:
        raise GeometryError(f"plane depth must be positive, got {d}")
    R_rel, t_rel = relative_pose(src, tgt)
    n = np.array([0.0, 0.0, 1.0])
    return src.K @ (R_rel + np.outer(t_rel, n) / d) @ tgt.intrinsics.K_inv


def scale_camera(cam: Camera, s: int) -> Camera:
    """Camera for an image downsampled by the integer factor ``s``.

    Pixel j of the downsampled image corresponds to full-resolution coordinate
    ``s * j``, so every intrinsic divides by ``s``.
    """
    if s < 1 or cam.width % s or cam.height % s:
        raise ConfigError(f"scale factor {s} does not divide image size {cam.width}x{cam.height}")
    if s == 1:
        return cam
    i = cam.intrinsics
    return Camera(
        Intrinsics(i.fx / s, i.fy / s, i.cx / s, i.cy / s),
        cam.extrinsics,
        cam.width // s,
        cam.height // s,
    )


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of integer pixel coordinates (u, v)."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


# --- camera text files -------------------------------------------------------


def write_camera_txt(path, cam: Camera, d_min: float, d_interval: float) -> None:
    E = np.eye(4)
    E[:3, :3] = cam.R
    E[:3, 3] = cam.t
    lines = ["extrinsic"]
    lines += [" ".join(repr(float(x)) for x in row) for row in E]
    lines.append("")
    lines.append("intrinsic")
    lines += [" ".join(repr(float(x)) for x in row) for row in cam.K]
    lines.append("")
    lines.append(f"{float(d_min)!r} {float(d_interval)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_camera_txt(path, width: int, height: int) -> tuple[Camera, float, float]:
    """Parse a camera text file.

    Returns:
        ``(camera, d_min, d_interval)``.
    """
    path = Path(path)
    raw = path.read_bytes()
    text = raw.decode("ascii", errors="replace")
    tokens: list[tuple[str, int]] = []
    offset = 0
    for line in text.splitlines(keepends=True):
        col = 0
        for piece in line.split():
            col = line.index(piece, col)
            tokens.append((piece, offset + col))
            col += len(piece)
        offset += len(line.encode("ascii", errors="replace"))

    pos = 0

    def expect(word):
        nonlocal pos
        if pos >= len(tokens) or tokens[pos][0] != word:
            at = tokens[pos][1] if pos < len(tokens) else len(raw)
            raise ParseError(path, at, f"expected '{word}'")
        pos += 1

    def floats(n):
        nonlocal pos
        out = []
        for _ in range(n):
            if pos >= len(tokens):
                raise ParseError(path, len(raw), "unexpected end of file")
            tok, at = tokens[pos]
            try:
                out.append(float(tok))
            except ValueError:
                raise ParseError(path, at, f"not a number: {tok!r}") from None
            pos += 1
        return np.array(out)

    expect("extrinsic")
    E = floats(16).reshape(4, 4)
    expect("intrinsic")
    K = floats(9).reshape(3, 3)
    d_min, d_interval = floats(2)
    if pos != len(tokens):
        raise ParseError(path, tokens[pos][1], "trailing data")
    try:
        cam = Camera(
            Intrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2]),
            Extrinsics(E[:3, :3], E[:3, 3]),
            width,
            height,
        )
    except ConfigError as exc:
        raise ParseError(path, 0, str(exc)) from None
    return cam, float(d_min), float(d_interval)
