import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from cascade_nvs.camera import Camera, Extrinsics, Intrinsics


def random_camera(rng: np.random.Generator, width: int = 64, height: int = 48) -> Camera:
    """A camera with a random orientation and position near the origin, looking roughly at +z."""
    R = Rotation.from_rotvec(rng.normal(scale=0.2, size=3)).as_matrix()
    t = rng.normal(scale=0.3, size=3)
    f = rng.uniform(40.0, 80.0)
    intr = Intrinsics(f, f * rng.uniform(0.9, 1.1), rng.uniform(0.4, 0.6) * (width - 1), rng.uniform(0.4, 0.6) * (height - 1))
    return Camera(intr, Extrinsics(R, t), width, height)


# criterion number -> verdict line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def visible_count(tgt_cam, gt_depth, cams, depths, rel_tol=0.02) -> np.ndarray:
    """How many of ``cams`` see each target pixel's ground-truth surface point unoccluded.

    A camera sees the point when it projects inside the image and the
    camera's own ground-truth depth at the nearest pixel agrees within
    ``rel_tol`` relative.
    """
    from cascade_nvs.camera import backproject, pixel_grid, project

    h, w = gt_depth.shape
    uv = pixel_grid(w, h).reshape(-1, 2)
    d = gt_depth.reshape(-1)
    X = backproject(tgt_cam, uv, np.where(d > 0, d, 1.0))
    count = np.zeros(h * w, dtype=int)
    for cam, dep in zip(cams, depths):
        uvs, z, front = project(cam, X)
        inside = front & (uvs[:, 0] >= 0) & (uvs[:, 0] <= cam.width - 1) & (uvs[:, 1] >= 0) & (uvs[:, 1] <= cam.height - 1)
        ui = np.clip(np.round(uvs[:, 0]).astype(int), 0, cam.width - 1)
        vi = np.clip(np.round(uvs[:, 1]).astype(int), 0, cam.height - 1)
        count += inside & (np.abs(dep[vi, ui] - z) < rel_tol * z)
    count[d <= 0] = 0
    return count.reshape(h, w)
