import numpy as np
import pytest
import torch

from cascade_nvs.camera import Camera, Extrinsics, Intrinsics, pixel_grid, plane_homography
from cascade_nvs.errors import GeometryError
from cascade_nvs.learn import grad_check
from cascade_nvs.warp import (
    apply_homography,
    bilinear_sample,
    bilinear_sample_grad,
    depth_to_source_coords,
    depth_warp,
    forward_splat,
    homography_warp,
)

from conftest import random_camera

D = torch.float64


def img(C=2, H=5, W=6, seed=0):
    return torch.rand((C, H, W), generator=torch.Generator().manual_seed(seed), dtype=D)


def test_integer_coords_exact():
    m = img()
    coords = torch.tensor([[0.0, 0.0], [5.0, 4.0], [2.0, 3.0]], dtype=D)
    s = bilinear_sample(m, coords)
    assert torch.equal(s.values[:, 2], m[:, 3, 2]) and torch.equal(s.values[:, 1], m[:, 4, 5]) and s.mask.all()


def test_block_center_is_mean():
    m = img()
    s = bilinear_sample(m, torch.tensor([[1.5, 2.5]], dtype=D))
    ref = m[:, 2:4, 1:3].mean(dim=(1, 2))
    assert torch.allclose(s.values[:, 0], ref, atol=1e-15)


def test_out_of_bounds_and_nan():
    m = img()
    s = bilinear_sample(m, torch.tensor([[-1.0, -1.0], [5.5, 0.0], [0.0, 4.0 + 1e-3]], dtype=D))
    assert not s.mask.any() and torch.equal(s.values, torch.zeros_like(s.values))
    with pytest.raises(GeometryError):
        bilinear_sample(m, torch.tensor([[np.nan, 0.0]], dtype=D))


def test_random_against_direct_formula(rng):
    m = img(3, 7, 9, seed=3)
    xy = rng.uniform([0, 0], [8, 6], size=(50, 2))
    s = bilinear_sample(m, torch.tensor(xy, dtype=D))
    a = m.numpy()
    for k, (x, y) in enumerate(xy):
        x0, y0 = min(int(x), 7), min(int(y), 5)
        fx, fy = x - x0, y - y0
        ref = (1 - fx) * (1 - fy) * a[:, y0, x0] + fx * (1 - fy) * a[:, y0, x0 + 1] + (1 - fx) * fy * a[:, y0 + 1, x0] + fx * fy * a[:, y0 + 1, x0 + 1]
        assert np.allclose(s.values[:, k].numpy(), ref, atol=1e-14)


def test_linearity_in_map():
    A, B = img(seed=1), img(seed=2)
    c = torch.tensor([[0.3, 1.7], [4.2, 3.9], [2.5, 0.5]], dtype=D)
    lhs = bilinear_sample(2.0 * A - 3.0 * B, c).values
    rhs = 2.0 * bilinear_sample(A, c).values - 3.0 * bilinear_sample(B, c).values
    assert (lhs - rhs).abs().max() < 1e-12


def test_grad_one_hot_and_zero_upstream():
    m = img(1, 5, 6)
    coords = torch.tensor([[3.0, 2.0]], dtype=D)
    gm, gc = bilinear_sample_grad(m, coords, torch.ones((1, 1), dtype=D))
    expect = torch.zeros_like(m)
    expect[0, 2, 3] = 1.0
    assert torch.equal(gm, expect)
    gm, gc = bilinear_sample_grad(m, coords, torch.zeros((1, 1), dtype=D))
    assert not gm.any() and not gc.any()


def test_grad_at_integer_coordinate_is_central_slope():
    # on a linear ramp both one-sided slopes agree, so the symmetric derivative equals the finite difference
    m = img(1, 5, 6, seed=5)
    coords = torch.tensor([[2.0, 3.0]], dtype=D)
    _, gc = bilinear_sample_grad(m, coords, torch.ones((1, 1), dtype=D))
    h = 1e-5
    f = lambda c: bilinear_sample(m, torch.tensor([c], dtype=D)).values[0, 0].item()
    fd_x = (f([2.0 + h, 3.0]) - f([2.0 - h, 3.0])) / (2 * h)
    fd_y = (f([2.0, 3.0 + h]) - f([2.0, 3.0 - h])) / (2 * h)
    assert abs(gc[0, 0].item() - fd_x) <= 1e-4 * max(abs(fd_x), 1e-12)
    assert abs(gc[0, 1].item() - fd_y) <= 1e-4 * max(abs(fd_y), 1e-12)


def test_autograd_matches_finite_differences():
    m = img(2, 4, 5, seed=7)
    coords = torch.tensor([[0.3, 0.6], [3.7, 2.2], [1.45, 1.55]], dtype=D)
    report = grad_check(lambda img, coords: bilinear_sample(img, coords).values, {"img": m, "coords": coords})
    assert report.passed, report.errors


def test_homography_identity_translation_and_oracle(rng):
    m = img(1, 6, 7)
    s = homography_warp(m, np.eye(3), (6, 7))
    assert torch.equal(s.values, m) and s.mask.all()
    T = np.array([[1.0, 0, 2.0], [0, 1.0, 1.0], [0, 0, 1.0]])
    s = homography_warp(m, T, (6, 7))
    assert torch.equal(s.values[0, :5, :5], m[0, 1:, 2:])
    assert not s.mask[:, 5:].any() and not s.mask[5:, :].any() and s.mask[:5, :5].all()
    H = np.eye(3) + rng.normal(scale=0.01, size=(3, 3))
    grid = pixel_grid(7, 6)
    xy, ok = apply_homography(H, torch.as_tensor(grid, dtype=D))
    for v in range(6):
        for u in range(7):
            q = H @ np.array([u, v, 1.0])
            assert np.abs(xy[v, u].numpy() - q[:2] / q[2]).max() < 1e-9


def test_homography_nonpositive_w_masked():
    H = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 2.0]])  # w <= 0 for u >= 2
    s = homography_warp(img(1, 4, 4), H, (4, 4))
    assert not s.mask[:, 2:].any()


def stereo_pair(b=0.25, fx=60.0, W=32, H=24):
    intr = Intrinsics(fx, fx, (W - 1) / 2, (H - 1) / 2)
    return Camera(intr, Extrinsics(), W, H), Camera(intr, Extrinsics(np.eye(3), [-b, 0.0, 0.0]), W, H)


def test_depth_warp_identity():
    cam, _ = stereo_pair()
    m = img(2, 24, 32)
    depth = torch.rand((24, 32), dtype=D) + 1.0
    r = depth_warp(m, depth, cam, cam)
    assert torch.allclose(r.sampled.values, m, atol=1e-12) and torch.allclose(r.z, depth, atol=1e-12)


def test_depth_warp_uniform_shift_matches_homography():
    tgt, src = stereo_pair()
    d = 3.0
    xy, z, ok = depth_to_source_coords(torch.full((24, 32), d, dtype=D), tgt, src)
    grid = torch.as_tensor(pixel_grid(32, 24), dtype=D)
    assert torch.allclose(xy[..., 0], grid[..., 0] - 60.0 * 0.25 / d, atol=1e-12)
    hxy, _ = apply_homography(plane_homography(src, tgt, d), grid)
    assert (hxy - xy).abs().max() < 1e-6


def test_depth_warp_general_pair_matches_homography(rng):
    for _ in range(20):
        a, b = random_camera(rng, 32, 24), random_camera(rng, 32, 24)
        d = rng.uniform(2.0, 8.0)
        xy, _, ok = depth_to_source_coords(torch.full((24, 32), d, dtype=D), b, a)
        hxy, hok = apply_homography(plane_homography(a, b, d), torch.as_tensor(pixel_grid(32, 24), dtype=D))
        both = ok & hok
        assert (hxy[both] - xy[both]).abs().max() < 1e-6


def test_depth_warp_outside_and_nonpositive_depth():
    tgt, src = stereo_pair(b=5.0)
    m = img(1, 24, 32)
    depth = torch.full((24, 32), 2.0, dtype=D)
    depth[0, 0] = -1.0
    r = depth_warp(m, depth, tgt, src)
    assert not r.visible.any() and not r.sampled.values.any()


def test_forward_splat_identity():
    cam, _ = stereo_pair()
    m = img(3, 24, 32)
    s = forward_splat(m, torch.full((24, 32), 2.0, dtype=D), cam, cam)
    assert torch.equal(s.values, m) and s.mask.all()


def test_forward_splat_z_buffer():
    # a 1x1 current camera with a tiny focal length: both previous pixels land on its only pixel
    prev = Camera(Intrinsics(10.0, 10.0, 1.0, 0.0), Extrinsics(), 2, 1)
    cur = Camera(Intrinsics(1e-3, 1e-3, 0.0, 0.0), Extrinsics(), 1, 1)
    s = forward_splat(torch.tensor([[[5.0, 7.0]]], dtype=D), np.array([[3.0, 1.0]]), prev, cur)
    assert s.mask.all() and s.values.item() == 7.0
    # equal depth: the earlier pixel in raster order wins
    s = forward_splat(torch.tensor([[[5.0, 7.0]]], dtype=D), np.array([[2.0, 2.0]]), prev, cur)
    assert s.values.item() == 5.0


def test_forward_splat_rotated_view_holes_are_masked():
    tgt, src = stereo_pair(b=0.5)
    m = img(1, 24, 32) + 0.5
    s = forward_splat(m, np.full((24, 32), 2.0), tgt, src)
    holes = ~s.mask
    assert holes.sum() > 0 and not s.values[0][holes].any() and (s.values[0][s.mask] > 0).all()
