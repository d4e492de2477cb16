"""Bilinear sampling and image/feature warping.

All maps are torch tensors shaped (C, H, W). Sampling coordinates are
(..., 2) tensors holding continuous (x, y) = (column, row) positions.
Out-of-bounds samples produce a zero value and a false mask entry; the
valid region is the closed rectangle [0, W-1] x [0, H-1] where all four
interpolation neighbors exist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera, backproject, pixel_grid, project, relative_pose
from .errors import GeometryError

# Coordinates this far outside the image are snapped onto the border; this
# absorbs round-off from projection round trips.
BORDER_EPS = 1e-6


@dataclass
class SampledMap:
    values: torch.Tensor  # (C, *out_shape)
    mask: torch.Tensor  # (*out_shape) bool


@dataclass
class DepthWarpResult:
    sampled: SampledMap
    z: torch.Tensor  # source-frame depth of each target pixel
    visible: torch.Tensor


def _prepare(shape_hw, coords: torch.Tensor):
    H, W = shape_hw
    if torch.isnan(coords).any():
        raise GeometryError("NaN sampling coordinate")
    x = coords[..., 0]
    y = coords[..., 1]
    valid = (x >= -BORDER_EPS) & (x <= W - 1 + BORDER_EPS) & (y >= -BORDER_EPS) & (y <= H - 1 + BORDER_EPS)
    xs = torch.where(valid, x, torch.zeros_like(x)).clamp(0, W - 1)
    ys = torch.where(valid, y, torch.zeros_like(y)).clamp(0, H - 1)
    x0 = torch.floor(xs).clamp(max=max(W - 2, 0))
    y0 = torch.floor(ys).clamp(max=max(H - 2, 0))
    wx = xs - x0
    wy = ys - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    return valid, x0, x1, y0, y1, wx, wy


def _gather(img, yi, xi):
    return img[:, yi, xi]


def _forward(img, coords):
    valid, x0, x1, y0, y1, wx, wy = _prepare(img.shape[-2:], coords)
    wx = wx.to(img.dtype)
    wy = wy.to(img.dtype)
    out = (
        _gather(img, y0, x0) * ((1 - wx) * (1 - wy))
        + _gather(img, y0, x1) * (wx * (1 - wy))
        + _gather(img, y1, x0) * ((1 - wx) * wy)
        + _gather(img, y1, x1) * (wx * wy)
    )
    return out * valid.to(img.dtype), valid


def _backward(img, coords, upstream):
    """Analytic gradients of bilinear sampling wrt the map and the coordinates.

    At exactly integer interior coordinates the sampling function has a kink;
    there the symmetric derivative (mean of the one-sided slopes) is returned,
    which is what a central difference measures.
    """
    C, H, W = img.shape
    valid, x0, x1, y0, y1, wx, wy = _prepare((H, W), coords)
    vm = valid.to(img.dtype)
    wx = wx.to(img.dtype)
    wy = wy.to(img.dtype)
    g = upstream * vm

    grad_img = torch.zeros(C, H * W, dtype=img.dtype)
    for yi, xi, w in (
        (y0, x0, (1 - wx) * (1 - wy)),
        (y0, x1, wx * (1 - wy)),
        (y1, x0, (1 - wx) * wy),
        (y1, x1, wx * wy),
    ):
        idx = (yi * W + xi).reshape(-1)
        grad_img.index_add_(1, idx, (g * w).reshape(C, -1))
    grad_img = grad_img.reshape(C, H, W)

    i00 = _gather(img, y0, x0)
    i01 = _gather(img, y0, x1)
    i10 = _gather(img, y1, x0)
    i11 = _gather(img, y1, x1)
    dx = (1 - wy) * (i01 - i00) + wy * (i11 - i10)
    dy = (1 - wx) * (i10 - i00) + wx * (i11 - i01)

    # symmetric derivative on exact interior grid lines
    xl = (x0 - 1).clamp(min=0)
    yl = (y0 - 1).clamp(min=0)
    on_x = (wx == 0) & (x0 >= 1) & (x0 + 1 <= W - 1)
    on_y = (wy == 0) & (y0 >= 1) & (y0 + 1 <= H - 1)
    if on_x.any():
        dx_left = (1 - wy) * (i00 - _gather(img, y0, xl)) + wy * (i10 - _gather(img, y1, xl))
        dx = torch.where(on_x, 0.5 * (dx + dx_left), dx)
    if on_y.any():
        dy_up = (1 - wx) * (i00 - _gather(img, yl, x0)) + wx * (i01 - _gather(img, yl, x1))
        dy = torch.where(on_y, 0.5 * (dy + dy_up), dy)

    grad_coords = torch.stack([(g * dx).sum(0), (g * dy).sum(0)], dim=-1).to(coords.dtype)
    return grad_img, grad_coords


class _BilinearSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, img, coords):
        out, valid = _forward(img, coords)
        ctx.save_for_backward(img, coords)
        ctx.mark_non_differentiable(valid)
        return out, valid

    @staticmethod
    def backward(ctx, grad_out, _grad_valid):
        img, coords = ctx.saved_tensors
        grad_img, grad_coords = _backward(img.detach(), coords.detach(), grad_out)
        return grad_img, grad_coords


def bilinear_sample(img: torch.Tensor, coords: torch.Tensor) -> SampledMap:
    """Sample ``img`` (C, H, W) at ``coords`` (..., 2).

    Differentiable with respect to both the map and the coordinates.
    """
    values, mask = _BilinearSample.apply(img, coords)
    return SampledMap(values, mask)


def bilinear_sample_grad(img, coords, upstream):
    """Explicit gradients ``(d/d img, d/d coords)`` for an upstream gradient."""
    img = torch.as_tensor(img)
    coords = torch.as_tensor(coords)
    if torch.isnan(coords).any():
        raise GeometryError("NaN sampling coordinate")
    return _backward(img.detach(), coords.detach(), torch.as_tensor(upstream, dtype=img.dtype))


def apply_homography(H, coords: torch.Tensor, w_eps: float = 1e-12):
    """Map (..., 2) pixel coordinates through ``H``; returns (coords, ok)."""
    H = torch.as_tensor(H, dtype=coords.dtype)
    ones = torch.ones_like(coords[..., :1])
    q = torch.cat([coords, ones], dim=-1) @ H.T
    w = q[..., 2]
    ok = w > w_eps
    w_safe = torch.where(ok, w, torch.ones_like(w))
    xy = q[..., :2] / w_safe[..., None]
    xy = torch.where(ok[..., None], xy, torch.full_like(xy, -1.0))
    return xy, ok


def homography_warp(img: torch.Tensor, H, out_size: tuple[int, int]) -> SampledMap:
    """Backward warp: output pixel p samples ``img`` at dehomogenize(H p)."""
    h, w = out_size
    grid = torch.as_tensor(pixel_grid(w, h), dtype=img.dtype)
    xy, ok = apply_homography(H, grid)
    s = bilinear_sample(img, xy)
    mask = s.mask & ok
    return SampledMap(s.values * mask.to(img.dtype), mask)


def depth_to_source_coords(depth: torch.Tensor, tgt_cam: Camera, src_cam: Camera):
    """Project every target pixel, lifted with ``depth`` (..., H, W), into the source view.

    Returns:
        ``(xy, z, ok)``: source pixel coordinates (..., H, W, 2), source-frame
        depth and a flag for positive input and output depth. Invalid pixels
        get coordinate (-1, -1).
    """
    dtype = depth.dtype
    H, W = depth.shape[-2:]
    R_rel, t_rel = relative_pose(src_cam, tgt_cam)
    K_inv = tgt_cam.intrinsics.K_inv
    rays = pixel_grid(W, H) @ K_inv[:2, :2].T + K_inv[:2, 2]
    rays = np.concatenate([rays, np.ones((H, W, 1))], axis=-1)
    # A = K_s R_rel K_t^-1 applied to the rays, b = K_s t_rel
    Ks = src_cam.K
    a = torch.as_tensor(rays @ (Ks @ R_rel).T, dtype=dtype)
    b = torch.as_tensor(Ks @ t_rel, dtype=dtype)
    q = a * depth[..., None] + b
    z = q[..., 2]
    ok = (depth > 0) & (z > 0)
    z_safe = torch.where(ok, z, torch.ones_like(z))
    xy = q[..., :2] / z_safe[..., None]
    xy = torch.where(ok[..., None], xy, torch.full_like(xy, -1.0))
    return xy, z, ok


def depth_warp(src_map: torch.Tensor, depth_tgt: torch.Tensor, tgt_cam: Camera, src_cam: Camera) -> DepthWarpResult:
    """Sample a source-view map at the reprojection of each target pixel.

    Nonpositive target depths are marked invisible rather than raising.
    Gradients flow to both ``src_map`` and ``depth_tgt``.
    """
    xy, z, ok = depth_to_source_coords(depth_tgt, tgt_cam, src_cam)
    s = bilinear_sample(src_map, xy)
    visible = s.mask & ok
    values = s.values * visible.to(src_map.dtype)
    return DepthWarpResult(SampledMap(values, visible), z, visible)


def forward_splat(prev_map: torch.Tensor, depth_prev, prev_cam: Camera, cur_cam: Camera) -> SampledMap:
    """Z-buffered nearest-pixel splatting of ``prev_map`` into the current view.

    Conflicts resolve to the smaller current-frame depth, then to the earlier
    source pixel in raster order, so the result never depends on scheduling.
    Not differentiable.
    """
    C = prev_map.shape[0]
    src = prev_map.detach()
    D = np.asarray(torch.as_tensor(depth_prev).detach().cpu(), dtype=np.float64)
    h, w = D.shape
    out = torch.zeros((C, cur_cam.height, cur_cam.width), dtype=src.dtype)
    mask = torch.zeros((cur_cam.height, cur_cam.width), dtype=torch.bool)

    flat_src = np.flatnonzero(D.reshape(-1) > 0)
    if flat_src.size == 0:
        return SampledMap(out, mask)
    uv = pixel_grid(w, h).reshape(-1, 2)[flat_src]
    X = backproject(prev_cam, uv, D.reshape(-1)[flat_src])
    uv_c, z, front = project(cur_cam, X)
    ui = np.floor(uv_c[:, 0] + 0.5)
    vi = np.floor(uv_c[:, 1] + 0.5)
    inb = front & (ui >= 0) & (ui < cur_cam.width) & (vi >= 0) & (vi < cur_cam.height)
    flat_src, z = flat_src[inb], z[inb]
    tgt = (vi[inb] * cur_cam.width + ui[inb]).astype(np.int64)
    order = np.lexsort((flat_src, z, tgt))
    tgt_sorted = tgt[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    winners = order[first]

    ti = torch.as_tensor(tgt[winners])
    si = torch.as_tensor(flat_src[winners])
    out.view(C, -1)[:, ti] = src.reshape(C, -1)[:, si]
    mask.view(-1)[ti] = True
    return SampledMap(out, mask)
