"""Inverse-depth blending of source features warped into the target view."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .camera import Camera
from .errors import ConfigError
from .warp import depth_warp


@dataclass
class FusedFeature:
    W: torch.Tensor  # (C, H, W); zero where not covered
    coverage: torch.Tensor  # (H, W) bool, at least one visible view
    alpha: torch.Tensor  # (N, H, W) blending weights


def blend_weights(z: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
    """Per-pixel weights proportional to 1/z over visible views, zero elsewhere.

    Args:
        z: (N, H, W) source-frame depths of the target pixels.
        visible: (N, H, W) visibility flags.
    """
    inv = torch.where(visible, 1.0 / torch.where(visible, z, torch.ones_like(z)), torch.zeros_like(z))
    total = inv.sum(0, keepdim=True)
    return torch.where(total > 0, inv / torch.where(total > 0, total, torch.ones_like(total)), torch.zeros_like(inv))


def fuse_features(features, depth: torch.Tensor, tgt_cam: Camera, src_cams: list[Camera]) -> FusedFeature:
    """Warp each view's feature map with the target depth and blend with inverse-z weights.

    Args:
        features: per-view (C, h, w) maps at the same stage resolution.
        depth: (H, W) target depth in the units of the cameras' translations.
        tgt_cam: target camera at the depth map's resolution.
        src_cams: source cameras at the feature maps' resolution.

    A view is visible at a pixel when the reprojection lands inside the
    source image with positive depth; occlusion is not tested.
    """
    if len(features) == 0 or len(features) != len(src_cams):
        raise ConfigError(f"need one camera per feature map, got {len(features)} maps and {len(src_cams)} cameras")
    if tuple(depth.shape) != (tgt_cam.height, tgt_cam.width):
        raise ConfigError(f"depth map {tuple(depth.shape)} does not match the target camera {(tgt_cam.height, tgt_cam.width)}")
    warped, zs, vis = [], [], []
    for feat, cam in zip(features, src_cams):
        r = depth_warp(feat, depth, tgt_cam, cam)
        warped.append(r.sampled.values)
        zs.append(r.z)
        vis.append(r.visible)
    z = torch.stack(zs)
    visible = torch.stack(vis)
    alpha = blend_weights(z, visible)
    W = (alpha[:, None] * torch.stack(warped)).sum(0)
    coverage = visible.any(0)
    W = W * coverage.to(W.dtype)
    return FusedFeature(W, coverage, alpha)
