"""Depth-map fusion into a point cloud and point-cloud evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .camera import Camera, backproject, pixel_grid, project
from .errors import ConfigError
from .warp import bilinear_sample

TAU_P = 0.3
TAU_PX = 1.0
TAU_REL = 0.01
MIN_CONSISTENT = 3
# Depth lookups whose four neighbors differ by more than this ratio straddle a discontinuity.
MAX_NEIGHBOR_SPREAD = 0.05


@dataclass
class FusionRecord:
    """One view entering fusion: color, depth in scene units, camera and confidence."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W); 0 marks missing depth
    cam: Camera
    confidence: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        shape = (self.cam.height, self.cam.width)
        if self.depth.shape != shape or self.confidence.shape != shape or self.image.shape[:2] != shape:
            raise ConfigError(f"fusion record arrays must all be {shape}")


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ConfigError("points and colors differ in length")
        if not np.isfinite(self.points).all():
            raise ConfigError("point cloud has non-finite coordinates")

    def __len__(self):
        return len(self.points)


def select_views(target: Camera, cams: list[Camera], n: int, self_tol: float = 1e-9, at_most: bool = False) -> list[int]:
    """The ``n`` cameras closest to the target center; a camera at the target center is skipped.

    Ties are broken by index. With ``at_most`` fewer than ``n`` views are
    returned when fewer are available instead of raising.
    """
    centers = np.stack([c.center for c in cams])
    dist = np.linalg.norm(centers - target.center, axis=1)
    idx = np.arange(len(cams))
    keep = dist > self_tol
    if at_most:
        n = min(n, int(keep.sum()))
    if n > int(keep.sum()):
        raise ConfigError(f"asked for {n} views but only {int(keep.sum())} are available")
    order = np.lexsort((idx[keep], dist[keep]))
    return [int(i) for i in idx[keep][order[:n]]]


def predict_reference_depths(
    images,
    cams: list[Camera],
    d_min: float,
    d_max: float,
    n_sources: int,
    params: dict | None = None,
    backend: str = "photometric",
    M1: int = 48,
    K: int = 3,
    C: float = 100.0,
    delta1: float | None = None,
) -> list[FusionRecord]:
    """Depth of every rig view, regressed from its nearest other views.

    View n is the target and never one of its own sources, so its image is
    never an input. ``n_sources`` is capped at the number of other views.

    Args:
        images: per-view (3, H, W) tensors in [0, 1].
        cams: rig cameras in scene units.
        d_min: nearest scene depth.
        d_max: farthest scene depth.
        n_sources: neighbors used per view.
        params: regularizer parameters for the learned backend.
        backend: "photometric" or "learned".
        M1: first-stage plane count.
        K: number of cascade stages.
        C: scaled minimum depth.
        delta1: first-stage interval in scaled units (derived when None).

    Returns:
        One :class:`FusionRecord` per view with depth in scene units and the
        final-stage peak probability as confidence.
    """
    from .pipeline import predict_depth

    n = min(n_sources, len(cams) - 1)
    records = []
    for i, cam in enumerate(cams):
        idx = select_views(cam, cams, n)
        if i in idx:
            raise ConfigError(f"view {i} was selected as its own source")
        with torch.no_grad():
            dp = predict_depth([images[j] for j in idx], [cams[j] for j in idx], cam, d_min, d_max, params, backend, M1, K, C, delta1)
        image = images[i].detach().numpy().transpose(1, 2, 0).astype(np.float64)
        records.append(FusionRecord(image, dp.depth.numpy().astype(np.float64), cam, dp.result.confidence.numpy().astype(np.float64)))
    return records


def photometric_filter(confidences, tau_p: float = TAU_P) -> list[np.ndarray]:
    """Keep pixels whose peak probability is at least ``tau_p``."""
    return [np.asarray(c) >= tau_p for c in confidences]


def _sample_depth(depth: np.ndarray, uv: np.ndarray, max_spread: float = MAX_NEIGHBOR_SPREAD) -> tuple[np.ndarray, np.ndarray]:
    """Depth lookup by bilinear interpolation of inverse depth.

    Inverse depth is affine in pixel coordinates on a plane, so the lookup
    is exact on planar surfaces. A sample is valid only if its four
    neighbors all have depth and their largest-to-smallest ratio is at most
    ``1 + max_spread``; a lookup across a depth discontinuity would blend
    two surfaces.
    """
    d = torch.as_tensor(depth, dtype=torch.float64)[None]
    coords = torch.as_tensor(np.nan_to_num(uv, nan=-1.0), dtype=torch.float64)
    pos = d > 0
    inv = torch.where(pos, 1.0 / torch.where(pos, d, torch.ones_like(d)), torch.zeros_like(d))
    s = bilinear_sample(inv, coords)
    have = bilinear_sample(pos.to(torch.float64), coords)
    # neighbor extremes: max pooling of d and of -d over 2x2 blocks
    hi = torch.nn.functional.max_pool2d(torch.where(pos, d, torch.zeros_like(d)), 2, stride=1, padding=1)
    lo = -torch.nn.functional.max_pool2d(torch.where(pos, -d, torch.full_like(d, -np.inf)), 2, stride=1, padding=1)
    # pooled pixel (y, x) covers source pixels y-1..y, x-1..x; the sample's block starts at floor(coords)
    H, W = depth.shape
    xs = np.clip(np.floor(np.nan_to_num(uv[..., 0], nan=-1.0)).astype(np.int64) + 1, 0, W)
    ys = np.clip(np.floor(np.nan_to_num(uv[..., 1], nan=-1.0)).astype(np.int64) + 1, 0, H)
    spread = (hi[0].numpy()[ys, xs] / np.maximum(lo[0].numpy()[ys, xs], 1e-300))
    ok = s.mask.numpy() & (have.values[0].numpy() > 1 - 1e-12) & (s.values[0].numpy() > 0) & (spread <= 1 + max_spread)
    vals = np.where(ok, 1.0 / np.where(ok, s.values[0].numpy(), 1.0), 0.0)
    return vals, ok


@dataclass
class GeometricCheck:
    masks: list[np.ndarray]
    consistent: list[list[np.ndarray]]  # per view: per other view, depth in this view's frame (NaN if not consistent)


def geometric_filter(records: list[FusionRecord], masks=None, tau_px: float = TAU_PX, tau_rel: float = TAU_REL, min_views: int = MIN_CONSISTENT) -> GeometricCheck:
    """Multi-view depth consistency.

    A pixel p of view i (with depth d) is lifted to 3-D and projected into
    every other view j. View j's depth at that location is lifted and
    projected back into view i. View j agrees when the reprojected pixel is
    within ``tau_px`` of p and its depth within ``tau_rel`` relative of d.
    A pixel is kept if it passes the input mask and at least ``min_views``
    views agree.
    """
    n = len(records)
    if masks is None:
        masks = [np.ones(r.depth.shape, dtype=bool) for r in records]
    out_masks, consistent = [], []
    for i, ri in enumerate(records):
        H, W = ri.depth.shape
        uv = pixel_grid(W, H).reshape(-1, 2)
        d = ri.depth.reshape(-1).astype(np.float64)
        base = masks[i].reshape(-1) & (d > 0)
        X = np.full((H * W, 3), np.nan)
        if base.any():
            X[base] = backproject(ri.cam, uv[base], d[base])
        count = np.zeros(H * W, dtype=int)
        per_view = []
        for j, rj in enumerate(records):
            if j == i:
                continue
            zc = np.full(H * W, np.nan)
            uv_j, z_j, front = project(rj.cam, np.where(base[:, None], X, 0.0))
            front &= base
            dj, ok = _sample_depth(rj.depth, np.where(front[:, None], uv_j, -1.0))
            ok &= front
            if ok.any():
                Xj = backproject(rj.cam, uv_j[ok], dj[ok])
                uv_back, z_back, fr = project(ri.cam, Xj)
                err_px = np.linalg.norm(uv_back - uv[ok], axis=1)
                err_rel = np.abs(z_back - d[ok]) / d[ok]
                good = fr & (err_px < tau_px) & (err_rel < tau_rel)
                sel = np.flatnonzero(ok)[good]
                zc[sel] = z_back[good]
                count[sel] += 1
            per_view.append(zc.reshape(H, W))
        out_masks.append((base & (count >= min_views)).reshape(H, W))
        consistent.append(per_view)
    if n < 2:
        out_masks = [np.zeros(r.depth.shape, dtype=bool) for r in records]
    return GeometricCheck(out_masks, consistent)


def median_fuse(records: list[FusionRecord], check: GeometricCheck) -> list[np.ndarray]:
    """Replace each kept depth by the median of itself and its consistent reprojections; others become 0."""
    out = []
    for r, mask, cons in zip(records, check.masks, check.consistent):
        stack = np.stack([r.depth.astype(np.float64)] + list(cons))
        fused = np.zeros(r.depth.shape)
        if mask.any():
            fused[mask] = np.nanmedian(stack[:, mask], axis=0)
        out.append(fused)
    return out


def build_pointcloud(records: list[FusionRecord], depths, masks=None) -> PointCloud:
    """Back-project every kept pixel into world coordinates and attach its color."""
    pts, cols = [], []
    for i, r in enumerate(records):
        d = np.asarray(depths[i], dtype=np.float64)
        keep = d > 0 if masks is None else (np.asarray(masks[i]) & (d > 0))
        H, W = d.shape
        uv = pixel_grid(W, H)[keep]
        if len(uv):
            pts.append(backproject(r.cam, uv, d[keep]))
            cols.append(np.asarray(r.image)[keep])
    if not pts:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return PointCloud(np.concatenate(pts), np.concatenate(cols))


def fuse_records(records: list[FusionRecord], tau_p: float = TAU_P, tau_px: float = TAU_PX, tau_rel: float = TAU_REL, min_views: int = MIN_CONSISTENT) -> PointCloud:
    """Photometric filter, geometric filter, median fusion and back-projection."""
    masks = photometric_filter([r.confidence for r in records], tau_p)
    check = geometric_filter(records, masks, tau_px, tau_rel, min_views)
    fused = median_fuse(records, check)
    return build_pointcloud(records, fused, check.masks)


def cloud_diameter(points: np.ndarray) -> float:
    """Largest distance between two points.

    Only convex-hull vertices can realize it; flat clouds are hulled in
    their own plane (or line).
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    centered = pts - pts.mean(0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((sv > 1e-9 * sv[0]).sum()) if sv[0] > 0 else 0
    if rank == 0:
        return 0.0
    if rank == 1:
        proj = centered @ vt[0]
        return float(proj.max() - proj.min())
    try:
        hull = pts[ConvexHull(centered @ vt[:rank].T).vertices]
    except QhullError:
        hull = pts
    diff = hull[:, None, :] - hull[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


@dataclass
class CloudMetrics:
    accuracy: float
    completeness: float
    overall: float
    precision: float
    recall: float
    f_score: float
    tau: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "completeness": self.completeness,
            "overall": self.overall,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "tau_f": self.tau,
        }


def eval_pointcloud(pred: PointCloud, gt: PointCloud, tau: float) -> CloudMetrics:
    """Accuracy (pred to gt), completeness (gt to pred), their mean and the F-score at ``tau``."""
    if len(pred) == 0 or len(gt) == 0:
        raise ConfigError("point cloud evaluation needs two nonempty clouds")
    d_pred, _ = cKDTree(gt.points).query(pred.points)
    d_gt, _ = cKDTree(pred.points).query(gt.points)
    acc = float(d_pred.mean())
    comp = float(d_gt.mean())
    p = float((d_pred < tau).mean())
    r = float((d_gt < tau).mean())
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return CloudMetrics(acc, comp, 0.5 * (acc + comp), p, r, f, float(tau))
