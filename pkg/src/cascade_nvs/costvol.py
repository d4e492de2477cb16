"""Plane-sweep volumes, probability volumes and cascaded depth regression."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .camera import Camera, plane_homography, scale_camera
from .errors import ConfigError
from .planes import (
    CascadeSchedule,
    DepthScaling,
    PlaneSet,
    downsample,
    initial_planes,
    resample_planes,
    upsample_depth,
)
from .warp import bilinear_sample, depth_to_source_coords, homography_warp

# Photometric backend settings per stage, coarse to fine: softmax
# temperature, matching-window radius and how far the window may slide.
DEFAULT_BETA = (3e5, 1e6, 3e6)
DEFAULT_RADIUS = (2, 2, 2)
DEFAULT_SHIFT = (1, 1, 1)


@dataclass
class PSV:
    volume: torch.Tensor  # (C, M, H, W)
    valid: torch.Tensor  # (M, H, W) bool


@dataclass
class MeanPSV:
    volume: torch.Tensor


@dataclass
class ProbabilityVolume:
    V: torch.Tensor  # (M, H, W)

    @property
    def confidence(self) -> torch.Tensor:
        return self.V.max(dim=0).values


def build_psv(feature: torch.Tensor, src_cam: Camera, tgt_cam: Camera, planes: PlaneSet, out_size: tuple[int, int]) -> PSV:
    """Warp a source feature map onto every depth hypothesis of the target view.

    Uniform planes use plane homographies; per-pixel planes use depth warps
    with the per-pixel plane depth.
    """
    h, w = out_size
    if planes.is_uniform:
        slices, masks = [], []
        for d in planes.uniform.tolist():
            s = homography_warp(feature, plane_homography(src_cam, tgt_cam, d), (h, w))
            slices.append(s.values)
            masks.append(s.mask)
        return PSV(torch.stack(slices, dim=1), torch.stack(masks))
    depths = planes.depths().to(feature.dtype)
    xy, _, ok = depth_to_source_coords(depths, tgt_cam, src_cam)
    s = bilinear_sample(feature, xy)
    valid = s.mask & ok
    return PSV(s.values * valid.to(feature.dtype), valid)


def mean_psv(psvs: list[PSV]) -> MeanPSV:
    """Entrywise mean over views; invalid entries count as zeros."""
    if not psvs:
        raise ConfigError("mean_psv needs at least one volume")
    total = psvs[0].volume
    for p in psvs[1:]:
        if p.volume.shape != total.shape:
            raise ConfigError(f"PSV shape mismatch: {tuple(p.volume.shape)} vs {tuple(total.shape)}")
        total = total + p.volume
    return MeanPSV(total / len(psvs))


def _variance_cost(volumes, valids) -> torch.Tensor:
    """Per-entry cross-view variance; under-observed entries take the pixel's worst cost."""
    vals = torch.stack([v.reshape(v.shape[-3:]) for v in volumes])
    m = torch.stack(list(valids)).to(vals.dtype)
    n = m.sum(0)
    n_safe = n.clamp(min=1)
    mean = (vals * m).sum(0) / n_safe
    var = (((vals - mean) ** 2) * m).sum(0) / n_safe
    observed = n >= 2
    worst = torch.where(observed, var, torch.zeros_like(var)).max(dim=0, keepdim=True).values
    cost = torch.where(observed, var, worst.expand_as(var))
    any_obs = observed.any(dim=0, keepdim=True)
    return torch.where(any_obs, cost, torch.zeros_like(cost))


def cost_to_prob_photometric(volumes, valids, beta: float, radius: int = 0) -> ProbabilityVolume:
    """Softmax over planes of the negative cross-view intensity variance.

    Args:
        volumes: per-view grayscale PSVs, each (M, H, W) or (1, M, H, W).
        valids: matching (M, H, W) validity masks.
        beta: softmax temperature.
        radius: the variance is box-averaged over a (2r+1)^2 window per plane
            before the softmax; 0 keeps the per-pixel cost. This is only a
            fronto-parallel window when all pixels share the plane depths; see
            :func:`window_cost` for per-pixel planes.

    Entries seen by fewer than two views take the worst cost observed at
    that pixel; pixels without any such entry get a uniform distribution.
    """
    cost = _variance_cost(volumes, valids)
    if radius > 0:
        k = 2 * radius + 1
        cost = F.avg_pool2d(cost[None], k, stride=1, padding=radius, count_include_pad=False)[0]
    return ProbabilityVolume(torch.softmax(-beta * cost, dim=0))


def _shift(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """out[..., y, x] = x[..., y - dy, x - dx], edge-replicated."""
    H, W = x.shape[-2:]
    ys = (torch.arange(H) - dy).clamp(0, H - 1)
    xs = (torch.arange(W) - dx).clamp(0, W - 1)
    return x[..., ys, :][..., xs]


def window_cost(features, src_cams, tgt_cam: Camera, planes: PlaneSet, radius: int, shift: int = 0) -> torch.Tensor:
    """Variance cost aggregated over fronto-parallel windows.

    The cost of pixel p at hypothesis i averages the cross-view variance of
    the window pixels q, each lifted to p's hypothesis depth d_i(p). With
    ``shift`` > 0 the window may slide up to that many pixels away from p and
    the smallest window cost wins, which keeps windows from straddling depth
    discontinuities.

    Returns:
        (M, H, W) cost volume.
    """
    h, w = tgt_cam.height, tgt_cam.width
    reach = radius + shift
    D = planes.depths(h, w)
    if planes.is_uniform:
        psvs = [build_psv(f, c, tgt_cam, planes, (h, w)) for f, c in zip(features, src_cams)]
        base = _variance_cost([p.volume for p in psvs], [p.valid for p in psvs])
    ys = torch.arange(h)[:, None]
    xs = torch.arange(w)[None, :]
    n = 2 * reach + 1
    costs = torch.zeros((n, n) + tuple(D.shape), dtype=D.dtype)
    inside = torch.zeros((n, n, h, w), dtype=D.dtype)
    for a, dy in enumerate(range(-reach, reach + 1)):
        for b, dx in enumerate(range(-reach, reach + 1)):
            if planes.is_uniform:
                cq = base
            else:
                # pixel q = p + (dy, dx) is lifted with p's plane depths
                Dq = _shift(D, dy, dx)
                lifted = PlaneSet(stage=planes.stage, d_min_map=Dq[0] - planes.delta, delta=planes.delta, M=planes.M, floor=planes.floor)
                psvs = [build_psv(f, c, tgt_cam, lifted, (h, w)) for f, c in zip(features, src_cams)]
                cq = _variance_cost([p.volume for p in psvs], [p.valid for p in psvs])
            ok = ((ys + dy >= 0) & (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)).to(D.dtype)
            costs[a, b] = _shift(cq, -dy, -dx) * ok
            inside[a, b] = ok
    # box sums over the offset axes give one window cost per shift
    k = 2 * radius + 1
    M = D.shape[0]
    c = costs.permute(2, 3, 4, 0, 1).reshape(M * h * w, 1, n, n)
    m = inside.permute(2, 3, 0, 1).reshape(h * w, 1, n, n)
    csum = F.avg_pool2d(c, k, stride=1).reshape(M, h, w, -1)
    msum = F.avg_pool2d(m, k, stride=1).reshape(1, h, w, -1)
    return (csum / msum.clamp(min=1e-12)).min(dim=-1).values


REGULARIZER_CHANNELS = (8, 8)


def init_regularizer(in_channels: int, generator: torch.Generator, dtype=torch.float32, prefix: str = "reg") -> dict[str, torch.Tensor]:
    """Three 3x3x3 convolutions in -> 8 -> 8 -> 1; the last layer starts at zero.

    The last layer has no bias: a constant added to every plane's score
    cancels in the softmax.
    """
    from .learn import fan_in_uniform

    params = {}
    chans = (in_channels, *REGULARIZER_CHANNELS, 1)
    for i in range(3):
        cin, cout = chans[i], chans[i + 1]
        if i == 2:
            params[f"{prefix}.{i}.weight"] = torch.zeros(cout, cin, 3, 3, 3, dtype=dtype)
        else:
            params[f"{prefix}.{i}.weight"] = fan_in_uniform((cout, cin, 3, 3, 3), generator, dtype)
            params[f"{prefix}.{i}.bias"] = torch.zeros(cout, dtype=dtype)
    return params


def cost_to_prob_learned(volume: MeanPSV | torch.Tensor, params: dict, prefix: str = "reg") -> ProbabilityVolume:
    """Small 3-D convolutional regularizer followed by a softmax over planes."""
    x = volume.volume if isinstance(volume, MeanPSV) else volume
    w0 = params[f"{prefix}.0.weight"]
    if x.shape[0] != w0.shape[1]:
        raise ConfigError(f"regularizer expects {w0.shape[1]} channels, got {x.shape[0]}")
    x = x[None]
    for i in range(3):
        x = F.conv3d(x, params[f"{prefix}.{i}.weight"], params.get(f"{prefix}.{i}.bias") if i < 2 else None, padding=1)
        if i < 2:
            x = F.silu(x)
    return ProbabilityVolume(torch.softmax(x[0, 0], dim=0))


def soft_argmax(V: ProbabilityVolume | torch.Tensor, planes: PlaneSet) -> torch.Tensor:
    """Expected plane depth per pixel."""
    V = V.V if isinstance(V, ProbabilityVolume) else V
    M, h, w = V.shape
    d = planes.depths(h, w).to(V.dtype)
    return (V * d).sum(0)


@dataclass
class CascadeResult:
    depth: torch.Tensor  # final stage, scaled units
    stage_depths: list[torch.Tensor]
    volumes: list[ProbabilityVolume]
    planes: list[PlaneSet]
    psvs: list[list[PSV]]
    f: float
    stage_cams: list[Camera] = field(default_factory=list)

    @property
    def confidence(self) -> torch.Tensor:
        return self.volumes[-1].confidence

    def unscaled(self) -> torch.Tensor:
        return self.depth / self.f


def gray(img: torch.Tensor) -> torch.Tensor:
    """(3, H, W) RGB to (1, H, W) luma."""
    w = torch.tensor([0.299, 0.587, 0.114], dtype=img.dtype)
    return (img * w[:, None, None]).sum(0, keepdim=True)


def photometric_pyramid(image: torch.Tensor, schedule: CascadeSchedule) -> list[torch.Tensor]:
    g = gray(image)
    return [downsample(g, s) for s in schedule.res_divisors]


def regress_depth_cascade(
    images,
    cams: list[Camera],
    tgt_cam: Camera,
    schedule: CascadeSchedule,
    scaling: DepthScaling,
    backend: str = "photometric",
    params: dict | None = None,
    features=None,
    beta=DEFAULT_BETA,
    radius=DEFAULT_RADIUS,
    shift=DEFAULT_SHIFT,
    keep_psvs: bool = False,
) -> CascadeResult:
    """Coarse-to-fine depth regression for the target camera.

    Args:
        images: per-view (3, H, W) images in [0, 1]; used by the photometric
            backend (may be None when ``features`` are given).
        cams: source cameras in scene units.
        tgt_cam: target camera in scene units.
        schedule: plane counts, intervals and resolution divisors per stage.
        scaling: depth range and scaling factor f.
        backend: "photometric" or "learned".
        params: regularizer parameters for the learned backend, keyed
            ``reg{k}.*`` per stage.
        features: per-view pyramids (one map per stage, coarse first).
        beta: photometric softmax temperature per stage.
        radius: photometric matching-window radius per stage.
        shift: how far the photometric window may slide per stage.
        keep_psvs: keep the per-stage PSVs in the result.

    Returns:
        A :class:`CascadeResult` with depths in scaled units.
    """
    if not cams:
        raise ConfigError("depth regression needs at least one source view")
    if backend not in ("photometric", "learned"):
        raise ConfigError(f"unknown backend {backend!r}")
    if isinstance(beta, (int, float)):
        beta = (float(beta),) * schedule.K
    if isinstance(radius, int):
        radius = (radius,) * schedule.K
    if isinstance(shift, int):
        shift = (shift,) * schedule.K
    if min(len(beta), len(radius), len(shift)) < schedule.K:
        raise ConfigError(f"need one beta, radius and shift per stage for K={schedule.K}")
    f = scaling.f
    if features is None:
        if backend == "learned":
            raise ConfigError("learned backend requires feature pyramids")
        features = [photometric_pyramid(img, schedule) for img in images]
    dtype = features[0][0].dtype

    src_scaled = [c.with_translation_scaled(f) for c in cams]
    tgt_scaled = tgt_cam.with_translation_scaled(f)
    delta1 = schedule.delta[0]

    stage_depths, volumes, plane_sets, all_psvs, stage_cams = [], [], [], [], []
    depth = None
    for k in range(schedule.K):
        s = schedule.res_divisors[k]
        tcam = scale_camera(tgt_scaled, s)
        h, w = tcam.height, tcam.width
        if k == 0:
            planes = initial_planes(scaling.C, delta1, schedule.M[0], dtype=dtype)
        else:
            up = upsample_depth(depth, schedule.res_divisors[k - 1] // s)
            planes = resample_planes(up, schedule.M[k], schedule.delta[k], floor=scaling.floor, stage=k + 1)
        stage_src = [scale_camera(c, s) for c in src_scaled]
        level = [feat[k] for feat in features]
        psvs = []
        if backend == "learned" or keep_psvs:
            psvs = [build_psv(f_, c, tcam, planes, (h, w)) for f_, c in zip(level, stage_src)]
        if backend == "photometric":
            cost = window_cost(level, stage_src, tcam, planes, radius[k], shift[k])
            V = ProbabilityVolume(torch.softmax(-beta[k] * cost, dim=0))
        else:
            V = cost_to_prob_learned(mean_psv(psvs), params, prefix=f"reg{k}")
        depth = soft_argmax(V, planes)
        stage_depths.append(depth)
        volumes.append(V)
        plane_sets.append(planes)
        stage_cams.append(tcam)
        all_psvs.append(psvs if keep_psvs else [])
    return CascadeResult(depth, stage_depths, volumes, plane_sets, all_psvs, f, stage_cams)
