"""Depth hypotheses: adaptive depth scaling, plane sets and the cascade schedule."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

DEFAULT_C = 100.0
DEFAULT_M1 = 48


@dataclass(frozen=True)
class DepthScaling:
    d_min: float
    d_max: float
    C: float = DEFAULT_C

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ConfigError(f"need 0 < d_min < d_max, got d_min={self.d_min}, d_max={self.d_max}")
        if not self.C > 0:
            raise ConfigError(f"scale constant C must be positive, got {self.C}")

    @property
    def f(self) -> float:
        return self.C / self.d_min

    @property
    def scaled_min(self) -> float:
        """The scaled minimum depth is C by definition.

        ``f * d_min`` can miss C by one ulp in floating point, so the
        definition is returned rather than the product.
        """
        return self.C

    @property
    def scaled_max(self) -> float:
        return self.f * self.d_max

    @property
    def floor(self) -> float:
        """Lower clamp for resampled planes."""
        return 1e-3 * self.C


@dataclass(frozen=True)
class CascadeSchedule:
    M: tuple[int, ...]
    delta: tuple[float, ...]
    res_divisors: tuple[int, ...]  # per image side

    @property
    def K(self) -> int:
        return len(self.M)

    @property
    def resolutions(self) -> tuple[str, ...]:
        """Pixel-count fraction of each stage relative to the input image."""
        return tuple(f"1/{s * s}" if s > 1 else "1" for s in self.res_divisors)

    def as_dict(self) -> dict:
        return {
            "K": self.K,
            "M": list(self.M),
            "delta": list(self.delta),
            "res_divisors": list(self.res_divisors),
            "resolutions": list(self.resolutions),
        }


@dataclass
class PlaneSet:
    """Depth hypotheses for one cascade stage.

    Stage 1 holds a uniform list of depths; later stages hold a per-pixel
    minimum map and the plane spacing.
    """

    stage: int
    uniform: torch.Tensor | None = None  # (M,)
    d_min_map: torch.Tensor | None = None  # (H, W)
    delta: float | None = None
    M: int | None = None
    floor: float = 0.0

    @property
    def count(self) -> int:
        return len(self.uniform) if self.uniform is not None else self.M

    @property
    def is_uniform(self) -> bool:
        return self.uniform is not None

    def depths(self, height: int | None = None, width: int | None = None) -> torch.Tensor:
        """Plane depths as an (M, H, W) tensor."""
        if self.uniform is not None:
            if height is None:
                raise ValueError("uniform planes need an output size")
            return self.uniform[:, None, None].expand(-1, height, width)
        i = torch.arange(1, self.M + 1, dtype=self.d_min_map.dtype)
        d = self.d_min_map[None] + i[:, None, None] * self.delta
        return d.clamp(min=self.floor)


def adaptive_scale(d_min: float, d_max: float, C: float = DEFAULT_C, M1: int = DEFAULT_M1) -> tuple[DepthScaling, float]:
    """Scale a scene so its minimum depth becomes ``C``; returns the scaling and Δ1."""
    if M1 < 2:
        raise ConfigError(f"M1 must be at least 2, got {M1}")
    scaling = DepthScaling(float(d_min), float(d_max), float(C))
    delta1 = (scaling.scaled_max - scaling.C) / M1
    return scaling, delta1


def initial_planes(d1_min: float, delta1: float, M1: int, dtype=torch.float64) -> PlaneSet:
    """Uniform first-stage planes d_i = d1_min + i * delta1, i = 1..M1."""
    if not delta1 > 0:
        raise ConfigError(f"plane interval must be positive, got {delta1}")
    if M1 < 2:
        raise ConfigError(f"M1 must be at least 2, got {M1}")
    i = torch.arange(1, M1 + 1, dtype=dtype)
    return PlaneSet(stage=1, uniform=d1_min + i * delta1)


def resample_planes(depth_prev: torch.Tensor, M_k: int, delta_k: float, floor: float = 1e-3 * DEFAULT_C, stage: int = 2) -> PlaneSet:
    """Per-pixel planes centered on the previous estimate.

    d_min(p) = D_prev(p) - M_k * delta_k / 2 and d_i(p) = d_min(p) + i * delta_k.
    """
    if M_k < 2 or not delta_k > 0:
        raise ConfigError(f"need M_k >= 2 and delta_k > 0, got {M_k}, {delta_k}")
    return PlaneSet(
        stage=stage,
        d_min_map=depth_prev - M_k * delta_k / 2.0,
        delta=float(delta_k),
        M=int(M_k),
        floor=float(floor),
    )


def cascade_schedule(M1: int, delta1: float, K: int, side_step: int = 2) -> CascadeSchedule:
    """Plane counts, intervals and resolutions of a K-stage cascade.

    Each stage halves the plane count and the interval. Image sides grow by
    ``side_step`` per stage, so with the default the stage images hold
    1/16, 1/4 and 1 of the input pixels for K = 3.
    """
    if K < 1:
        raise ConfigError(f"K must be at least 1, got {K}")
    if M1 % (2 ** (K - 1)):
        raise ConfigError(f"M1={M1} is not divisible by 2^(K-1)={2 ** (K - 1)}")
    if M1 >> (K - 1) < 2:
        raise ConfigError(f"last stage would have fewer than 2 planes (M1={M1}, K={K})")
    M = tuple(M1 >> k for k in range(K))
    delta = tuple(delta1 / 2**k for k in range(K))
    if side_step < 1:
        raise ConfigError(f"side_step must be a positive integer, got {side_step}")
    res = tuple(side_step ** (K - 1 - k) for k in range(K))
    return CascadeSchedule(M, delta, res)


def upsample_depth(depth: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear upsampling consistent with the pixel convention.

    Fine pixel x reads coarse coordinate x / factor; positions past the last
    coarse sample are clamped to the border.
    """
    if factor == 1:
        return depth
    h, w = depth.shape
    H, W = h * factor, w * factor
    ys = (torch.arange(H, dtype=depth.dtype) / factor).clamp(max=h - 1)
    xs = (torch.arange(W, dtype=depth.dtype) / factor).clamp(max=w - 1)
    y0 = ys.floor().long().clamp(max=max(h - 2, 0))
    x0 = xs.floor().long().clamp(max=max(w - 2, 0))
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    wy = (ys - y0.to(depth.dtype))[:, None]
    wx = (xs - x0.to(depth.dtype))[None, :]
    d00 = depth[y0][:, x0]
    d01 = depth[y0][:, x1]
    d10 = depth[y1][:, x0]
    d11 = depth[y1][:, x1]
    return (1 - wy) * ((1 - wx) * d00 + wx * d01) + wy * ((1 - wx) * d10 + wx * d11)


def downsample(img: torch.Tensor, factor: int) -> torch.Tensor:
    """Gaussian-prefiltered decimation: output pixel j reads input pixel factor * j.

    ``img`` is (C, H, W). Sigma is factor / 2; borders replicate.
    """
    if factor == 1:
        return img
    sigma = factor / 2.0
    r = int(round(3 * sigma))
    x = torch.arange(-r, r + 1, dtype=img.dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    k = k / k.sum()
    C = img.shape[0]
    t = img[:, None]
    t = F.pad(t, (r, r, 0, 0), mode="replicate")
    t = F.conv2d(t, k.view(1, 1, 1, -1))
    t = F.pad(t, (0, 0, r, r), mode="replicate")
    t = F.conv2d(t, k.view(1, 1, -1, 1))
    return t[:, 0, ::factor, ::factor].reshape(C, img.shape[1] // factor, img.shape[2] // factor)
