"""Feature extractor and the depth-conditioned recurrent refinement network.

Parameters live in flat ``dict[str, Tensor]`` maps so they can be saved as
named arrays, differentiated with plain autograd and updated functionally.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .camera import Camera, scale_camera
from .errors import ConfigError
from .learn import fan_in_uniform
from .warp import forward_splat

NORM_EPS = 1e-5


@dataclass(frozen=True)
class GeneratorConfig:
    """Channel plan of the desk-scale network.

    ``extractor`` lists channels from the finest pyramid level to the
    coarsest; each level halves the image side.
    """

    extractor: tuple[int, ...] = (16, 24, 32)
    encoder: tuple[int, int, int] = (24, 32, 48)
    hidden: int = 48
    spade_hidden: int = 16

    @property
    def K(self) -> int:
        return len(self.extractor)

    @property
    def bottleneck_divisor(self) -> int:
        return 8

    def required_multiple(self) -> int:
        return max(2 ** (self.K - 1), self.bottleneck_divisor)


DEFAULT_CONFIG = GeneratorConfig()


def _conv(params, name, x, stride=1, replicate=False):
    w = params[f"{name}.weight"]
    pad = w.shape[-1] // 2
    if replicate:
        x = F.pad(x, (pad,) * 4, mode="replicate")
        pad = 0
    return F.conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=pad)


def _add_conv(params, name, cin, cout, gen, dtype, k=3, zero=False, bias=0.0):
    if zero:
        params[f"{name}.weight"] = torch.zeros(cout, cin, k, k, dtype=dtype)
    else:
        params[f"{name}.weight"] = fan_in_uniform((cout, cin, k, k), gen, dtype)
    params[f"{name}.bias"] = torch.full((cout,), float(bias), dtype=dtype)


# --- feature extractor --------------------------------------------------------------


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # coarse to fine, matching cascade stage order

    def __getitem__(self, k):
        return self.levels[k]

    def __len__(self):
        return len(self.levels)


def init_extractor(gen: torch.Generator, config: GeneratorConfig = DEFAULT_CONFIG, dtype=torch.float32) -> dict:
    p = {}
    cin = 3
    for i, c in enumerate(config.extractor):
        _add_conv(p, f"ext.{i}.a", cin, c, gen, dtype)
        _add_conv(p, f"ext.{i}.b", c, c, gen, dtype)
        cin = c
    return p


def extract_features(image: torch.Tensor, params: dict, config: GeneratorConfig = DEFAULT_CONFIG) -> FeaturePyramid:
    """Strided convolution pyramid; level i has side 1/2^i of the input.

    Args:
        image: (3, H, W) in [0, 1].

    Returns:
        Levels ordered coarse to fine so level k feeds cascade stage k.
    """
    H, W = image.shape[-2:]
    m = 2 ** (config.K - 1)
    if H % m or W % m:
        raise ConfigError(f"image size {H}x{W} must be divisible by {m}")
    x = image[None]
    out = []
    for i in range(config.K):
        x = F.silu(_conv(params, f"ext.{i}.a", x, stride=1 if i == 0 else 2))
        x = _conv(params, f"ext.{i}.b", x)
        out.append(x[0])
        x = F.silu(x)
    return FeaturePyramid(out[::-1])


# --- building blocks ------------------------------------------------------------------


def init_spade(gen, channels: int, prefix: str, hidden: int = 16, dtype=torch.float32, identity: bool = False) -> dict:
    """Shared depth convolution, then separate gamma and beta convolutions.

    The gamma branch starts with bias 1 and the beta branch with bias 0. With
    ``identity`` both branch weights are zero, so the block reduces to
    normalization.
    """
    p = {}
    _add_conv(p, f"{prefix}.shared", 1, hidden, gen, dtype)
    if identity:
        _add_conv(p, f"{prefix}.gamma", hidden, channels, gen, dtype, zero=True, bias=1.0)
        _add_conv(p, f"{prefix}.beta", hidden, channels, gen, dtype, zero=True)
    else:
        _add_conv(p, f"{prefix}.gamma", hidden, channels, gen, dtype, bias=1.0)
        _add_conv(p, f"{prefix}.beta", hidden, channels, gen, dtype)
        p[f"{prefix}.gamma.weight"] = p[f"{prefix}.gamma.weight"] * 0.1
        p[f"{prefix}.beta.weight"] = p[f"{prefix}.beta.weight"] * 0.1
    return p


def instance_normalize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Zero mean, unit variance per channel over the spatial axes of (C, H, W)."""
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(-2, -1), keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def spade_block(x: torch.Tensor, depth: torch.Tensor, params: dict, prefix: str = "spade") -> torch.Tensor:
    """Normalize ``x`` (C, H, W) per channel and modulate it with maps computed from ``depth``.

    ``depth`` is a (h, w) map, already normalized to roughly [0, 1]; it is
    bilinearly resized to x's size. Output = gamma(depth) * x_hat + beta(depth).
    The modulation convolutions pad by edge replication, so a constant depth
    map gives constant gamma and beta.
    """
    h, w = x.shape[-2:]
    d = depth[None, None]
    if tuple(depth.shape) != (h, w):
        d = F.interpolate(d, size=(h, w), mode="bilinear", align_corners=False)
    a = F.silu(_conv(params, f"{prefix}.shared", d, replicate=True))
    gamma = _conv(params, f"{prefix}.gamma", a, replicate=True)[0]
    beta = _conv(params, f"{prefix}.beta", a, replicate=True)[0]
    return gamma * instance_normalize(x) + beta


def init_recurrent(gen, in_channels: int, hidden: int, prefix: str = "lstm", dtype=torch.float32) -> dict:
    p = {}
    _add_conv(p, f"{prefix}.gates", in_channels + hidden, 4 * hidden, gen, dtype)
    return p


def recurrent_cell(x: torch.Tensor, c_prev: torch.Tensor, h_warped: torch.Tensor, params: dict, prefix: str = "lstm"):
    """Convolutional LSTM step on (C, H, W) maps.

    Returns:
        ``(c, h)`` with c = f * c_prev + i * g and h = o * tanh(c).
    """
    if c_prev.shape != h_warped.shape or x.shape[-2:] != c_prev.shape[-2:]:
        raise ConfigError(f"recurrent shapes disagree: x {tuple(x.shape)}, c {tuple(c_prev.shape)}, h {tuple(h_warped.shape)}")
    z = _conv(params, f"{prefix}.gates", torch.cat([x, h_warped])[None])[0]
    zi, zf, zo, zg = torch.chunk(z, 4, dim=0)
    i = torch.sigmoid(zi)
    f = torch.sigmoid(zf)
    o = torch.sigmoid(zo)
    g = torch.tanh(zg)
    c = f * c_prev + i * g
    return c, o * torch.tanh(c)


# --- full generator -----------------------------------------------------------------


@dataclass
class RecurrentState:
    c: torch.Tensor | None = None
    h: torch.Tensor | None = None
    last_depth: torch.Tensor | None = None  # scene units, full resolution
    last_cam: Camera | None = None

    @property
    def empty(self) -> bool:
        return self.h is None


def init_generator(gen: torch.Generator, config: GeneratorConfig = DEFAULT_CONFIG, dtype=torch.float32) -> dict:
    """Extractor, encoder, recurrent cell, decoder and SPADE parameters."""
    p = init_extractor(gen, config, dtype)
    fine, mid, coarse = config.extractor[0], config.extractor[1], config.extractor[2]
    e0, e1, e2 = config.encoder
    _add_conv(p, "enc.0", fine, e0, gen, dtype)
    _add_conv(p, "enc.1.down", e0, e1, gen, dtype)
    _add_conv(p, "enc.1.mix", e1 + mid, e1, gen, dtype)
    _add_conv(p, "enc.2.down", e1, e2, gen, dtype)
    _add_conv(p, "enc.2.mix", e2 + coarse, e2, gen, dtype)
    _add_conv(p, "enc.3.down", e2, config.hidden, gen, dtype)
    p.update(init_recurrent(gen, config.hidden, config.hidden, "lstm", dtype))
    _add_conv(p, "dec.2", config.hidden + e2, e2, gen, dtype)
    _add_conv(p, "dec.1", e2 + e1, e1, gen, dtype)
    _add_conv(p, "dec.0", e1 + e0, e0, gen, dtype)
    for i, c in enumerate((e2, e1, e0)):
        p.update(init_spade(gen, c, f"spade.{2 - i}", config.spade_hidden, dtype))
    _add_conv(p, "out", e0, 3, gen, dtype)
    return p


def _up2(x):
    return F.interpolate(x[None], scale_factor=2, mode="bilinear", align_corners=False)[0]


def warp_hidden(state: RecurrentState, tgt_cam: Camera, divisor: int) -> torch.Tensor:
    """Forward-splat the previous hidden state into the new view (zeros on the first frame)."""
    if state.empty or state.last_cam is None:
        return None
    d = state.last_depth[::divisor, ::divisor]
    prev = scale_camera(state.last_cam, divisor)
    cur = scale_camera(tgt_cam, divisor)
    return forward_splat(state.h, d, prev, cur).values


def render_view(
    fused,
    depth_norm: torch.Tensor,
    depth_scene: torch.Tensor,
    tgt_cam: Camera,
    state: RecurrentState,
    params: dict,
    config: GeneratorConfig = DEFAULT_CONFIG,
    warp_state: bool = True,
):
    """Render one target view.

    Args:
        fused: fused feature maps ordered coarse to fine (as produced per
            cascade stage).
        depth_norm: (H, W) target depth normalized to [0, 1] over the scene's
            scaled range; drives the SPADE modulation.
        depth_scene: (H, W) target depth in scene units; stored for warping
            the hidden state into the next view.
        tgt_cam: target camera in scene units.
        state: recurrent state from the previous frame (empty at the start).
        params: generator parameters.
        warp_state: when False the previous hidden state is used without
            warping (a reference path for testing the warp).

    Returns:
        ``(image (3, H, W) in [0, 1], new state)``.
    """
    coarse, mid, fine = fused[0], fused[1], fused[2]
    s0 = F.silu(_conv(params, "enc.0", fine[None]))
    x = F.silu(_conv(params, "enc.1.down", s0, stride=2))
    s1 = F.silu(_conv(params, "enc.1.mix", torch.cat([x, mid[None]], 1)))
    x = F.silu(_conv(params, "enc.2.down", s1, stride=2))
    s2 = F.silu(_conv(params, "enc.2.mix", torch.cat([x, coarse[None]], 1)))
    o = F.silu(_conv(params, "enc.3.down", s2, stride=2))[0]

    div = config.bottleneck_divisor
    if state.empty:
        c_prev = torch.zeros_like(o)
        h_prev = torch.zeros_like(o)
    else:
        c_prev = state.c
        h_prev = warp_hidden(state, tgt_cam, div) if warp_state else state.h
    c, h = recurrent_cell(o, c_prev, h_prev, params, "lstm")

    x = torch.cat([_up2(h), s2[0]])
    x = F.silu(spade_block(_conv(params, "dec.2", x[None])[0], depth_norm, params, "spade.2"))
    x = torch.cat([_up2(x), s1[0]])
    x = F.silu(spade_block(_conv(params, "dec.1", x[None])[0], depth_norm, params, "spade.1"))
    x = torch.cat([_up2(x), s0[0]])
    x = F.silu(spade_block(_conv(params, "dec.0", x[None])[0], depth_norm, params, "spade.0"))
    img = torch.sigmoid(_conv(params, "out", x[None])[0])
    new_state = RecurrentState(c, h, depth_scene.detach(), tgt_cam)
    return img, new_state


def render_sequence(frames, params: dict, config: GeneratorConfig = DEFAULT_CONFIG, warp_state: bool = True) -> list[torch.Tensor]:
    """Render targets in order, threading the recurrent state from a zero start.

    ``frames`` is a sequence of ``(fused, depth_norm, depth_scene, tgt_cam)``.
    """
    state = RecurrentState()
    out = []
    for fused, dn, ds, cam in frames:
        img, state = render_view(fused, dn, ds, cam, state, params, config, warp_state)
        out.append(img)
    return out
