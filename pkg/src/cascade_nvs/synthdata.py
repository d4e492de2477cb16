"""Procedural textured scenes, camera rigs, exact ray casting and dataset I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import Camera, Intrinsics, backproject, look_at, pixel_grid, read_camera_txt, write_camera_txt
from .errors import ConfigError, ParseError
from .fileio import read_pfm, read_png, write_pfm, write_png

LIGHT_DIR = np.array([0.35, -0.55, -1.0]) / np.linalg.norm([0.35, -0.55, -1.0])
AMBIENT = 0.35


@dataclass(frozen=True)
class Texture:
    """Albedo = base * clip(0.5 + sum of sinusoids + checker, 0, 1).

    Frequencies are in cycles per scene unit of the surface parameterization.
    """

    base: tuple[float, float, float]
    waves: tuple[tuple[float, float, float, float], ...]  # (fu, fv, phase, amplitude)
    checker_period: float
    checker_amp: float

    def albedo(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        a = np.full(s.shape, 0.5)
        for fu, fv, ph, amp in self.waves:
            a = a + amp * np.sin(2 * np.pi * (fu * s + fv * t) + ph)
        if self.checker_amp:
            c = (np.floor(s / self.checker_period) + np.floor(t / self.checker_period)) % 2
            a = a + self.checker_amp * (c - 0.5)
        a = np.clip(a, 0.0, 1.0)
        return a[..., None] * np.asarray(self.base)

    def scaled(self, k: float) -> "Texture":
        return replace(
            self,
            waves=tuple((fu / k, fv / k, ph, amp) for fu, fv, ph, amp in self.waves),
            checker_period=self.checker_period * k,
        )


@dataclass(frozen=True)
class Rect:
    center: tuple[float, float, float]
    axis_u: tuple[float, float, float]  # unit vectors spanning the rectangle
    axis_v: tuple[float, float, float]
    half_u: float
    half_v: float
    texture: Texture
    kind: str = "rect"

    def scaled(self, k):
        return replace(self, center=tuple(np.multiply(self.center, k)), half_u=self.half_u * k, half_v=self.half_v * k, texture=self.texture.scaled(k))


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    texture: Texture
    kind: str = "box"

    def scaled(self, k):
        return replace(self, lo=tuple(np.multiply(self.lo, k)), hi=tuple(np.multiply(self.hi, k)), texture=self.texture.scaled(k))


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture
    kind: str = "sphere"

    def scaled(self, k):
        return replace(self, center=tuple(np.multiply(self.center, k)), radius=self.radius * k, texture=self.texture.scaled(k))


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    # the rig orbits this point at distance `radius`
    centroid: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 4.0
    bbox: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1, -1, -1), (1, 1, 1))

    def scaled(self, k: float) -> "Scene":
        """The same scene with every distance multiplied by ``k``; renders are unchanged."""
        lo, hi = self.bbox
        return replace(
            self,
            primitives=tuple(p.scaled(k) for p in self.primitives),
            centroid=tuple(np.multiply(self.centroid, k)),
            radius=self.radius * k,
            bbox=(tuple(np.multiply(lo, k)), tuple(np.multiply(hi, k))),
        )

    def depth_bracket(self) -> tuple[float, float]:
        """Fixed depth search range for this scene's rig.

        A bracket much wider than the observed depths keeps the per-stage
        search windows several pixels of disparity wide; a range hugging the
        true depths would shrink the final-stage window below a pixel.
        """
        return 0.5 * self.radius, 2.5 * self.radius

    def to_dict(self) -> dict:
        def prim(p):
            d = {k: getattr(p, k) for k in p.__dataclass_fields__ if k != "texture"}
            d["texture"] = {k: getattr(p.texture, k) for k in p.texture.__dataclass_fields__}
            return d

        return {
            "seed": self.seed,
            "background": self.background,
            "centroid": self.centroid,
            "radius": self.radius,
            "bbox": self.bbox,
            "primitives": [prim(p) for p in self.primitives],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        """Inverse of :meth:`to_dict` (JSON lists become tuples)."""
        kinds = {"rect": Rect, "box": Box, "sphere": Sphere}
        try:
            prims = []
            for p in d["primitives"]:
                t = p["texture"]
                tex = Texture(tuple(t["base"]), tuple(tuple(w) for w in t["waves"]), float(t["checker_period"]), float(t["checker_amp"]))
                fields = {k: (tuple(v) if isinstance(v, list) else v) for k, v in p.items() if k not in ("texture", "kind")}
                prims.append(kinds[p["kind"]](texture=tex, **fields))
            lo, hi = d["bbox"]
            return cls(tuple(prims), tuple(d["background"]), int(d["seed"]), tuple(d["centroid"]), float(d["radius"]), (tuple(lo), tuple(hi)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid scene description: {exc!r}") from None


def _random_texture(rng: np.random.Generator, scale: float) -> Texture:
    base = tuple(float(x) for x in rng.uniform(0.6, 1.0, size=3))
    waves = []
    # cycles per unit: the coarse bands keep the low-resolution stages
    # informative, the fine bands leave no flat patches at full resolution
    for lo, hi, amp in ((0.5, 0.8, 0.2), (1.2, 1.8, 0.16), (2.2, 3.0, 0.12), (3.2, 4.0, 0.1)):
        f = rng.uniform(lo, hi) / scale
        ang = rng.uniform(0, np.pi)
        waves.append((float(f * np.cos(ang)), float(f * np.sin(ang)), float(rng.uniform(0, 2 * np.pi)), amp))
    return Texture(base, tuple(waves), float(rng.uniform(0.3, 0.45) * scale), 0.08)


def generate_scene(seed: int, complexity: int = 1) -> Scene:
    """Deterministic scene from ``seed``.

    Complexity 0 is a single textured rectangle facing the rig; each further
    level tilts the backdrop slightly and adds one box or sphere in front.
    """
    if complexity < 0:
        raise ConfigError("complexity must be >= 0")
    rng = np.random.default_rng(seed)
    prims = []
    back_z = 1.2
    tilt = 0.0 if complexity == 0 else rng.uniform(-0.25, 0.25)
    axis_u = (float(np.cos(tilt)), 0.0, float(np.sin(tilt)))
    prims.append(Rect((0.0, 0.0, back_z), axis_u, (0.0, 1.0, 0.0), 6.0, 6.0, _random_texture(rng, 1.0)))
    for _ in range(complexity):
        c = rng.uniform([-0.8, -0.7, 0.55], [0.8, 0.7, 0.85])
        if rng.uniform() < 0.5:
            half = rng.uniform([0.3, 0.3, 0.15], [0.55, 0.55, 0.3])
            prims.append(Box(tuple(map(float, c - half)), tuple(map(float, c + half)), _random_texture(rng, 0.75)))
        else:
            prims.append(Sphere(tuple(map(float, c)), float(rng.uniform(0.3, 0.5)), _random_texture(rng, 0.75)))
    bg = tuple(float(x) for x in rng.uniform(0.0, 0.2, size=3))
    return Scene(tuple(prims), bg, seed, (0.0, 0.0, 0.0), 4.0, ((-1.0, -1.0, 0.0), (1.0, 1.0, 1.5)))


def box_scene(seed: int = 0) -> Scene:
    """A textured box standing on a textured backdrop.

    The box touches the backdrop, so no part of the backdrop inside the
    bounding box hides behind it from every rig view.
    """
    rng = np.random.default_rng(seed)
    prims = [
        Rect((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), 6.0, 6.0, _random_texture(rng, 1.0)),
        Box((-0.5, -0.5, 0.4), (0.5, 0.5, 1.0), _random_texture(rng, 0.75)),
    ]
    return Scene(tuple(prims), (0.1, 0.1, 0.1), seed, (0.0, 0.0, 0.0), 4.0, ((-1.0, -1.0, 0.25), (1.0, 1.0, 1.25)))


def camera_rig(
    scene: Scene,
    n_views: int,
    radius: float | None = None,
    jitter_seed: int | None = 0,
    width: int = 64,
    height: int = 64,
    arc_deg: float = 40.0,
    jitter: float = 0.05,
) -> list[Camera]:
    """Cameras on a horizontal arc around the scene centroid, all looking at it.

    The arc spans ``arc_deg`` degrees centered on the -z direction. With
    ``jitter_seed=None`` the positions are exact; otherwise each camera center
    is perturbed by up to ``jitter`` * radius per axis.
    """
    if n_views < 2:
        raise ConfigError("a rig needs at least two views")
    radius = scene.radius if radius is None else radius
    c = np.asarray(scene.centroid, dtype=np.float64)
    angles = np.deg2rad(np.linspace(-arc_deg / 2, arc_deg / 2, n_views))
    rng = np.random.default_rng(jitter_seed) if jitter_seed is not None else None
    cams = []
    for a in angles:
        eye = c + radius * np.array([np.sin(a), 0.0, -np.cos(a)])
        if rng is not None:
            eye = eye + rng.uniform(-jitter, jitter, size=3) * radius
        cams.append(look_at(eye, c, width=width, height=height))
    return cams


def interpolate_pose(a: Camera, b: Camera, t: float, center=(0.0, 0.0, 0.0)) -> Camera:
    """Camera on the straight segment between two camera centers, looking at ``center``."""
    eye = (1 - t) * a.center + t * b.center
    return Camera(a.intrinsics, look_at(eye, center, width=a.width, height=a.height).extrinsics, a.width, a.height)


# --- ray casting --------------------------------------------------------------


def _rays(cam: Camera, offsets=(0.0, 0.0)):
    H, W = cam.height, cam.width
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    u = u + offsets[0]
    v = v + offsets[1]
    i = cam.intrinsics
    d_cam = np.stack([(u - i.cx) / i.fx, (v - i.cy) / i.fy, np.ones_like(u)], axis=-1)
    # world direction whose camera-frame z component is exactly 1, so the
    # ray parameter equals camera-frame depth
    return cam.center, d_cam @ cam.R


def _hit_rect(p: Rect, o, d):
    c = np.asarray(p.center)
    au, av = np.asarray(p.axis_u), np.asarray(p.axis_v)
    n = np.cross(au, av)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((c - o) @ n) / denom
    X = o + t[..., None] * d
    s = (X - c) @ au
    q = (X - c) @ av
    ok = (np.abs(denom) > 1e-12) & (t > 0) & (np.abs(s) <= p.half_u) & (np.abs(q) <= p.half_v)
    normal = np.broadcast_to(n, d.shape)
    return np.where(ok, t, np.inf), normal, s, q


def _hit_box(p: Box, o, d):
    lo, hi = np.asarray(p.lo), np.asarray(p.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(-1)
    t_far = tmax.min(-1)
    axis = tmin.argmax(-1)
    ok = (t_near <= t_far) & (t_near > 0)
    t = np.where(ok, t_near, np.inf)
    X = o + np.where(ok, t, 0.0)[..., None] * d
    normal = np.zeros(d.shape)
    np.put_along_axis(normal, axis[..., None], 1.0, axis=-1)
    # face-local coordinates: the two axes other than the face normal
    other = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    s = np.take_along_axis(X - lo, other[..., :1], -1)[..., 0]
    q = np.take_along_axis(X - lo, other[..., 1:], -1)[..., 0]
    return t, normal, s + axis, q


def _hit_sphere(p: Sphere, o, d):
    c = np.asarray(p.center)
    oc = o - c
    a = (d * d).sum(-1)
    b = 2 * (d @ oc)
    cc = oc @ oc - p.radius**2
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0))
    t = (-b - sq) / (2 * a)
    ok = (disc >= 0) & (t > 0)
    t = np.where(ok, t, np.inf)
    X = o + np.where(ok, t, 0.0)[..., None] * d
    n = (X - c) / p.radius
    s = np.arctan2(n[..., 0], -n[..., 2]) * p.radius
    q = np.arcsin(np.clip(n[..., 1], -1, 1)) * p.radius
    return t, n, s, q


_HIT = {"rect": _hit_rect, "box": _hit_box, "sphere": _hit_sphere}


def _cast(scene: Scene, cam: Camera, offsets):
    o, d = _rays(cam, offsets)
    H, W = cam.height, cam.width
    best_t = np.full((H, W), np.inf)
    rgb = np.empty((H, W, 3))
    rgb[:] = scene.background
    for p in scene.primitives:
        t, n, s, q = _HIT[p.kind](p, o, d)
        closer = t < best_t
        if not closer.any():
            continue
        best_t = np.where(closer, t, best_t)
        n = n / np.linalg.norm(n, axis=-1, keepdims=True)
        n = np.where(((n * d).sum(-1) > 0)[..., None], -n, n)
        shade = AMBIENT + (1 - AMBIENT) * np.clip(n @ LIGHT_DIR, 0.0, 1.0)
        color = p.texture.albedo(s, q) * shade[..., None]
        rgb = np.where(closer[..., None], color, rgb)
    return rgb, best_t


def raycast_render(scene: Scene, cam: Camera, supersample: int = 4):
    """Nearest-hit rendering with exact per-pixel depth.

    Depth and the hit mask come from the ray through the pixel center; color
    averages a ``supersample`` x ``supersample`` grid of rays over the pixel
    footprint (a box prefilter, which keeps reprojected colors consistent).

    Returns:
        ``(rgb, depth, hit)``: (H, W, 3) colors in [0, 1], (H, W) camera-frame
        depth (0 where nothing is hit) and the (H, W) hit mask.
    """
    rgb_c, best_t = _cast(scene, cam, (0.0, 0.0))
    if supersample > 1:
        offs = (np.arange(supersample) + 0.5) / supersample - 0.5
        acc = np.zeros_like(rgb_c)
        for dv in offs:
            for du in offs:
                acc += _cast(scene, cam, (du, dv))[0]
        rgb = acc / supersample**2
    else:
        rgb = rgb_c
    hit = np.isfinite(best_t)
    depth = np.where(hit, best_t, 0.0)
    return np.clip(rgb, 0.0, 1.0), depth, hit


def surface_samples(scene: Scene, cams: list[Camera], density: int = 4) -> np.ndarray:
    """Exact surface points seen by ``cams``, cropped to the scene bounding box.

    Each camera is ray cast at ``density`` times its resolution (so samples
    are ``density`` times denser than pixels) and every hit is lifted to
    world coordinates.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in scene.bbox)
    out = []
    for cam in cams:
        i = cam.intrinsics
        s = density
        fine = Camera(
            Intrinsics(i.fx * s, i.fy * s, (i.cx + 0.5) * s - 0.5, (i.cy + 0.5) * s - 0.5),
            cam.extrinsics,
            cam.width * s,
            cam.height * s,
        )
        _, depth, hit = raycast_render(scene, fine, supersample=1)
        out.append(backproject(fine, pixel_grid(fine.width, fine.height)[hit], depth[hit]))
    pts = np.concatenate(out) if out else np.zeros((0, 3))
    return pts[np.all((pts >= lo) & (pts <= hi), axis=1)]


# --- dataset files ------------------------------------------------------------


@dataclass
class DatasetIndex:
    scene_dir: Path
    images: list[Path]
    depths: list[Path]
    cams: list[Path]
    d_min: float
    d_max: float
    width: int
    height: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def load_view(self, i: int):
        """Returns ``(rgb float64 HxWx3, depth float32 HxW, camera)``."""
        rgb = read_png(self.images[i])
        depth = read_pfm(self.depths[i])
        cam, _, _ = read_camera_txt(self.cams[i], self.width, self.height)
        return rgb, depth, cam

    def cameras(self) -> list[Camera]:
        return [read_camera_txt(p, self.width, self.height)[0] for p in self.cams]


def depth_range(depths, margin: float = 0.05, bracket: tuple[float, float] | None = None) -> tuple[float, float]:
    """Range covering every positive depth, widened by ``margin`` on each side.

    With ``bracket`` the result is the bracket, extended where needed so it
    still covers every depth.
    """
    vals = np.concatenate([np.asarray(d)[np.asarray(d) > 0].ravel() for d in depths])
    lo, hi = float(vals.min() * (1 - margin)), float(vals.max() * (1 + margin))
    if bracket is not None:
        lo, hi = min(lo, float(bracket[0])), max(hi, float(bracket[1]))
    return lo, hi


def write_dataset(root, scene_id: int, cams: list[Camera], rgbs, depths, d_min: float, d_max: float, M1: int = 48, meta: dict | None = None) -> DatasetIndex:
    """Write ``scene_XXXX/{images,depths,cams}`` plus a ``scene.json`` summary."""
    sdir = Path(root) / f"scene_{scene_id:04d}"
    for sub in ("images", "depths", "cams"):
        (sdir / sub).mkdir(parents=True, exist_ok=True)
    for i, (cam, rgb, dep) in enumerate(zip(cams, rgbs, depths)):
        write_png(sdir / "images" / f"{i:08d}.png", rgb)
        write_pfm(sdir / "depths" / f"{i:08d}.pfm", np.asarray(dep, dtype=np.float32))
        write_camera_txt(sdir / "cams" / f"{i:08d}.txt", cam, d_min, (d_max - d_min) / M1)
    info = {
        "n_views": len(cams),
        "width": cams[0].width,
        "height": cams[0].height,
        "d_min": d_min,
        "d_max": d_max,
        **(meta or {}),
    }
    (sdir / "scene.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return read_dataset(sdir)


def read_dataset(scene_dir) -> DatasetIndex:
    sdir = Path(scene_dir)
    meta_path = sdir / "scene.json"
    try:
        info = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise ParseError(meta_path, 0, "missing scene.json") from None
    except json.JSONDecodeError as exc:
        raise ParseError(meta_path, exc.pos, f"invalid JSON: {exc.msg}") from None
    for key in ("n_views", "width", "height", "d_min", "d_max"):
        if key not in info:
            raise ParseError(meta_path, 0, f"missing field {key!r}")
    n = int(info["n_views"])
    idx = DatasetIndex(
        sdir,
        [sdir / "images" / f"{i:08d}.png" for i in range(n)],
        [sdir / "depths" / f"{i:08d}.pfm" for i in range(n)],
        [sdir / "cams" / f"{i:08d}.txt" for i in range(n)],
        float(info["d_min"]),
        float(info["d_max"]),
        int(info["width"]),
        int(info["height"]),
        info,
    )
    for p in idx.images + idx.depths + idx.cams:
        if not p.exists():
            raise ParseError(p, 0, "referenced file does not exist")
    return idx


def list_scenes(root) -> list[Path]:
    return sorted(p for p in Path(root).glob("scene_*") if p.is_dir())


def synthesize_scene(root, scene_id: int, seed: int, complexity: int = 1, n_views: int = 5, width: int = 64, height: int = 64, scene: Scene | None = None) -> DatasetIndex:
    """Generate, render and write one scene; returns its index."""
    scene = generate_scene(seed, complexity) if scene is None else scene
    cams = camera_rig(scene, n_views, jitter_seed=seed, width=width, height=height)
    renders = [raycast_render(scene, c) for c in cams]
    d_min, d_max = depth_range([r[1] for r in renders], bracket=scene.depth_bracket())
    return write_dataset(
        root,
        scene_id,
        cams,
        [r[0] for r in renders],
        [r[1] for r in renders],
        d_min,
        d_max,
        meta={"seed": seed, "complexity": complexity, "scene": scene.to_dict()},
    )
