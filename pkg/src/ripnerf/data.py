"""Datasets: Blender-convention IO, multi-scale pyramids and procedural toy scenes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .render import Camera, composite, generate_rays, sphere_interval

# OpenGL (Blender) camera axes -> OpenCV camera axes
_GL_TO_CV = np.diag([1.0, -1.0, -1.0])


class DataError(ValueError):
    """Malformed or inconsistent dataset on disk."""


@dataclass
class ViewRecord:
    camera: Camera
    image: np.ndarray  # (H, W, 4) RGBA in [0, 1], straight alpha
    scale: int = 1
    name: str = ""

    def rgb(self, background=(1.0, 1.0, 1.0)):
        """RGB composited over ``background``."""
        a = self.image[..., 3:4]
        return self.image[..., :3] * a + (1.0 - a) * np.asarray(background)


@dataclass
class ScaledDataset:
    views: list = field(default_factory=list)
    scene_radius: float = 1.5
    split: str = "train"

    def __len__(self):
        return len(self.views)

    @property
    def scales(self):
        return sorted({v.scale for v in self.views})

    def at_scale(self, s):
        return [v for v in self.views if v.scale == s]

    def ray_table(self, background=(1.0, 1.0, 1.0)):
        """All pixels as flat arrays: origins, directions, radii, rgb, area ratio, view id."""
        parts = {k: [] for k in ("origins", "directions", "radii", "rgb", "ratio", "view")}
        for i, v in enumerate(self.views):
            rays = generate_rays(v.camera)
            n = len(rays)
            parts["origins"].append(rays.origins)
            parts["directions"].append(rays.directions)
            parts["radii"].append(rays.radii)
            parts["rgb"].append(v.rgb(background).reshape(-1, 3))
            parts["ratio"].append(np.full(n, float(v.scale)))
            parts["view"].append(np.full(n, i))
        if not self.views:
            return {k: np.zeros((0, 3) if k in ("origins", "directions", "rgb") else 0)
                    for k in parts}
        return {k: np.concatenate(p) for k, p in parts.items()}


# ---------------------------------------------------------------------------
# pose conversion


def camera_from_blender(c2w_gl, width, height, camera_angle_x):
    c2w_gl = np.asarray(c2w_gl, dtype=np.float64)
    if c2w_gl.shape != (4, 4):
        raise DataError("transform_matrix must be 4x4")
    if abs(np.linalg.det(c2w_gl[:3, :3])) < 1e-9:
        raise DataError("non-invertible camera pose")
    focal = 0.5 * width / math.tan(0.5 * camera_angle_x)
    rot = c2w_gl[:3, :3] @ _GL_TO_CV
    try:
        return Camera(focal, focal, 0.5 * width, 0.5 * height, width, height,
                      rot, c2w_gl[:3, 3])
    except ValueError as exc:
        raise DataError(f"invalid camera pose: {exc}") from exc


def camera_to_blender(cam: Camera):
    m = np.eye(4)
    m[:3, :3] = cam.rotation @ _GL_TO_CV
    m[:3, 3] = cam.translation
    return m


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """OpenCV-convention camera-to-world rotation looking from ``eye`` at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


# ---------------------------------------------------------------------------
# Blender IO


def _read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return arr


def write_png(path, image, text=None):
    """Clamp-and-quantize to 8 bits, no gamma; ``text`` adds tEXt chunks."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    mode = {3: "RGB", 4: "RGBA"}[arr.shape[-1]]
    info = None
    if text:
        info = PngInfo()
        for k, v in text.items():
            info.add_text(k, v)
    Image.fromarray(arr, mode).save(path, pnginfo=info)


def load_blender(root, split="train", scene_radius=1.5) -> ScaledDataset:
    """Read ``transforms_{split}.json`` and its PNG frames."""
    root = Path(root)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.exists():
        raise DataError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: {exc}") from exc
    if "camera_angle_x" not in meta:
        raise DataError(f"{meta_path}: missing camera_angle_x")
    angle = float(meta["camera_angle_x"])
    views = []
    shape = None
    for frame in meta.get("frames", []):
        rel = frame["file_path"]
        path = root / rel
        if path.suffix != ".png":
            path = path.with_name(path.name + ".png")
        if not path.exists():
            raise DataError(f"missing frame {path}")
        img = _read_png(path)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DataError(f"frame {path} has shape {img.shape}, expected {shape}")
        h, w = img.shape[:2]
        cam = camera_from_blender(frame["transform_matrix"], w, h, angle)
        views.append(ViewRecord(cam, img, 1, Path(rel).name))
    return ScaledDataset(views, scene_radius, split)


def write_blender(dataset: ScaledDataset, root, split=None):
    """Write full-resolution views in Blender convention."""
    root = Path(root)
    split = split or dataset.split
    (root / split).mkdir(parents=True, exist_ok=True)
    views = dataset.at_scale(1) if dataset.views else []
    angle = 0.0
    if views:
        c = views[0].camera
        angle = 2.0 * math.atan(0.5 * c.width / c.fx)
    frames = []
    for i, v in enumerate(views):
        name = v.name or f"r_{i}"
        write_png(root / split / f"{name}.png", v.image)
        frames.append({"file_path": f"./{split}/{name}",
                       "transform_matrix": camera_to_blender(v.camera).tolist()})
    meta = {"camera_angle_x": angle, "frames": frames}
    (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))


# ---------------------------------------------------------------------------
# multi-scale


def box_downsample(image, s):
    h, w, c = image.shape
    if h % s or w % s:
        raise DataError(f"factor {s} does not divide {h}x{w}")
    return image.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))


def make_multiscale(dataset: ScaledDataset, factors=(1, 2, 4, 8)) -> ScaledDataset:
    """Box-filter every scale-1 view by each factor (premultiplied RGB, linear space)."""
    out = []
    for s in factors:
        for v in dataset.at_scale(1):
            if s == 1:
                out.append(v)
                continue
            h, w = v.image.shape[:2]
            if h % s or w % s:
                raise DataError(f"factor {s} does not divide {h}x{w}")
            pre = v.image.copy()
            pre[..., :3] *= pre[..., 3:4]
            small = box_downsample(pre, s)
            a = small[..., 3:4]
            small[..., :3] = np.where(a > 0, small[..., :3] / np.where(a > 0, a, 1.0), 0.0)
            out.append(ViewRecord(v.camera.scaled(s), small, s, v.name))
    return ScaledDataset(out, dataset.scene_radius, dataset.split)


# ---------------------------------------------------------------------------
# toy scenes


@dataclass
class Primitive:
    kind: str                 # "sphere" or "box"
    center: tuple
    size: object              # radius for spheres, half-extents (3,) for boxes
    color: tuple
    density: float = 60.0
    stripe_color: tuple | None = None
    stripe_period: float = 0.0
    stripe_axis: int = 0

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise DataError(f"unknown primitive type {self.kind!r}")
        self.center = tuple(float(x) for x in self.center)
        self.color = tuple(float(x) for x in self.color)
        if self.kind == "box":
            self.size = tuple(float(x) for x in self.size)
        else:
            self.size = float(self.size)
        if self.stripe_color is not None:
            self.stripe_color = tuple(float(x) for x in self.stripe_color)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("type", d.pop("kind", None))
        return cls(kind=kind, **d)

    def to_dict(self):
        d = {"type": self.kind, "center": list(self.center), "color": list(self.color),
             "density": self.density}
        d["size"] = list(self.size) if self.kind == "box" else float(self.size)
        if self.stripe_color is not None:
            d.update(stripe_color=list(self.stripe_color), stripe_period=self.stripe_period,
                     stripe_axis=self.stripe_axis)
        return d

    def bounding_radius(self):
        c = np.linalg.norm(self.center)
        if self.kind == "sphere":
            return c + float(self.size)
        return c + float(np.linalg.norm(self.size))

    def inside(self, pts):
        rel = pts - np.asarray(self.center)
        if self.kind == "sphere":
            return np.sum(rel * rel, axis=-1) <= float(self.size) ** 2
        return np.all(np.abs(rel) <= np.asarray(self.size), axis=-1)

    def color_at(self, pts):
        base = np.broadcast_to(np.asarray(self.color, dtype=np.float64), pts.shape).copy()
        if self.stripe_color is not None and self.stripe_period > 0:
            phase = np.floor(pts[..., self.stripe_axis] / (0.5 * self.stripe_period))
            odd = (phase.astype(np.int64) % 2) == 1
            base[odd] = self.stripe_color
        return base

    def ray_interval(self, o, d):
        """Parameter range where rays hit the primitive (``t1 <= t0`` for a miss)."""
        c = np.asarray(self.center)
        if self.kind == "sphere":
            return sphere_interval(o - c, d, float(self.size), near=0.0)
        half = np.asarray(self.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            a = (c - half - o) * inv
            b = (c + half - o) * inv
        lo = np.nanmax(np.minimum(a, b), axis=1)
        hi = np.nanmin(np.maximum(a, b), axis=1)
        return np.maximum(lo, 0.0), hi


class AnalyticField:
    """Constant-density primitives; overlapping densities add, colors blend by density."""

    def __init__(self, primitives):
        self.primitives = list(primitives)

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        dens = np.zeros(pts.shape[:-1])
        col = np.zeros(pts.shape)
        for p in self.primitives:
            m = p.inside(pts)
            if not m.any():
                continue
            dens[m] += p.density
            col[m] += p.density * p.color_at(pts[m])
        nz = dens > 0
        col[nz] /= dens[nz][:, None]
        return dens, col

    def density(self, pts):
        return self(pts)[0]

    def hit_range(self, o, d):
        lo = np.full(len(o), np.inf)
        hi = np.full(len(o), -np.inf)
        for p in self.primitives:
            a, b = p.ray_interval(o, d)
            hit = b > a
            lo = np.where(hit, np.minimum(lo, a), lo)
            hi = np.where(hit, np.maximum(hi, b), hi)
        return lo, hi


def default_primitives():
    return [
        Primitive("sphere", (0.0, 0.0, 0.15), 0.45, (0.85, 0.15, 0.1)),
        Primitive("box", (0.55, -0.45, -0.35), (0.25, 0.25, 0.25), (0.1, 0.6, 0.2)),
        Primitive("box", (-0.45, 0.45, -0.3), (0.35, 0.3, 0.3), (0.95, 0.95, 0.9),
                  stripe_color=(0.05, 0.05, 0.3), stripe_period=0.25, stripe_axis=0),
    ]


@dataclass
class ToySceneSpec:
    seed: int = 0
    primitives: list = field(default_factory=default_primitives)
    n_train: int = 16
    n_eval: int = 8
    resolution: int = 64
    scene_radius: float = 1.5
    camera_distance: float = 4.0
    camera_angle_x: float = 0.6911
    supersample: int = 2
    gt_step: float = 0.004

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown toy-scene keys: {sorted(unknown)}")
        if "primitives" in d:
            d["primitives"] = [p if isinstance(p, Primitive) else Primitive.from_dict(p)
                               for p in d["primitives"]]
        return cls(**d)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["primitives"] = [p.to_dict() for p in self.primitives]
        return d


def orbit_cameras(n, rng, resolution, distance, angle_x):
    cams = []
    for _ in range(n):
        az = rng.uniform(0.0, 2.0 * math.pi)
        el = rng.uniform(math.radians(-20.0), math.radians(60.0))
        eye = distance * np.array([math.cos(el) * math.cos(az),
                                   math.cos(el) * math.sin(az), math.sin(el)])
        focal = 0.5 * resolution / math.tan(0.5 * angle_x)
        cams.append(Camera(focal, focal, 0.5 * resolution, 0.5 * resolution,
                           resolution, resolution, look_at(eye), eye))
    return cams


def render_analytic(field_fn: AnalyticField, camera: Camera, supersample=1, step=0.004,
                    background=(1.0, 1.0, 1.0), chunk=4096):
    """Straight-alpha RGBA image of the analytic field, ``supersample^2`` rays per pixel."""
    ss = supersample
    fine = replace(camera, fx=camera.fx * ss, fy=camera.fy * ss, cx=camera.cx * ss,
                   cy=camera.cy * ss, width=camera.width * ss, height=camera.height * ss)
    rays = generate_rays(fine)
    premult = np.zeros((len(rays), 3))
    alpha = np.zeros(len(rays))
    for s in range(0, len(rays), chunk):
        o = rays.origins[s:s + chunk]
        d = rays.directions[s:s + chunk]
        c, a = march_analytic(field_fn, o, d, step)
        premult[s:s + chunk] = c
        alpha[s:s + chunk] = a
    h, w = camera.height, camera.width
    img = np.concatenate([premult, alpha[:, None]], axis=1).reshape(h * ss, w * ss, 4)
    img = img.reshape(h, ss, w, ss, 4).mean(axis=(1, 3))
    a = img[..., 3:4]
    img[..., :3] = np.where(a > 1e-8, img[..., :3] / np.where(a > 1e-8, a, 1.0), 0.0)
    return np.clip(img, 0.0, 1.0)


def march_analytic(field_fn: AnalyticField, o, d, step, t_range=None):
    """Premultiplied color and opacity of rays through the analytic field.

    Samples are uniform (world spacing ``step``) over ``t_range`` or, by
    default, over the union of primitive hit ranges (density is zero
    elsewhere).
    """
    lo, hi = field_fn.hit_range(o, d) if t_range is None else t_range
    norm = np.linalg.norm(d, axis=1)
    hit = hi > lo
    out_c = np.zeros((len(o), 3))
    out_a = np.zeros(len(o))
    if not hit.any():
        return out_c, out_a
    o, d, lo, hi, norm = o[hit], d[hit], lo[hit], hi[hit], norm[hit]
    dt = step / norm
    n = np.ceil((hi - lo) / dt).astype(np.int64)
    k = np.arange(int(n.max()))
    t0 = lo[:, None] + k[None] * dt[:, None]
    t1 = np.minimum(t0 + dt[:, None], hi[:, None])
    valid = (k[None] < n[:, None]) & (t1 > t0)
    mid = 0.5 * (t0 + t1)
    pts = o[:, None] + mid[..., None] * d[:, None]
    dens, col = field_fn(pts)
    delta = np.where(valid, (t1 - t0) * norm[:, None], 0.0)
    rgb, opacity, _ = composite(np.where(valid, dens, 0.0), delta, col, np.zeros(3))
    out_c[hit] = rgb
    out_a[hit] = opacity
    return out_c, out_a


def toy_scene(spec: ToySceneSpec | None = None):
    """Render the train and eval splits of a toy scene.

    Returns ``(train, eval, field)`` where ``field`` is the analytic oracle.
    """
    spec = spec or ToySceneSpec()
    for p in spec.primitives:
        if p.bounding_radius() > spec.scene_radius:
            raise DataError(f"primitive at {p.center} extends outside radius {spec.scene_radius}")
    field_fn = AnalyticField(spec.primitives)
    rng = np.random.default_rng(spec.seed)
    splits = []
    for split, n in (("train", spec.n_train), ("eval", spec.n_eval)):
        cams = orbit_cameras(n, rng, spec.resolution, spec.camera_distance, spec.camera_angle_x)
        views = [ViewRecord(c, render_analytic(field_fn, c, spec.supersample, spec.gt_step),
                            1, f"r_{i}")
                 for i, c in enumerate(cams)]
        splits.append(ScaledDataset(views, spec.scene_radius, split))
    return splits[0], splits[1], field_fn
