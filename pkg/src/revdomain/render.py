"""Procedural colon-like scenes and a sphere-tracing virtual endoscope.

Geometry is an implicit field.  Every scene object exposes
``free_distance(points)``: a lower bound on the distance to the nearest
surface, positive in free space.  The tube lumen is a varying-radius tube
around a smooth random centerline, with periodic haustral folds narrowing
the radius along the arc length.
"""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .io import ManifestRecord, read_manifest, write_depth, write_manifest, write_pgm

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneConfig:
    n_points: int = 100
    spacing: float = 0.1
    radius: float = 1.0
    radius_variation: float = 0.15
    bend: float = 0.5
    fold_amplitude: float = 0.12
    fold_frequency: float = 0.8

    def validate(self) -> None:
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if not self.spacing > 0:
            raise ValueError("spacing must be > 0")
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if not 0 <= self.radius_variation < 0.5:
            raise ValueError("radius_variation must be in [0, 0.5)")
        if not 0 <= self.fold_amplitude < 0.5 * self.radius * (1 - self.radius_variation):
            raise ValueError("fold_amplitude must be >= 0 and leave a positive radius")
        if self.bend < 0 or self.fold_frequency < 0:
            raise ValueError("bend and fold_frequency must be >= 0")


def fold_profile(s: np.ndarray, amplitude: float, frequency: float) -> np.ndarray:
    """Inward radius displacement of the haustral folds at arc length ``s``."""
    if amplitude == 0:
        return np.zeros_like(s)
    return amplitude * (0.5 + 0.5 * np.cos(2 * np.pi * frequency * s)) ** 2


@dataclass
class Scene:
    """Tube around a polyline centerline.

    The field is the distance to the nearest centerline point minus the
    radius at that point's arc length (negative in the lumen).  The tube is
    closed at both ends by round caps, so every ray from inside hits a wall.
    """

    centerline: np.ndarray
    radius_profile: np.ndarray
    fold_amplitude: float = 0.0
    fold_frequency: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=np.float64)
        self.radius_profile = np.asarray(self.radius_profile, dtype=np.float64)
        if self.centerline.ndim != 2 or self.centerline.shape[1] != 3 or len(self.centerline) < 2:
            raise ValueError("centerline must be an (n >= 2, 3) array")
        if self.radius_profile.shape != (len(self.centerline),):
            raise ValueError("radius_profile must hold one radius per centerline point")
        if np.any(self.radius_profile - self.fold_amplitude <= 0):
            raise ValueError("tube radius must stay positive everywhere")
        seg = np.diff(self.centerline, axis=0)
        self._len2 = np.einsum("ij,ij->i", seg, seg)
        if np.any(self._len2 == 0):
            raise ValueError("centerline has repeated points")
        lengths = np.sqrt(self._len2)
        self.arclength = np.concatenate([[0.0], np.cumsum(lengths)])
        self._tree = cKDTree(self.centerline)
        # radius slope along the axis inflates the field's Lipschitz constant
        slope = 0.0
        if self.fold_amplitude:
            ss = np.linspace(0, 1 / max(self.fold_frequency, 1e-9), 2001)
            slope = np.abs(np.gradient(fold_profile(ss, self.fold_amplitude, self.fold_frequency), ss)).max()
        taper = np.abs(np.diff(self.radius_profile) / lengths).max()
        self.lipschitz = float(1.0 + slope + taper)

    def radius_at(self, s: np.ndarray) -> np.ndarray:
        base = np.interp(s, self.arclength, self.radius_profile)
        return base - fold_profile(s, self.fold_amplitude, self.fold_frequency)

    def closest(self, points: np.ndarray, return_offset: bool = False):
        """Distance to the centerline and arc length of the closest point."""
        flat = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        _, knot = self._tree.query(flat)
        n_seg = len(self.centerline) - 1
        best = np.full(len(flat), np.inf)
        best_s = np.zeros(len(flat))
        best_diff = np.zeros_like(flat)
        # the closest polyline point lies on a segment next to the closest knot
        for off in (-2, -1, 0, 1):
            i = np.clip(knot + off, 0, n_seg - 1)
            a = self.centerline[i]
            d = self.centerline[i + 1] - a
            rel = flat - a
            t = np.clip(np.einsum("nk,nk->n", rel, d) / self._len2[i], 0.0, 1.0)
            diff = rel - t[:, None] * d
            dist = np.sqrt(np.einsum("nk,nk->n", diff, diff))
            better = dist < best
            best = np.where(better, dist, best)
            best_s = np.where(better, self.arclength[i] + t * np.sqrt(self._len2[i]), best_s)
            if return_offset:
                best_diff = np.where(better[:, None], diff, best_diff)
        shape = np.shape(points)[:-1]
        if return_offset:
            return best.reshape(shape), best_s.reshape(shape), best_diff.reshape(shape + (3,))
        return best.reshape(shape), best_s.reshape(shape)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Distance to the centerline minus the local radius (negative inside the lumen)."""
        dist, s = self.closest(points)
        return dist - self.radius_at(s)

    def free_distance(self, points: np.ndarray) -> np.ndarray:
        return -self.sdf(points) / self.lipschitz

    def normals(self, points: np.ndarray) -> np.ndarray:
        """Unit wall normals facing into the lumen: ``-radial + r'(s) * tangent``."""
        dist, s, diff = self.closest(points, return_offset=True)
        radial = diff / np.maximum(dist, 1e-12)[..., None]
        h = 1e-4
        slope = (self.radius_at(s + h) - self.radius_at(s - h)) / (2 * h)
        idx = np.clip(np.searchsorted(self.arclength, s) - 1, 0, len(self.centerline) - 2)
        tan = self.centerline[idx + 1] - self.centerline[idx]
        tan /= np.linalg.norm(tan, axis=-1, keepdims=True)
        n = -radial + slope[..., None] * tan
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def tangent(self, index: int) -> np.ndarray:
        i = min(max(index, 0), len(self.centerline) - 2)
        t = self.centerline[i + 1] - self.centerline[i]
        return t / np.linalg.norm(t)


def _smooth_series(rng: np.random.Generator, n: int, n_modes: int = 3) -> np.ndarray:
    """Sum of a few random low-frequency sinusoids sampled on [0, 1]."""
    u = np.linspace(0.0, 1.0, n)
    out = np.zeros(n)
    for k in range(1, n_modes + 1):
        out += rng.normal() / k * np.sin(np.pi * k * u + rng.uniform(0, 2 * np.pi))
    return out


def make_scene(seed: int, config: Optional[SceneConfig] = None) -> Scene:
    """Deterministic random tube from ``seed``."""
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    n = config.n_points
    # heading angles drift smoothly; the first point looks down +z
    yaw = config.bend * _smooth_series(rng, n)
    pitch = config.bend * _smooth_series(rng, n)
    yaw -= yaw[0]
    pitch -= pitch[0]
    dirs = np.stack([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)], axis=1)
    pts = np.concatenate([np.zeros((1, 3)), np.cumsum(dirs[:-1] * config.spacing, axis=0)])
    radius = config.radius * (1.0 + config.radius_variation * np.tanh(_smooth_series(rng, n, 4)))
    return Scene(pts, radius, config.fold_amplitude, config.fold_frequency, seed)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    lipschitz: float = 1.0

    def free_distance(self, points):
        return np.linalg.norm(np.asarray(points) - self.center, axis=-1) - self.radius


@dataclass
class InfiniteCylinder:
    """Viewed from inside: free space is the interior of the cylinder."""

    point: np.ndarray
    axis: np.ndarray
    radius: float
    lipschitz: float = 1.0

    def free_distance(self, points):
        axis = np.asarray(self.axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        rel = np.asarray(points) - self.point
        radial = rel - (rel @ axis)[..., None] * axis
        return self.radius - np.linalg.norm(radial, axis=-1)


# ---------------------------------------------------------------------------
# camera and lights


@dataclass
class EndoscopeCamera:
    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    fov_degrees: float = 120.0
    resolution: tuple = (64, 64)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        f = np.asarray(self.forward, dtype=np.float64)
        f = f / np.linalg.norm(f)
        u = np.asarray(self.up, dtype=np.float64)
        u = u - (u @ f) * f
        nu = np.linalg.norm(u)
        if nu < 1e-9:
            raise ValueError("camera up vector is parallel to forward")
        self.forward, self.up = f, u / nu
        if not 60.0 < self.fov_degrees < 170.0:
            raise ValueError(f"fov_degrees must be in (60, 170), got {self.fov_degrees}")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise ValueError(f"bad resolution {self.resolution}")

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.up, self.forward)

    def ray_directions(self) -> np.ndarray:
        """Unit directions through pixel centers, shape (H, W, 3)."""
        w, h = self.resolution
        half = np.tan(np.radians(self.fov_degrees) / 2)
        u = (2 * (np.arange(w) + 0.5) / w - 1) * half
        v = (1 - 2 * (np.arange(h) + 0.5) / h) * half * h / w
        d = self.forward + u[None, :, None] * self.right + v[:, None, None] * self.up
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_world(self, offset: np.ndarray) -> np.ndarray:
        """Camera-frame (right, up, forward) offset to a world position."""
        o = np.asarray(offset, dtype=np.float64)
        return self.position + o[..., :1] * self.right + o[..., 1:2] * self.up + o[..., 2:3] * self.forward


@dataclass
class LightRig:
    """Point lights riding the scope tip: camera-frame offsets and intensities."""

    offsets: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        self.offsets = np.atleast_2d(np.asarray(self.offsets, dtype=np.float64))
        self.intensities = np.atleast_1d(np.asarray(self.intensities, dtype=np.float64))
        if not 2 <= len(self.offsets) <= 3:
            raise ValueError(f"a light rig holds 2 or 3 lights, got {len(self.offsets)}")
        if self.intensities.shape != (len(self.offsets),):
            raise ValueError("one intensity per light required")
        if np.any(self.intensities <= 0):
            raise ValueError("light intensities must be positive")

    def scaled(self, factor: float) -> "LightRig":
        return LightRig(self.offsets.copy(), self.intensities * factor)


def shade(points: np.ndarray, normals: np.ndarray, camera: EndoscopeCamera, rig: LightRig) -> np.ndarray:
    """Lambertian radiance with inverse-square fall-off, summed over lights (unclamped)."""
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    total = np.zeros(points.shape[:-1])
    for offset, power in zip(rig.offsets, rig.intensities):
        to_light = camera.to_world(offset) - points
        d2 = np.einsum("...k,...k->...", to_light, to_light)
        cos = np.einsum("...k,...k->...", normals, to_light) / np.sqrt(d2)
        total += power * np.maximum(cos, 0.0) / d2
    return total


# ---------------------------------------------------------------------------
# rendering


@dataclass
class RenderedPair:
    image: np.ndarray
    depth: np.ndarray
    radiance: np.ndarray
    pose: dict
    seed: int = 0


def sphere_trace(
    field,
    origin: np.ndarray,
    dirs: np.ndarray,
    max_dist: float = 50.0,
    eps: float = 1e-6,
    max_steps: int = 600,
) -> np.ndarray:
    """Distance along each unit ray to the first surface, ``inf`` on a miss."""
    n = len(dirs)
    t = np.zeros(n)
    last = np.full(n, np.inf)
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        d = field.free_distance(origin + t[active, None] * dirs[active])
        last[active] = d
        done = d < eps
        hit[active[done]] = True
        keep = active[~done]
        t[keep] += d[~done]
        active = keep[t[keep] < max_dist]
    # grazing rays that ran out of steps while hugging the wall count as hits
    hit[active[last[active] < 1e3 * eps]] = True
    t[~hit] = np.inf
    return t


def surface_normals(field, points: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Unit gradient of the free-space field: points from the wall into free space."""
    grad = np.empty_like(points)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[:, k] = field.free_distance(points + e) - field.free_distance(points - e)
    return grad / np.linalg.norm(grad, axis=1, keepdims=True)


def render_view(scene, camera: EndoscopeCamera, rig: LightRig, max_dist: float = 50.0, seed: int = 0) -> RenderedPair:
    inside = float(scene.free_distance(camera.position[None])[0])
    if inside <= 0:
        raise ValueError(f"camera at {camera.position.tolist()} is outside the free space (field {inside:.4g})")
    w, h = camera.resolution
    dirs = camera.ray_directions().reshape(-1, 3)
    t = sphere_trace(scene, camera.position, dirs, max_dist=max_dist)
    radiance = np.zeros(len(dirs))
    hit = np.isfinite(t)
    if hit.any():
        pts = camera.position + t[hit, None] * dirs[hit]
        normals = scene.normals(pts) if hasattr(scene, "normals") else surface_normals(scene, pts)
        radiance[hit] = shade(pts, normals, camera, rig)
    pose = {
        "position": camera.position.tolist(),
        "forward": camera.forward.tolist(),
        "up": camera.up.tolist(),
        "fov_degrees": camera.fov_degrees,
    }
    radiance = radiance.reshape(h, w)
    return RenderedPair(np.clip(radiance, 0.0, 1.0), t.reshape(h, w), radiance, pose, seed)


@dataclass
class ViewConfig:
    width: int = 64
    height: int = 64
    fov_degrees: float = 120.0
    max_jitter_degrees: float = 30.0
    max_lateral: float = 0.3
    light_power: float = 0.35
    light_offset: float = 0.08


def _perpendicular(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    r = rng.normal(size=3)
    r -= (r @ v) * v
    return r / np.linalg.norm(r)


def sample_view(scene: Scene, rng: np.random.Generator, config: Optional[ViewConfig] = None):
    """Random scope pose inside the lumen: near the start, looking roughly down the tube."""
    config = config or ViewConfig()
    n = len(scene.centerline)
    lo, hi = min(2, n - 2), max(min(2, n - 2) + 1, n // 4)
    idx = int(rng.integers(lo, hi))
    tangent = scene.tangent(idx)
    lateral = _perpendicular(tangent, rng) * rng.uniform(0, config.max_lateral) * scene.radius_profile[idx]
    position = scene.centerline[idx] + lateral
    # uniform direction inside a cone around the tangent
    cos_max = np.cos(np.radians(config.max_jitter_degrees))
    cos_t = rng.uniform(cos_max, 1.0)
    sin_t = np.sqrt(1 - cos_t ** 2)
    side = _perpendicular(tangent, rng)
    forward = cos_t * tangent + sin_t * side
    up = _perpendicular(forward, rng)
    camera = EndoscopeCamera(position, forward, up, config.fov_degrees, (config.width, config.height))

    n_lights = int(rng.integers(2, 4))
    angles = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(n_lights) / n_lights
    offsets = config.light_offset * np.stack([np.cos(angles), np.sin(angles), np.zeros(n_lights)], axis=1)
    share = rng.uniform(0.7, 1.3, size=n_lights)
    rig = LightRig(offsets, config.light_power * share / share.sum())
    return camera, rig


# ---------------------------------------------------------------------------
# pseudo-real texture


@dataclass
class TextureConfig:
    noise_amplitude: float = 0.7
    streak_weight: float = 1.6
    n_streaks: int = 25
    streak_width: float = 1.0


def _streaks(rng: np.random.Generator, h: int, w: int, config: TextureConfig) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    scale = max(h, w) / 64.0
    out = np.zeros(h * w)
    for _ in range(config.n_streaks):
        steps = int(rng.integers(40, 120) * scale)
        heading = rng.uniform(0, 2 * np.pi) + np.cumsum(rng.normal(0, 0.1, size=steps))
        start = rng.uniform([0, 0], [h, w])
        path = start + np.cumsum(0.5 * np.stack([np.sin(heading), np.cos(heading)], axis=1), axis=0)
        width = config.streak_width * scale * rng.uniform(0.7, 1.4)
        d2 = ((pix[:, None, :] - path[None, :, :]) ** 2).sum(-1).min(axis=1)
        np.maximum(out, np.exp(-d2 / (2 * width ** 2)), out=out)
    return out.reshape(h, w)


def texture_field(shape, seed: int, config: Optional[TextureConfig] = None) -> np.ndarray:
    """Band-limited noise plus dark vessel-like streaks; roughly in [-2, 1]."""
    config = config or TextureConfig()
    h, w = shape
    rng = np.random.default_rng(seed)
    scale = max(h, w) / 64.0
    noise = np.zeros((h, w))
    for sigma, weight in ((3.0, 0.5), (1.5, 0.3), (0.8, 0.2)):
        layer = gaussian_filter(rng.normal(size=(h, w)), sigma * scale, mode="wrap")
        noise += weight * layer / layer.std()
    noise = np.clip(noise / 2.0, -1.0, 1.0)
    return config.noise_amplitude * noise - config.streak_weight * _streaks(rng, h, w, config)


def apply_texture(image: np.ndarray, seed: int, strength: float, config: Optional[TextureConfig] = None) -> np.ndarray:
    """Multiply ``image`` by ``1 + strength * T(seed)`` and clamp to [0, 1]."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    image = np.asarray(image, dtype=np.float64)
    if strength == 0:
        return image.copy()
    return np.clip(image * (1.0 + strength * texture_field(image.shape, seed, config)), 0.0, 1.0)


# ---------------------------------------------------------------------------
# datasets


def split_counts(n: int, fractions: Sequence[float] = (0.55, 0.40)) -> tuple:
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(n: int, seed: int) -> List[str]:
    n_train, n_val, n_test = split_counts(n)
    tags = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    return tags[rng.permutation(n)].tolist()


def item_seed(seed: int, index: int) -> int:
    state = np.random.SeedSequence([seed, index]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


@dataclass
class DatasetManifest:
    path: Path
    records: List[ManifestRecord]
    clean_path: Optional[Path] = None


@dataclass
class RenderConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    view: ViewConfig = field(default_factory=ViewConfig)
    texture: TextureConfig = field(default_factory=TextureConfig)
    texture_strength: float = 0.6


def render_item(seed: int, config: Optional[RenderConfig] = None) -> RenderedPair:
    """One scene, one pose, one render: all drawn from ``seed``."""
    config = config or RenderConfig()
    ss = np.random.SeedSequence(seed)
    scene_ss, view_ss = ss.spawn(2)
    scene = make_scene(int(scene_ss.generate_state(1, dtype=np.uint64)[0]), config.scene)
    rng = np.random.default_rng(view_ss)
    for _ in range(50):
        camera, rig = sample_view(scene, rng, config.view)
        if scene.free_distance(camera.position[None])[0] > 0.05:
            break
    else:  # pragma: no cover - lateral offset is bounded well inside the lumen
        raise RuntimeError(f"could not place a camera inside scene {seed}")
    return render_view(scene, camera, rig, seed=seed)


def generate_dataset(n: int, seed: int, out_dir, textured: bool = False, config: Optional[RenderConfig] = None) -> DatasetManifest:
    """Render ``n`` image/depth pairs into ``out_dir`` and write ``manifest.tsv``.

    Textured datasets also keep the untextured render of every item under
    ``clean/`` with its own ``clean_manifest.tsv``.  On failure everything
    written by this call is removed.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    config = config or RenderConfig()
    out = Path(out_dir)
    created_root = not out.exists()
    subdirs = ["images", "depth"] + (["clean"] if textured else [])
    written: List[Path] = []
    made_dirs: List[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for sub in subdirs:
            d = out / sub
            if not d.exists():
                d.mkdir()
                made_dirs.append(d)
        splits = assign_splits(n, seed)
        records, clean_records = [], []
        for i in range(n):
            s = item_seed(seed, i)
            pair = render_item(s, config)
            img_rel, dep_rel = f"images/{i:05d}.pgm", f"depth/{i:05d}.dpth"
            image = pair.image
            if textured:
                clean_rel = f"clean/{i:05d}.pgm"
                write_pgm(out / clean_rel, image)
                written.append(out / clean_rel)
                clean_records.append(ManifestRecord(i, clean_rel, dep_rel, s, splits[i]))
                image = apply_texture(image, s ^ 0x7E47, config.texture_strength, config.texture)
            write_pgm(out / img_rel, image)
            written.append(out / img_rel)
            write_depth(out / dep_rel, pair.depth)
            written.append(out / dep_rel)
            records.append(ManifestRecord(i, img_rel, dep_rel, s, splits[i]))
            if (i + 1) % 50 == 0:
                logger.info("rendered %d/%d", i + 1, n)
        manifest = out / "manifest.tsv"
        write_manifest(manifest, records)
        written.append(manifest)
        clean_path = None
        if textured:
            clean_path = out / "clean_manifest.tsv"
            write_manifest(clean_path, clean_records)
            written.append(clean_path)
    except BaseException:
        for p in written:
            p.unlink(missing_ok=True)
        for d in reversed(made_dirs):
            shutil.rmtree(d, ignore_errors=True)
        if created_root:
            shutil.rmtree(out, ignore_errors=True)
        raise
    return DatasetManifest(manifest, read_manifest(manifest), clean_path)
