"""Synthetic indoor scenes (floor, two walls, primitive objects) and training augmentation."""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field

import numpy as np

from metricseg.errors import ValidationError
from metricseg.geometry import PointCloud

FLOOR, WALL, BOX, CYLINDER, SPHERE = 0, 1, 2, 3, 4
BACKGROUND_IDS = (FLOOR, WALL)
NO_INSTANCE = 0
CLASS_NAMES = {FLOOR: "floor", WALL: "wall", BOX: "box", CYLINDER: "cylinder", SPHERE: "sphere"}

FLOOR_RGB = (0.55, 0.45, 0.35)
WALL_RGB = (0.85, 0.83, 0.78)
# hue bands (in [0, 1), may wrap) for object colors
HUE_BANDS = {BOX: (-0.04, 0.06), CYLINDER: (0.26, 0.40), SPHERE: (0.55, 0.68)}


@dataclass(frozen=True)
class Archetype:
    kind: str
    semantic_id: int
    size_min: float
    size_max: float
    # boxes: size is the edge length; cylinders/spheres: radius
    height_min: float = 0.0
    height_max: float = 0.0


DEFAULT_ARCHETYPES = (
    Archetype("box", BOX, 0.25, 0.55, 0.3, 0.7),
    Archetype("cylinder", CYLINDER, 0.12, 0.22, 0.3, 0.8),
    Archetype("sphere", SPHERE, 0.15, 0.25),
)


@dataclass
class SceneConfig:
    room_extent: float = 2.5
    wall_height: float = 1.0
    min_objects: int = 2
    max_objects: int = 5
    archetypes: tuple = DEFAULT_ARCHETYPES
    point_density: float = 200.0
    contact_probability: float = 0.5
    position_noise: float = 0.003
    color_noise: float = 0.02
    clearance: float = 0.12
    max_retries: int = 200
    seed: int = 0

    def validate(self):
        if not (self.room_extent > 0 and self.wall_height > 0):
            raise ValidationError("room extents must be > 0")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValidationError(f"bad object count range [{self.min_objects}, {self.max_objects}]")
        if not 0.0 <= self.contact_probability <= 1.0:
            raise ValidationError(f"contact_probability {self.contact_probability} not in [0, 1]")
        if self.point_density <= 0:
            raise ValidationError("point_density must be > 0")
        if self.position_noise < 0 or self.color_noise < 0:
            raise ValidationError("noise levels must be >= 0")
        if not self.archetypes:
            raise ValidationError("no object archetypes")
        for a in self.archetypes:
            if a.kind not in ("box", "cylinder", "sphere") or not 0 < a.size_min <= a.size_max:
                raise ValidationError(f"bad archetype {a}")
            if a.kind != "sphere" and not 0 < a.height_min <= a.height_max:
                raise ValidationError(f"bad archetype height range {a}")


@dataclass
class Primitive:
    """An object resting on the floor. ``center`` is the footprint center (x, y)."""

    kind: str
    semantic_id: int
    center: np.ndarray
    size: tuple  # box: (sx, sy, sz); cylinder: (r, h); sphere: (r,)
    color: tuple = field(default=(0.5, 0.5, 0.5))

    def half_extent(self, axis):
        if self.kind == "box":
            return self.size[axis] / 2
        return self.size[0]

    @property
    def height(self):
        if self.kind == "box":
            return self.size[2]
        if self.kind == "cylinder":
            return self.size[1]
        return 2 * self.size[0]


def footprint_gap(a, b):
    """Horizontal gap between two footprints (rectangles / discs); <= 0 means overlap."""
    d = b.center - a.center
    if a.kind == "box" and b.kind == "box":
        gx = abs(d[0]) - (a.size[0] + b.size[0]) / 2
        gy = abs(d[1]) - (a.size[1] + b.size[1]) / 2
        if gx <= 0 and gy <= 0:
            return max(gx, gy)
        return math.hypot(max(gx, 0.0), max(gy, 0.0))
    if a.kind != "box" and b.kind != "box":
        return float(np.hypot(*d)) - a.size[0] - b.size[0]
    box, disc = (a, b) if a.kind == "box" else (b, a)
    rel = np.abs(disc.center - box.center) - np.array(box.size[:2]) / 2
    if (rel <= 0).all():
        return float(rel.max()) - disc.size[0]
    return float(np.hypot(*np.maximum(rel, 0.0))) - disc.size[0]


def _draw_primitive(arch, rng):
    if arch.kind == "box":
        sx, sy = rng.uniform(arch.size_min, arch.size_max, 2)
        size = (sx, sy, rng.uniform(arch.height_min, arch.height_max))
    elif arch.kind == "cylinder":
        size = (rng.uniform(arch.size_min, arch.size_max), rng.uniform(arch.height_min, arch.height_max))
    else:
        size = (rng.uniform(arch.size_min, arch.size_max),)
    lo, hi = HUE_BANDS.get(arch.semantic_id, (0.0, 1.0))
    hue = rng.uniform(lo, hi) % 1.0
    color = colorsys.hsv_to_rgb(hue, rng.uniform(0.5, 0.9), rng.uniform(0.4, 0.95))
    return Primitive(arch.kind, arch.semantic_id, np.zeros(2), size, tuple(color))


def _inside_room(p, cfg):
    ext = cfg.room_extent
    m = cfg.clearance
    for axis in (0, 1):
        h = p.half_extent(axis)
        if p.center[axis] - h < m or p.center[axis] + h > ext - m:
            return False
    return True


def _contact_offset(a, b, axis):
    # center distance along the contact axis so that the surfaces touch
    if a.kind == "sphere" and b.kind == "sphere":
        return 2 * math.sqrt(a.size[0] * b.size[0])
    return a.half_extent(axis) + b.half_extent(axis)


LAYOUT_RESTARTS = 20


def layout_scene(config, rng):
    """Place object primitives; returns the list in instance-id order (id = index + 1).

    A layout that gets stuck is restarted from scratch a bounded number of times.
    """
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    want_contact = n_obj >= 2 and rng.random() < config.contact_probability
    for _ in range(LAYOUT_RESTARTS):
        placed = _try_layout(config, rng, n_obj, want_contact)
        if placed is not None:
            return placed
    raise ValidationError(
        f"could not place {n_obj} objects within the room after {LAYOUT_RESTARTS} layouts "
        f"of {config.max_retries} tries per object"
    )


def _try_layout(cfg, rng, n_obj, want_contact):
    placed = []
    for idx in range(n_obj):
        arch = cfg.archetypes[int(rng.integers(len(cfg.archetypes)))]
        prim = _draw_primitive(arch, rng)
        contact_with = placed[int(rng.integers(len(placed)))] if (want_contact and idx == 1) else None
        for _ in range(cfg.max_retries):
            if contact_with is None:
                prim.center = rng.uniform(0, cfg.room_extent, 2)
            else:
                axis = int(rng.integers(2))
                sign = 1.0 if rng.random() < 0.5 else -1.0
                offset = np.zeros(2)
                offset[axis] = sign * _contact_offset(contact_with, prim, axis)
                if prim.kind == "box" and contact_with.kind == "box":
                    other = 1 - axis
                    slack = 0.5 * min(prim.size[other], contact_with.size[other]) / 2
                    offset[other] = rng.uniform(-slack, slack)
                prim.center = contact_with.center + offset
            if not _inside_room(prim, cfg):
                continue
            others = [q for q in placed if q is not contact_with]
            if all(footprint_gap(q, prim) >= cfg.clearance for q in others):
                placed.append(prim)
                break
        else:
            return None
    return placed


def _count(area, density, rng):
    return int(rng.poisson(area * density))


def _sample_box(p, density, rng):
    sx, sy, sz = p.size
    cx, cy = p.center
    faces = [  # (area, sampler)
        (sx * sy, lambda u, v: np.stack([cx + (u - 0.5) * sx, cy + (v - 0.5) * sy, np.full_like(u, sz)], 1)),
        (sy * sz, lambda u, v: np.stack([np.full_like(u, cx - sx / 2), cy + (u - 0.5) * sy, v * sz], 1)),
        (sy * sz, lambda u, v: np.stack([np.full_like(u, cx + sx / 2), cy + (u - 0.5) * sy, v * sz], 1)),
        (sx * sz, lambda u, v: np.stack([cx + (u - 0.5) * sx, np.full_like(u, cy - sy / 2), v * sz], 1)),
        (sx * sz, lambda u, v: np.stack([cx + (u - 0.5) * sx, np.full_like(u, cy + sy / 2), v * sz], 1)),
    ]
    out = []
    for area, fn in faces:
        k = _count(area, density, rng)
        out.append(fn(rng.random(k), rng.random(k)))
    return np.concatenate(out)


def _sample_cylinder(p, density, rng):
    r, h = p.size
    cx, cy = p.center
    k = _count(2 * math.pi * r * h, density, rng)
    th = rng.uniform(0, 2 * math.pi, k)
    side = np.stack([cx + r * np.cos(th), cy + r * np.sin(th), rng.uniform(0, h, k)], 1)
    k = _count(math.pi * r * r, density, rng)
    rad = r * np.sqrt(rng.random(k))
    th = rng.uniform(0, 2 * math.pi, k)
    top = np.stack([cx + rad * np.cos(th), cy + rad * np.sin(th), np.full(k, h)], 1)
    return np.concatenate([side, top])


def _sample_sphere(p, density, rng):
    r = p.size[0]
    k = _count(4 * math.pi * r * r, density, rng)
    v = rng.normal(size=(k, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r + np.array([p.center[0], p.center[1], r])


_SAMPLERS = {"box": _sample_box, "cylinder": _sample_cylinder, "sphere": _sample_sphere}


def _covered(xy, placed):
    hit = np.zeros(len(xy), dtype=bool)
    for p in placed:
        d = xy - p.center
        if p.kind == "box":
            hit |= (np.abs(d[:, 0]) <= p.size[0] / 2) & (np.abs(d[:, 1]) <= p.size[1] / 2)
        elif p.kind == "cylinder":
            hit |= (d ** 2).sum(1) <= p.size[0] ** 2
    return hit


def _noisy_colors(base, k, sigma, rng):
    return np.clip(np.asarray(base) + rng.normal(0, sigma, (k, 3)), 0.0, 1.0)


def generate_scene(config, seed=None, return_layout=False):
    """Sample a labeled point cloud; the same (config, seed) always gives the same cloud.

    Background points carry semantic ids 0 (floor) / 1 (wall) and instance id 0;
    objects carry instance ids 1..K.
    """
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    placed = layout_scene(config, rng)
    ext, hgt, rho = config.room_extent, config.wall_height, config.point_density

    parts = []  # (positions, colors, instance, semantic)
    k = _count(ext * ext, rho, rng)
    floor = np.column_stack([rng.uniform(0, ext, (k, 2)), np.zeros(k)])
    floor = floor[~_covered(floor[:, :2], placed)]
    parts.append((floor, _noisy_colors(FLOOR_RGB, len(floor), config.color_noise, rng), NO_INSTANCE, FLOOR))
    for axis in (0, 1):
        k = _count(ext * hgt, rho, rng)
        wall = np.zeros((k, 3))
        wall[:, 1 - axis] = rng.uniform(0, ext, k)
        wall[:, 2] = rng.uniform(0, hgt, k)
        parts.append((wall, _noisy_colors(WALL_RGB, k, config.color_noise, rng), NO_INSTANCE, WALL))
    for inst, p in enumerate(placed, start=1):
        pts = _SAMPLERS[p.kind](p, rho, rng)
        parts.append((pts, _noisy_colors(p.color, len(pts), config.color_noise, rng), inst, p.semantic_id))

    pos = np.concatenate([q[0] for q in parts])
    pos = pos + rng.normal(0, config.position_noise, pos.shape)
    cloud = PointCloud(
        pos,
        np.concatenate([q[1] for q in parts]),
        np.concatenate([np.full(len(q[0]), q[2]) for q in parts]),
        np.concatenate([np.full(len(q[0]), q[3]) for q in parts]),
    )
    return (cloud, placed) if return_layout else cloud


# --- augmentation ----------------------------------------------------------


@dataclass
class AugmentConfig:
    color_sigma: float = 0.03
    scale_min: float = 0.8
    scale_max: float = 1.2
    rotate_z: bool = True
    x_rot_sigma_deg: float = 5.0
    x_rot_max_deg: float = 10.0


def sample_x_rotation(rng, size=None, sigma_deg=5.0, max_deg=10.0):
    """Gaussian tilt angle in degrees, clipped (not resampled) at +-max_deg."""
    return np.clip(rng.normal(0.0, sigma_deg, size), -max_deg, max_deg)


def rotation_z(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_x(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def augment(cloud, seed, config=None):
    """Color jitter, global scale, z rotation and small x tilt about the centroid.

    Labels and point order are untouched.
    """
    cfg = config or AugmentConfig()
    if len(cloud) == 0:
        raise ValidationError("empty input")
    rng = np.random.default_rng(seed)
    colors = cloud.colors
    if cfg.color_sigma > 0:
        colors = np.clip(colors + rng.normal(0.0, cfg.color_sigma, colors.shape), 0.0, 1.0)
    else:
        colors = colors.copy()
    scale = rng.uniform(cfg.scale_min, cfg.scale_max) if cfg.scale_max > cfg.scale_min else cfg.scale_min
    theta_z = rng.uniform(0.0, 2 * math.pi) if cfg.rotate_z else 0.0
    tilt = sample_x_rotation(rng, None, cfg.x_rot_sigma_deg, cfg.x_rot_max_deg) if cfg.x_rot_sigma_deg > 0 else 0.0
    rot = rotation_x(math.radians(float(tilt))) @ rotation_z(theta_z)

    if scale == 1.0 and theta_z == 0.0 and tilt == 0.0:
        pos = cloud.positions.copy()
    else:
        center = cloud.positions.mean(axis=0)
        pos = (scale * (cloud.positions - center)) @ rot.T + center
    return PointCloud(
        pos,
        colors,
        None if cloud.instance_ids is None else cloud.instance_ids.copy(),
        None if cloud.semantic_ids is None else cloud.semantic_ids.copy(),
    )
