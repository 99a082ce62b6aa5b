"""Procedural labeled indoor scenes and the point-splat renderer.

A scene is a room shell (floor / walls / ceiling) plus a handful of
parametric furniture-like objects, every point carrying a category id and
a 6-channel appearance vector (category base color/normal plus Gaussian
noise).  Rendering splats points through the z-buffer correspondence, so
the pixel/point association of every view is exact by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError
from .geometry import Camera, build_correspondence, look_at_camera

VOID = -1            # label_image / point_index value for empty pixels
N_APPEARANCE = 6     # RGB-like triplet + normal-like triplet
ROOM = (6.0, 6.0, 3.0)
MIN_POINTS = 2000
MIN_CATEGORIES = 6
MIN_PER_CATEGORY = 50
MAX_OBJECTS = 10
_APPEARANCE_SEED = 0x5CE4E   # global: category look is shared across scenes

FLOOR, WALL, CEILING = 0, 1, 2

_OBJECT_NAMES = (
    "table", "chair", "sofa", "bed", "cabinet",
    "lamp", "shelf", "crate", "ball", "column",
)


def default_category_names(n_categories: int) -> Tuple[str, ...]:
    names = ["floor", "wall", "ceiling"]
    for k in range(n_categories - 3):
        names.append(_OBJECT_NAMES[k] if k < len(_OBJECT_NAMES) else f"object_{k}")
    return tuple(names[:n_categories])


def category_appearance_basis(n_categories: int) -> np.ndarray:
    """Fixed per-category appearance vectors, identical for every scene."""
    rng = np.random.default_rng(_APPEARANCE_SEED)
    rgb = rng.uniform(0.08, 0.92, size=(n_categories, 3))
    normals = rng.normal(size=(n_categories, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return np.concatenate([rgb, normals], axis=1)


@dataclass(frozen=True)
class CategoryPartition:
    """Split of category ids into supervised (base) and withheld (novel)."""

    base_ids: Tuple[int, ...]
    novel_ids: Tuple[int, ...]

    def __post_init__(self):
        base = tuple(int(i) for i in self.base_ids)
        novel = tuple(int(i) for i in self.novel_ids)
        object.__setattr__(self, "base_ids", base)
        object.__setattr__(self, "novel_ids", novel)
        if set(base) & set(novel):
            raise ConfigError("base and novel categories overlap")
        ids = sorted(set(base) | set(novel))
        if ids != list(range(len(ids))):
            raise ConfigError("partition must cover 0..L-1 without gaps")

    @property
    def n_categories(self) -> int:
        return len(self.base_ids) + len(self.novel_ids)

    def base_mask(self) -> np.ndarray:
        m = np.zeros(self.n_categories, dtype=bool)
        m[list(self.base_ids)] = True
        return m

    @classmethod
    def default(cls, n_base: int = 8, n_novel: int = 4) -> "CategoryPartition":
        return cls(tuple(range(n_base)), tuple(range(n_base, n_base + n_novel)))


@dataclass
class Scene:
    positions: np.ndarray    # (N,3) meters
    attributes: np.ndarray   # (N,6) appearance
    labels: np.ndarray       # (N,) category ids in [0, n_categories)
    cameras: Tuple[Camera, ...]
    scene_id: int
    n_categories: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.n_categories
        ):
            raise ConfigError("labels outside [0, n_categories)")

    @property
    def n_points(self) -> int:
        return int(self.positions.shape[0])


@dataclass
class RenderedView:
    appearance: np.ndarray   # (H,W,6); zero where VOID
    label_image: np.ndarray  # (H,W) int64, VOID where empty
    point_index: np.ndarray  # (H,W) int64, VOID where empty
    camera: Camera

    def __post_init__(self):
        if not np.array_equal(self.point_index < 0, self.label_image < 0):
            raise ValueError("point_index / label_image VOID masks disagree")


# ---------------------------------------------------------------------------
# surface samplers

def _sample_rect(rng, origin, edge_a, edge_b, n):
    t = rng.uniform(size=(n, 1))
    s = rng.uniform(size=(n, 1))
    return origin + t * edge_a + s * edge_b


def _sample_box(rng, center, half, n):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-1.0, 1.0, size=n)
    pts = np.empty((n, 3))
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    ax = face // 2  # 0: +-x, 1: +-y, 2: +-z
    for a in range(3):
        sel = ax == a
        b, c = [d for d in range(3) if d != a]
        pts[sel, a] = sign[sel] * half[a]
        pts[sel, b] = u[sel] * half[b]
        pts[sel, c] = v[sel] * half[c]
    return pts + center


def _sample_cylinder(rng, center, radius, height, n):
    lateral = 2 * np.pi * radius * height
    caps = np.pi * radius ** 2
    p = np.array([lateral, caps, caps])
    part = rng.choice(3, size=n, p=p / p.sum())
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    lat = part == 0
    pts[lat, 0] = radius * np.cos(theta[lat])
    pts[lat, 1] = radius * np.sin(theta[lat])
    pts[lat, 2] = rng.uniform(-height / 2, height / 2, size=lat.sum())
    for which, z in ((1, height / 2), (2, -height / 2)):
        sel = part == which
        r = radius * np.sqrt(rng.uniform(size=sel.sum()))
        pts[sel, 0] = r * np.cos(theta[sel])
        pts[sel, 1] = r * np.sin(theta[sel])
        pts[sel, 2] = z
    return pts + center


def _sample_sphere(rng, center, radius, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _object_templates():
    """(name, sampler-factory) pairs; factory(rng) -> (sampler, area)."""

    def box(rng):
        half = np.array([rng.uniform(0.25, 0.7), rng.uniform(0.25, 0.7),
                         rng.uniform(0.25, 0.55)])
        center = _floor_center(rng, half[2])
        area = 8 * (half[0] * half[1] + half[0] * half[2] + half[1] * half[2])
        return (lambda r, n: _sample_box(r, center, half, n)), area

    def cylinder(rng):
        radius = rng.uniform(0.2, 0.45)
        height = rng.uniform(0.5, 1.2)
        center = _floor_center(rng, height / 2)
        area = 2 * np.pi * radius * height + 2 * np.pi * radius ** 2
        return (lambda r, n: _sample_cylinder(r, center, radius, height, n)), area

    def sphere(rng):
        radius = rng.uniform(0.25, 0.5)
        center = _floor_center(rng, radius)
        return (lambda r, n: _sample_sphere(r, center, radius, n)), 4 * np.pi * radius ** 2

    def table(rng):
        top_half = np.array([rng.uniform(0.4, 0.7), rng.uniform(0.3, 0.5), 0.04])
        h = rng.uniform(0.6, 0.8)
        center = _floor_center(rng, h)
        leg_half = np.array([0.04, 0.04, h / 2])
        legs = [
            center + np.array([sx * (top_half[0] - 0.08), sy * (top_half[1] - 0.08),
                               -h / 2])
            for sx in (-1, 1) for sy in (-1, 1)
        ]
        top_area = 8 * (top_half[0] * top_half[1])
        leg_area = 4 * 8 * (leg_half[0] * leg_half[2])

        def sampler(r, n):
            n_top = max(1, int(round(n * top_area / (top_area + leg_area))))
            parts = [_sample_box(r, center, top_half, n_top)]
            rest = n - n_top
            for i, leg in enumerate(legs):
                k = rest // 4 + (1 if i < rest % 4 else 0)
                if k > 0:
                    parts.append(_sample_box(r, leg, leg_half, k))
            return np.concatenate(parts, axis=0)

        return sampler, top_area + leg_area

    def lamp(rng):
        pole_r, pole_h = 0.04, rng.uniform(1.0, 1.6)
        head_r = rng.uniform(0.18, 0.3)
        base = _floor_center(rng, pole_h / 2)
        head = base + np.array([0.0, 0.0, pole_h / 2 + head_r * 0.7])
        pole_area = 2 * np.pi * pole_r * pole_h
        head_area = 4 * np.pi * head_r ** 2

        def sampler(r, n):
            n_pole = max(1, int(round(n * pole_area / (pole_area + head_area))))
            return np.concatenate([
                _sample_cylinder(r, base, pole_r, pole_h, n_pole),
                _sample_sphere(r, head, head_r, max(1, n - n_pole)),
            ], axis=0)

        return sampler, pole_area + head_area

    return (box, cylinder, sphere, table, lamp)


def _floor_center(rng, half_height):
    x = rng.uniform(1.0, ROOM[0] - 1.0)
    y = rng.uniform(1.0, ROOM[1] - 1.0)
    return np.array([x, y, half_height])


def _sample_shell(rng, n_floor, n_wall, n_ceil):
    w, d, h = ROOM
    ex = np.array([w, 0, 0.0])
    ey = np.array([0, d, 0.0])
    ez = np.array([0, 0, h])
    floor = _sample_rect(rng, np.zeros(3), ex, ey, n_floor)
    ceil = _sample_rect(rng, np.array([0, 0, h]), ex, ey, n_ceil)
    walls = []
    sides = [
        (np.zeros(3), ex, ez), (np.array([0, d, 0.0]), ex, ez),
        (np.zeros(3), ey, ez), (np.array([w, 0, 0.0]), ey, ez),
    ]
    for i, (o, a, b) in enumerate(sides):
        k = n_wall // 4 + (1 if i < n_wall % 4 else 0)
        walls.append(_sample_rect(rng, o, a, b, k))
    return floor, np.concatenate(walls, axis=0), ceil


def _scene_cameras(rng, views, image_size):
    center = np.array([ROOM[0] / 2, ROOM[1] / 2, 0.0])
    cams = []
    for v in range(views):
        theta = 2 * np.pi * (v + rng.uniform(-0.15, 0.15)) / views
        radius = rng.uniform(2.0, 2.7)
        eye = center + np.array([radius * np.cos(theta), radius * np.sin(theta),
                                 rng.uniform(1.3, 2.1)])
        target = center + np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                                    rng.uniform(0.7, 1.4)])
        focal = rng.uniform(0.62, 0.85) * image_size
        jx, jy = rng.uniform(-1.0, 1.0, size=2)
        cams.append(look_at_camera(
            eye, target, image_size, image_size, focal,
            cx=(image_size - 1) / 2 + jx, cy=(image_size - 1) / 2 + jy,
        ))
    return tuple(cams)


def generate_scene(
    seed: int,
    n_points: int = 4096,
    partition: CategoryPartition | None = None,
    n_categories: int = 12,
    views: int = 4,
    image_size: int = 64,
) -> Scene:
    """Deterministically generate one labeled scene with posed cameras."""
    if n_points < MIN_POINTS:
        raise ConfigError(f"n_points must be >= {MIN_POINTS}, got {n_points}")
    if n_categories < MIN_CATEGORIES:
        raise ConfigError(f"need at least {MIN_CATEGORIES} categories")
    if partition is not None and partition.n_categories != n_categories:
        raise ConfigError("partition size disagrees with n_categories")
    n_object_cats = n_categories - 3
    if n_object_cats > MAX_OBJECTS:
        raise ConfigError(
            f"{n_categories} categories exceed the {MAX_OBJECTS}-object template capacity"
        )

    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    templates = _object_templates()

    headroom = MAX_OBJECTS - n_object_cats
    n_objects = max(4, n_object_cats + (int(rng.integers(0, headroom + 1)) if headroom else 0))
    n_objects = min(n_objects, MAX_OBJECTS)
    object_cats = [3 + k for k in range(n_object_cats)]
    object_cats += [3 + int(rng.integers(0, n_object_cats))
                    for _ in range(n_objects - n_object_cats)]

    samplers, areas = [], []
    for cat in object_cats:
        sampler, area = templates[(cat - 3) % len(templates)](rng)
        samplers.append(sampler)
        areas.append(area)
    areas = np.asarray(areas)

    n_floor = int(round(0.18 * n_points))
    n_ceil = int(round(0.10 * n_points))
    n_wall = int(round(0.27 * n_points))
    n_obj_total = n_points - n_floor - n_ceil - n_wall
    raw = np.floor(areas / areas.sum() * n_obj_total).astype(int)
    raw = np.maximum(raw, MIN_PER_CATEGORY)
    while raw.sum() > n_obj_total:
        i = int(np.argmax(raw))
        raw[i] -= 1
    raw[int(np.argmax(areas))] += n_obj_total - raw.sum()

    floor, walls, ceil = _sample_shell(rng, n_floor, n_wall, n_ceil)
    parts = [floor, walls, ceil]
    labels = [np.full(n_floor, FLOOR), np.full(walls.shape[0], WALL),
              np.full(n_ceil, CEILING)]
    for cat, sampler, k in zip(object_cats, samplers, raw):
        parts.append(sampler(rng, int(k)))
        labels.append(np.full(int(k), cat))
    positions = np.concatenate(parts, axis=0)
    label_arr = np.concatenate(labels, axis=0).astype(np.int64)

    perm = rng.permutation(positions.shape[0])
    positions = positions[perm]
    label_arr = label_arr[perm]

    basis = category_appearance_basis(n_categories)
    attributes = basis[label_arr] + rng.normal(0.0, 0.05, size=(n_points, N_APPEARANCE))

    counts = np.bincount(label_arr, minlength=n_categories)
    if counts.min() < MIN_PER_CATEGORY:
        raise ConfigError(
            f"category {int(np.argmin(counts))} received {counts.min()} points"
        )

    cams = _scene_cameras(rng, views, image_size)
    return Scene(positions, attributes, label_arr, cams, int(seed), n_categories)


def render_view(scene: Scene, cam: Camera) -> RenderedView:
    """Point-splat render: per pixel the z-buffer winner's attributes/label."""
    corr = build_correspondence(scene.positions, cam)
    h, w = cam.height, cam.width
    appearance = np.zeros((h, w, scene.attributes.shape[1]))
    label_image = np.full((h, w), VOID, dtype=np.int64)
    point_index = np.full((h, w), VOID, dtype=np.int64)
    r, c, p = corr.pixel_row, corr.pixel_col, corr.point_index
    appearance[r, c] = scene.attributes[p]
    label_image[r, c] = scene.labels[p]
    point_index[r, c] = p
    return RenderedView(appearance, label_image, point_index, cam)


# ---------------------------------------------------------------------------
# scene container format: little-endian, magic "XM3D"

_MAGIC = b"XM3D"
_VERSION = 1


def write_scene_file(scene: Scene, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, scene.n_points,
                             scene.attributes.shape[1], scene.n_categories,
                             len(scene.cameras)))
        fh.write(np.ascontiguousarray(scene.positions, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(scene.attributes, dtype="<f8").tobytes())
        fh.write(scene.labels.astype("<u2").tobytes())
        for cam in scene.cameras:
            fh.write(np.ascontiguousarray(cam.K, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(cam.V, dtype="<f8").tobytes())
            fh.write(struct.pack("<II", cam.height, cam.width))


def read_scene_file(path, scene_id: int = 0) -> Scene:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ConfigError(f"{path}: not a scene container")
        version, n, a, n_cat, n_cams = struct.unpack("<IIIII", fh.read(20))
        if version != _VERSION:
            raise ConfigError(f"{path}: unsupported container version {version}")
        positions = np.frombuffer(fh.read(n * 3 * 8), dtype="<f8").reshape(n, 3)
        attributes = np.frombuffer(fh.read(n * a * 8), dtype="<f8").reshape(n, a)
        labels = np.frombuffer(fh.read(n * 2), dtype="<u2").astype(np.int64)
        cams = []
        for _ in range(n_cams):
            K = np.frombuffer(fh.read(72), dtype="<f8").reshape(3, 3)
            V = np.frombuffer(fh.read(128), dtype="<f8").reshape(4, 4)
            h, w = struct.unpack("<II", fh.read(8))
            cams.append(Camera(K=K.copy(), V=V.copy(), height=h, width=w))
    return Scene(positions.copy(), attributes.copy(), labels, tuple(cams),
                 scene_id, n_cat)
