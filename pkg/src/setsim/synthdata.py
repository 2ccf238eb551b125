"""Synthetic labeled scenes and two-view augmentation with exact geometry.

Scenes are small RGB images of flat-colored shapes (disk, square,
triangle) on a dark textured background. Views are produced by an
integer crop, nearest-neighbor resize, optional horizontal flip and an
additive per-channel color shift. Because every step is recorded in a
:class:`ViewTransform`, grid cells of any view can be mapped back to
source pixels exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "triangle")

MIN_HUE_GAP = 0.12


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _object_colors(rng: np.random.Generator, n: int) -> list[np.ndarray]:
    """Bright saturated colors whose hues differ by at least MIN_HUE_GAP."""
    hues: list[float] = []
    while len(hues) < n:
        h = float(rng.uniform())
        if all(min(abs(h - g), 1 - abs(h - g)) >= MIN_HUE_GAP for g in hues):
            hues.append(h)
    return [_hsv_to_rgb(h, rng.uniform(0.6, 1.0), rng.uniform(0.75, 1.0)) for h in hues]


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_radius: float = 0.14  # fraction of size
    max_radius: float = 0.26

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("scene size must be at least 32")
        if not 1 <= self.min_objects <= self.max_objects <= 3:
            raise ValueError("object count must lie in 1..3")


@dataclass
class Scene:
    image: np.ndarray  # 3 x S x S in [0, 1]
    object_mask: np.ndarray  # S x S int, 0 = background
    class_label: int
    scene_id: int = 0
    shapes: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class ViewTransform:
    crop_x: int
    crop_y: int
    crop_w: int
    crop_h: int
    flip: bool = False
    out_size: int = 32
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def check(self, source_size: int) -> None:
        if self.out_size < 8:
            raise ValueError("out_size must be at least 8")
        if (self.crop_x < 0 or self.crop_y < 0 or self.crop_w < 1 or self.crop_h < 1
                or self.crop_x + self.crop_w > source_size
                or self.crop_y + self.crop_h > source_size):
            raise ValueError(f"crop {self} leaves the {source_size}px source image")

    def cell_centers(self, grid: int) -> np.ndarray:
        """Source-space (x, y) centers of the ``grid x grid`` cells, flat row-major."""
        rows, cols = np.divmod(np.arange(grid * grid), grid)
        u = (cols + 0.5) / grid  # fractional position inside the view
        if self.flip:
            u = 1.0 - u
        v = (rows + 0.5) / grid
        return np.stack([self.crop_x + u * self.crop_w, self.crop_y + v * self.crop_h], axis=1)


@dataclass
class ViewPair:
    view_q: np.ndarray
    view_k: np.ndarray
    t_q: ViewTransform
    t_k: ViewTransform
    scene_ref: int


@dataclass(frozen=True)
class AugmentationPolicy:
    scale: tuple[float, float] = (0.5, 1.0)  # fraction of source area
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    color_shift: float = 0.03
    out_size: int = 32

    def __post_init__(self):
        lo, hi = self.scale
        if not 0.3 <= lo <= hi <= 1.0:
            raise ValueError("crop scale range must lie within [0.3, 1.0]")
        if not 0.0 <= self.color_shift <= 0.2:
            raise ValueError("color shift must lie within [0, 0.2]")


@dataclass
class GeoCorrespondence:
    pairs: list[tuple[int, int]]
    overlap_fraction: float


# All shapes share the area of a disk of radius r.
_SQUARE_HALF = math.sqrt(math.pi) / 2
_TRIANGLE_INRADIUS = math.sqrt(math.pi / (3 * math.sqrt(3)))
_EXTENT = (1.0, _SQUARE_HALF * math.sqrt(2), 2 * _TRIANGLE_INRADIUS)


def _shape_mask(kind: int, cx: float, cy: float, r: float, angle: float, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    if SHAPES[kind] == "disk":
        return dx * dx + dy * dy <= r * r
    c, s = math.cos(angle), math.sin(angle)
    ux, uy = c * dx + s * dy, -s * dx + c * dy
    if SHAPES[kind] == "square":
        half = r * _SQUARE_HALF
        return (np.abs(ux) <= half) & (np.abs(uy) <= half)
    inside = np.ones_like(ux, dtype=bool)
    for k in range(3):
        th = angle + math.pi / 2 + 2 * math.pi * k / 3
        nx, ny = math.cos(th), math.sin(th)
        inside &= dx * nx + dy * ny <= r * _TRIANGLE_INRADIUS
    return inside


def generate_scene(rng_seed: int, spec: SceneSpec | None = None) -> Scene:
    """Render a deterministic scene for ``rng_seed``."""
    spec = spec or SceneSpec()
    rng = _rng(rng_seed, 0x5CE)
    s = spec.size
    ys, xs = np.mgrid[0:s, 0:s]
    # low-contrast texture: a couple of sinusoids plus fine noise
    base = rng.uniform(0.05, 0.3, size=3)
    fx, fy = rng.uniform(0.1, 0.5, size=2)
    phase = rng.uniform(0, 2 * math.pi)
    wave = 0.06 * np.sin(fx * xs + fy * ys + phase)
    noise = rng.uniform(-0.04, 0.04, size=(3, s, s))
    image = np.clip(base[:, None, None] + wave[None] + noise, 0.0, 1.0)
    mask = np.zeros((s, s), dtype=np.int64)

    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    colors = _object_colors(rng, n_obj)
    shapes = []
    for obj in range(n_obj):
        kind = int(rng.integers(len(SHAPES)))
        r = rng.uniform(spec.min_radius, spec.max_radius) * s
        reach = min(r * _EXTENT[kind], s / 2 - 1)
        cx = rng.uniform(reach, s - reach)
        cy = rng.uniform(reach, s - reach)
        angle = rng.uniform(0, 2 * math.pi)
        covered = _shape_mask(kind, cx, cy, r, angle, s)
        if not covered.any():
            covered[int(cy), int(cx)] = True
        image[:, covered] = colors[obj][:, None]
        mask[covered] = obj + 1
        shapes.append(kind)

    areas = np.bincount(mask.ravel(), minlength=n_obj + 1)[1:]
    dominant = int(np.argmax(areas))
    return Scene(image=image, object_mask=mask, class_label=shapes[dominant],
                 scene_id=int(rng_seed), shapes=shapes)


def _source_index(t: ViewTransform) -> tuple[np.ndarray, np.ndarray]:
    """Source row/column sampled by each output pixel before the flip."""
    v = t.out_size
    cols = t.crop_x + ((np.arange(v) + 0.5) * t.crop_w / v).astype(np.int64)
    rows = t.crop_y + ((np.arange(v) + 0.5) * t.crop_h / v).astype(np.int64)
    return rows, cols


def render_view(scene: Scene, t: ViewTransform) -> np.ndarray:
    t.check(scene.image.shape[1])
    rows, cols = _source_index(t)
    view = scene.image[:, rows[:, None], cols[None, :]]
    if t.flip:
        view = view[:, :, ::-1]
    view = view + np.asarray(t.color_shift, dtype=np.float64)[:, None, None]
    return np.ascontiguousarray(np.clip(view, 0.0, 1.0))


def sample_transform(rng: np.random.Generator, source_size: int,
                     policy: AugmentationPolicy) -> ViewTransform:
    area = source_size * source_size
    for _ in range(20):
        target = rng.uniform(*policy.scale) * area
        log_r = rng.uniform(math.log(policy.ratio[0]), math.log(policy.ratio[1]))
        ratio = math.exp(log_r)
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 1 <= w <= source_size and 1 <= h <= source_size:
            break
    else:
        w = h = int(round(math.sqrt(policy.scale[1]) * source_size))
    x = int(rng.integers(0, source_size - w + 1))
    y = int(rng.integers(0, source_size - h + 1))
    flip = bool(rng.uniform() < policy.flip_prob)
    shift = tuple(float(c) for c in rng.uniform(-policy.color_shift, policy.color_shift, size=3))
    return ViewTransform(x, y, w, h, flip, policy.out_size, shift)


def sample_view_pair(scene: Scene, rng_seed: int,
                     policy: AugmentationPolicy | None = None) -> ViewPair:
    policy = policy or AugmentationPolicy()
    rng = _rng(rng_seed, 0xA06)
    size = scene.image.shape[1]
    t_q = sample_transform(rng, size, policy)
    t_k = sample_transform(rng, size, policy)
    return ViewPair(render_view(scene, t_q), render_view(scene, t_k), t_q, t_k, scene.scene_id)


def full_view(scene: Scene, out_size: int = 32) -> ViewTransform:
    s = scene.image.shape[1]
    return ViewTransform(0, 0, s, s, False, out_size)


def crops_overlap(t_q: ViewTransform, t_k: ViewTransform) -> bool:
    w = min(t_q.crop_x + t_q.crop_w, t_k.crop_x + t_k.crop_w) - max(t_q.crop_x, t_k.crop_x)
    h = min(t_q.crop_y + t_q.crop_h, t_k.crop_y + t_k.crop_h) - max(t_q.crop_y, t_k.crop_y)
    return w > 0 and h > 0


def crop_overlap_fraction(t_q: ViewTransform, t_k: ViewTransform) -> float:
    """Intersection area over the smaller crop area."""
    w = min(t_q.crop_x + t_q.crop_w, t_k.crop_x + t_k.crop_w) - max(t_q.crop_x, t_k.crop_x)
    h = min(t_q.crop_y + t_q.crop_h, t_k.crop_y + t_k.crop_h) - max(t_q.crop_y, t_k.crop_y)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h / min(t_q.crop_w * t_q.crop_h, t_k.crop_w * t_k.crop_h)


def geometry_correspondence(t_q: ViewTransform, t_k: ViewTransform, grid: int) -> GeoCorrespondence:
    """Pair each query cell with the key cell whose source-space center is nearest.

    A pair is kept only when that distance is below one key-cell width.
    Crops without positive-area overlap never produce pairs.
    """
    if grid < 1:
        raise ValueError("grid must be positive")
    if not crops_overlap(t_q, t_k):
        return GeoCorrespondence([], 0.0)
    cq = t_q.cell_centers(grid)
    ck = t_k.cell_centers(grid)
    dist = np.sqrt(((cq[:, None, :] - ck[None, :, :]) ** 2).sum(axis=-1))
    nearest = np.argmin(dist, axis=1)  # first index on ties
    width = t_k.crop_w / grid
    pairs = [(i, int(j)) for i, j in enumerate(nearest) if dist[i, j] < width]
    return GeoCorrespondence(pairs, len(pairs) / (grid * grid))


def mask_at_grid(scene: Scene, t: ViewTransform, grid: int) -> np.ndarray:
    """Majority object label of the source pixels under each view grid cell.

    A source pixel belongs to a cell when its center falls inside the
    cell's source rectangle. Ties go to the lowest label.
    """
    t.check(scene.object_mask.shape[0])
    mask = scene.object_mask
    n_labels = int(mask.max()) + 1
    centers_x = np.arange(t.crop_x, t.crop_x + t.crop_w) + 0.5
    centers_y = np.arange(t.crop_y, t.crop_y + t.crop_h) + 0.5
    col_cell = np.floor((centers_x - t.crop_x) * grid / t.crop_w).astype(np.int64)
    row_cell = np.floor((centers_y - t.crop_y) * grid / t.crop_h).astype(np.int64)
    sub = mask[t.crop_y : t.crop_y + t.crop_h, t.crop_x : t.crop_x + t.crop_w]
    cell = row_cell[:, None] * grid + col_cell[None, :]
    counts = np.bincount((cell * n_labels + sub).ravel(),
                         minlength=grid * grid * n_labels).reshape(grid * grid, n_labels)
    labels = np.argmax(counts, axis=1).reshape(grid, grid)
    if t.flip:
        labels = labels[:, ::-1]
    return np.ascontiguousarray(labels)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 file from a 3 x H x W array in [0, 1]."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    data = np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data)


def write_pgm(path, gray: np.ndarray, scale: float = 255.0) -> None:
    """Binary P5 file; values are multiplied by ``scale`` then rounded."""
    img = np.clip(np.round(np.asarray(gray, dtype=np.float64) * scale), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a file written by :func:`write_ppm` / :func:`write_pgm` as uint8."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    body = np.frombuffer(raw[pos:], dtype=np.uint8)
    if magic == "P6":
        return body.reshape(h, w, 3).transpose(2, 0, 1).copy()
    if magic == "P5":
        return body.reshape(h, w).copy()
    raise ValueError(f"unsupported image format {magic!r}")
