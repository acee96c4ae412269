"""Synthetic foreground/background scenes and the analytic rationality oracle.

A scene is a low-resolution raster of region kinds (ground, water, sky) plus one
foreground object. Each foreground category carries a rule: the regions it may
rest on, a window of plausible widths, and a height/width aspect. The oracle
labels a placement rational when the bottom strip of its box rests entirely on
compatible regions, its width is inside the window and its aspect matches.

Placements are normalized boxes ``(x, y, w, h)`` with ``(x, y)`` the box center,
``x`` along columns and ``y`` along rows (row 0 is the top of the image).
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .streams import rng_stream

DEFAULT_PALETTE = ("GROUND", "WATER", "SKY")
ASPECT_TOLERANCE = 0.25  # relative to the category aspect
SUPPORT_FRACTION = 0.2  # bottom share of the box that must rest on compatible cells
DEFAULT_SAMPLING_RANGE = (0.08, 0.4)
SIZE_CODE_RANGE = (0.05, 0.6)
FG_RASTER_ROWS = 8
_EPS = 1e-9


@dataclass(frozen=True)
class SceneSpec:
    grid_size: int = 64
    region_palette: tuple[str, ...] = DEFAULT_PALETTE
    num_categories: int = 10
    water_fraction: float = 0.3
    seed: int = 0
    sampling_range: tuple[float, float] = DEFAULT_SAMPLING_RANGE

    def __post_init__(self):
        object.__setattr__(self, "region_palette", tuple(self.region_palette))
        object.__setattr__(self, "sampling_range", tuple(float(v) for v in self.sampling_range))
        if self.grid_size < 8:
            raise ValueError(f"grid_size must be >= 8, got {self.grid_size}")
        if self.num_categories < 2:
            raise ValueError(f"num_categories must be >= 2, got {self.num_categories}")
        if not 0.0 <= self.water_fraction <= 1.0:
            raise ValueError(f"water_fraction must lie in [0, 1], got {self.water_fraction}")
        if not self.region_palette or len(set(self.region_palette)) != len(self.region_palette):
            raise ValueError("region_palette must be a non-empty list of distinct kinds")
        lo, hi = self.sampling_range
        if not 0.0 < lo < hi <= 1.0:
            raise ValueError(f"sampling_range must satisfy 0 < lo < hi <= 1, got {self.sampling_range}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region_palette"] = list(self.region_palette)
        d["sampling_range"] = list(self.sampling_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def spec_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    def kind(self, name: str) -> int | None:
        return self.region_palette.index(name) if name in self.region_palette else None


@dataclass(frozen=True)
class Placement:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"placement width and height must be positive, got w={self.w}, h={self.h}")

    def contained(self) -> bool:
        return box_contained(self.as_array())

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Placement":
        x, y, w, h = (float(v) for v in a)
        return cls(x, y, w, h)


def box_contained(boxes) -> np.ndarray | bool:
    """True where ``[x +- w/2, y +- h/2]`` lies inside the unit square."""
    b = np.asarray(boxes, dtype=np.float64)
    x, y, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    ok = (
        (w > 0) & (h > 0)
        & (x - w / 2 >= -_EPS) & (x + w / 2 <= 1 + _EPS)
        & (y - h / 2 >= -_EPS) & (y + h / 2 <= 1 + _EPS)
    )
    return bool(ok) if ok.ndim == 0 else ok


@dataclass(frozen=True)
class CategoryRule:
    category: int
    compatible_regions: frozenset
    scale_range: tuple[float, float]
    aspect: float


def _compat_patterns(spec: SceneSpec) -> list[frozenset]:
    patterns = [frozenset([k]) for k in range(len(spec.region_palette))]
    ground, water = spec.kind("GROUND"), spec.kind("WATER")
    if ground is not None and water is not None:
        patterns.append(frozenset([ground, water]))
    return patterns


def category_table(spec: SceneSpec) -> list[CategoryRule]:
    """Per-category rules, fixed by ``spec.seed``.

    Categories cycle through the compatibility patterns so any window of
    consecutive ids covers every pattern; sizes and aspects are drawn per
    category, so held-out categories pair known patterns with unseen sizes.
    """
    rng = rng_stream(spec.seed, "categories")
    patterns = _compat_patterns(spec)
    sky = spec.kind("SKY")
    table = []
    for c in range(spec.num_categories):
        compat = patterns[c % len(patterns)]
        if compat == frozenset([sky]):
            center = math.exp(rng.uniform(math.log(0.08), math.log(0.2)))
            aspect = rng.uniform(0.4, 0.9)
        else:
            center = math.exp(rng.uniform(math.log(0.12), math.log(0.3)))
            aspect = rng.uniform(0.5, 1.4)
        table.append(CategoryRule(c, compat, (center / 2.0, min(center * 2.0, 1.0)), aspect))
    return table


@dataclass(frozen=True, eq=False)
class ForegroundSpec:
    category: int
    compatible_regions: frozenset
    scale_range: tuple[float, float]
    aspect: float
    palette_size: int

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo < hi <= 1:
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if not self.aspect > 0:
            raise ValueError(f"aspect must be positive, got {self.aspect}")

    @property
    def attributes(self) -> np.ndarray:
        """Affinity bit per region kind, a log-size code and the aspect."""
        lo, hi = self.scale_range
        center = math.sqrt(lo * hi)
        a, b = SIZE_CODE_RANGE
        size_code = (math.log(center) - math.log(a)) / (math.log(b) - math.log(a))
        affinity = [1.0 if k in self.compatible_regions else 0.0 for k in range(self.palette_size)]
        return np.array(affinity + [size_code, self.aspect], dtype=np.float64)

    @property
    def fg_raster(self) -> np.ndarray:
        """``C' x h x w`` raster: constant attribute channels plus a top-to-bottom ramp."""
        rows = FG_RASTER_ROWS
        cols = max(1, int(round(rows / self.aspect)))
        attrs = self.attributes
        raster = np.empty((len(attrs) + 1, rows, cols))
        raster[:-1] = attrs[:, None, None]
        raster[-1] = ((np.arange(rows) + 0.5) / rows)[:, None]
        return raster

    def __eq__(self, other):
        if not isinstance(other, ForegroundSpec):
            return NotImplemented
        return (
            self.category == other.category
            and self.compatible_regions == other.compatible_regions
            and tuple(self.scale_range) == tuple(other.scale_range)
            and self.aspect == other.aspect
            and self.palette_size == other.palette_size
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Scene:
    index: int
    region_map: np.ndarray
    foreground: ForegroundSpec
    palette: tuple[str, ...]
    spec_hash: str = ""
    _compatible: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rm = np.ascontiguousarray(self.region_map, dtype=np.uint8)
        if rm.ndim != 2 or rm.shape[0] != rm.shape[1]:
            raise ValueError("region_map must be a square 2-D array")
        if rm.size and rm.max() >= len(self.palette):
            raise ValueError("region_map holds an id outside the palette")
        rm.setflags(write=False)
        object.__setattr__(self, "region_map", rm)
        compat = np.isin(rm, sorted(self.foreground.compatible_regions))
        object.__setattr__(self, "_compatible", compat)

    @property
    def grid_size(self) -> int:
        return self.region_map.shape[0]

    @property
    def background_raster(self) -> np.ndarray:
        return background_raster(self.region_map, len(self.palette))

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.index == other.index
            and self.palette == other.palette
            and self.foreground == other.foreground
            and np.array_equal(self.region_map, other.region_map)
        )

    __hash__ = None


def background_raster(region_map: np.ndarray, n_kinds: int, resolution: int | None = None) -> np.ndarray:
    """One-hot region channels followed by normalized column and row coordinates.

    With ``resolution`` below the grid size, region channels are area-averaged
    (the grid must be an integer multiple of the resolution).
    """
    g = region_map.shape[0]
    n = g if resolution is None else int(resolution)
    if g % n:
        raise ValueError(f"grid size {g} is not a multiple of resolution {n}")
    onehot = (region_map[None, :, :] == np.arange(n_kinds)[:, None, None]).astype(np.float64)
    if n != g:
        f = g // n
        onehot = onehot.reshape(n_kinds, n, f, n, f).mean(axis=(2, 4))
    centers = (np.arange(n) + 0.5) / n
    xs = np.broadcast_to(centers[None, :], (n, n))
    ys = np.broadcast_to(centers[:, None], (n, n))
    return np.concatenate([onehot, xs[None], ys[None]], axis=0)


def _smooth_noise(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=sigma, mode="wrap")


def generate_scene(spec: SceneSpec, index: int) -> Scene:
    """Deterministic scene for ``(spec.seed, index)``.

    Sky (when in the palette) fills a band above a random horizon; water blobs
    are the top cells of a smoothed noise field below it; any other ground
    kinds split the remaining cells by arg-max of their own noise fields.
    """
    rng = rng_stream(spec.seed, "scene", index)
    g = spec.grid_size
    sky, water = spec.kind("SKY"), spec.kind("WATER")
    ground_kinds = [k for k in range(len(spec.region_palette)) if k not in (sky, water)]
    base = ground_kinds[0] if ground_kinds else (water if water is not None else sky)

    region = np.full((g, g), base, dtype=np.uint8)
    horizon = 0
    if sky is not None and (ground_kinds or water is not None):
        horizon = int(round(g * rng.uniform(0.2, 0.4)))
        region[:horizon] = sky
    below = np.zeros((g, g), dtype=bool)
    below[horizon:] = True

    if len(ground_kinds) > 1:
        fields = np.stack([_smooth_noise(rng, g, g / 8) for _ in ground_kinds])
        pick = np.asarray(ground_kinds, dtype=np.uint8)[fields.argmax(axis=0)]
        region[below] = pick[below]

    if water is not None and water != base and spec.water_fraction > 0:
        n_water = min(int(round(spec.water_fraction * g * g)), int(below.sum()))
        # shoreline bias: water gathers below the horizon, with lakes further down
        rows = (np.arange(g) - horizon) / g
        noise = _smooth_noise(rng, g, g / 6)
        noise = noise / (noise.std() + 1e-12) - 3.0 * rows[:, None]
        noise[~below] = -np.inf
        order = np.argsort(-noise, axis=None, kind="stable")[:n_water]
        region.flat[order] = water

    rule = category_table(spec)[int(rng.integers(spec.num_categories))]
    fg = ForegroundSpec(rule.category, rule.compatible_regions, rule.scale_range, rule.aspect,
                        len(spec.region_palette))
    return Scene(index, region, fg, spec.region_palette, spec.spec_hash())


def footprint(box, n: int) -> tuple[int, int, int, int]:
    """Cell rows ``[r0, r1)`` and columns ``[c0, c1)`` covered by a box on an ``n x n`` grid."""
    r0, r1, c0, c1 = footprints(np.asarray(box, dtype=np.float64)[None], n)[0]
    return int(r0), int(r1), int(c0), int(c1)


def footprints(boxes: np.ndarray, n: int) -> np.ndarray:
    """Vectorized :func:`footprint`; returns ``(K, 4)`` integer spans."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x, y, w, h = b.T
    r0 = np.clip(np.floor((y - h / 2) * n + _EPS), 0, n - 1).astype(np.int64)
    r1 = np.maximum(np.minimum(np.ceil((y + h / 2) * n - _EPS), n).astype(np.int64), r0 + 1)
    c0 = np.clip(np.floor((x - w / 2) * n + _EPS), 0, n - 1).astype(np.int64)
    c1 = np.maximum(np.minimum(np.ceil((x + w / 2) * n - _EPS), n).astype(np.int64), c0 + 1)
    return np.stack([r0, r1, c0, c1], axis=1)


def support_rows(box, n: int) -> tuple[int, int]:
    """Rows ``[s0, s1)`` of the bottom support strip of a box."""
    s0, s1 = support_spans(np.asarray(box, dtype=np.float64)[None], n)[0]
    return int(s0), int(s1)


def support_spans(boxes: np.ndarray, n: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    _, y, _, h = b.T
    r1 = footprints(b, n)[:, 1]
    bottom = y + h / 2
    s0 = np.floor((bottom - SUPPORT_FRACTION * h) * n + _EPS).astype(np.int64)
    s0 = np.minimum(np.maximum(s0, 0), r1 - 1)
    return np.stack([s0, r1], axis=1)


def _check_box(box) -> None:
    if not box_contained(box):
        raise ValueError(f"placement {tuple(float(v) for v in box)} is not inside the unit square")


def oracle_label(scene: Scene, p) -> int:
    """Ground-truth rationality of one placement (cell-by-cell reference)."""
    box = p.as_array() if isinstance(p, Placement) else np.asarray(p, dtype=np.float64)
    _check_box(box)
    x, y, w, h = box
    fg = scene.foreground
    n = scene.grid_size
    s0, s1 = support_rows(box, n)
    _, _, c0, c1 = footprint(box, n)
    for r in range(s0, s1):
        for c in range(c0, c1):
            if int(scene.region_map[r, c]) not in fg.compatible_regions:
                return 0
    lo, hi = fg.scale_range
    if not lo <= w <= hi:
        return 0
    if abs(h / w - fg.aspect) > ASPECT_TOLERANCE * fg.aspect:
        return 0
    return 1


def oracle_labels(scene: Scene, boxes) -> np.ndarray:
    """Vectorized oracle over ``(K, 4)`` boxes using a summed-area table."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(b) == 0:
        return np.zeros(0, dtype=np.int64)
    inside = box_contained(b)
    if not np.all(inside):
        bad = b[~inside][0]
        _check_box(bad)
    n = scene.grid_size
    bad_cells = (~scene._compatible).astype(np.int64)
    sat = np.zeros((n + 1, n + 1), dtype=np.int64)
    sat[1:, 1:] = bad_cells.cumsum(0).cumsum(1)
    s0, s1 = support_spans(b, n).T
    c0, c1 = footprints(b, n)[:, 2:].T
    n_bad = sat[s1, c1] - sat[s0, c1] - sat[s1, c0] + sat[s0, c0]
    fg = scene.foreground
    lo, hi = fg.scale_range
    w, h = b[:, 2], b[:, 3]
    ok = (n_bad == 0) & (w >= lo) & (w <= hi) & (np.abs(h / w - fg.aspect) <= ASPECT_TOLERANCE * fg.aspect)
    return ok.astype(np.int64)


def sample_placements(scene: Scene, K: int, rng: np.random.Generator,
                      w_range: tuple[float, float] = DEFAULT_SAMPLING_RANGE) -> np.ndarray:
    """``K`` random boxes (rows ``x, y, w, h``) fully inside the image.

    Width is log-uniform over ``w_range`` (capped so that the height fits), the
    height follows the foreground aspect and the center is uniform over the
    positions that keep the box inside.
    """
    if K < 0:
        raise ValueError("K must be non-negative")
    aspect = scene.foreground.aspect
    lo, hi = w_range
    hi = min(hi, 1.0, 1.0 / aspect)
    lo = min(lo, hi)
    w = np.exp(rng.uniform(math.log(lo), math.log(hi), size=K))
    h = aspect * w
    x = rng.uniform(w / 2, 1 - w / 2)
    y = rng.uniform(h / 2, 1 - h / 2)
    return np.stack([x, y, w, h], axis=1) if K else np.zeros((0, 4))


def _resize_index(n_out: int, n_src: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_src / n_out).astype(np.int64), n_src - 1)


def rasterize_pair(scene: Scene, p, resolution: int | None = None) -> np.ndarray:
    """Composite raster: background channels followed by foreground channels.

    The foreground raster is nearest-resampled onto the box footprint; the
    foreground channels are zero elsewhere and the background is left intact.
    """
    box = p.as_array() if isinstance(p, Placement) else np.asarray(p, dtype=np.float64)
    _check_box(box)
    n = scene.grid_size if resolution is None else int(resolution)
    bg = background_raster(scene.region_map, len(scene.palette), n)
    fgr = scene.foreground.fg_raster
    r0, r1, c0, c1 = footprint(box, n)
    stamp = np.zeros((fgr.shape[0], n, n))
    ri = _resize_index(r1 - r0, fgr.shape[1])
    ci = _resize_index(c1 - c0, fgr.shape[2])
    stamp[:, r0:r1, c0:c1] = fgr[:, ri[:, None], ci[None, :]]
    return np.concatenate([bg, stamp], axis=0)


def rasterize_many(scene: Scene, boxes, resolution: int | None = None) -> np.ndarray:
    """Vectorized :func:`rasterize_pair` for many boxes on one scene: ``(K, C, n, n)``."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(b) and not np.all(box_contained(b)):
        _check_box(b[~box_contained(b)][0])
    n = scene.grid_size if resolution is None else int(resolution)
    bg = background_raster(scene.region_map, len(scene.palette), n)
    fgr = scene.foreground.fg_raster
    k = len(b)
    r0, r1, c0, c1 = (v[:, None] for v in footprints(b, n).T)
    cells = np.arange(n)[None, :]
    src_r = np.clip(((cells - r0 + 0.5) * fgr.shape[1] / (r1 - r0)).astype(np.int64), 0, fgr.shape[1] - 1)
    src_c = np.clip(((cells - c0 + 0.5) * fgr.shape[2] / (c1 - c0)).astype(np.int64), 0, fgr.shape[2] - 1)
    block = fgr[:, src_r[:, :, None], src_c[:, None, :]]  # C', K, n, n
    mask = ((cells >= r0) & (cells < r1))[:, :, None] & ((cells >= c0) & (cells < c1))[:, None, :]
    stamps = np.where(mask[None], block, 0.0).transpose(1, 0, 2, 3)
    out = np.empty((k, bg.shape[0] + fgr.shape[0], n, n))
    out[:, : bg.shape[0]] = bg[None]
    out[:, bg.shape[0]:] = stamps
    return out


def scene_to_record(scene: Scene) -> dict:
    fg = scene.foreground
    return {
        "spec_hash": scene.spec_hash,
        "scene_index": int(scene.index),
        "palette": list(scene.palette),
        "grid_size": scene.grid_size,
        "region_map": base64.b64encode(scene.region_map.tobytes()).decode("ascii"),
        "foreground": {
            "category": int(fg.category),
            "compatible_regions": sorted(int(k) for k in fg.compatible_regions),
            "scale_range": [float(v) for v in fg.scale_range],
            "aspect": float(fg.aspect),
        },
    }


def scene_from_record(d: dict) -> Scene:
    g = int(d["grid_size"])
    raw = base64.b64decode(d["region_map"], validate=True)
    if len(raw) != g * g:
        raise ValueError(f"region_map holds {len(raw)} bytes, expected {g * g}")
    region = np.frombuffer(raw, dtype=np.uint8).reshape(g, g)
    palette = tuple(d["palette"])
    f = d["foreground"]
    fg = ForegroundSpec(int(f["category"]), frozenset(int(k) for k in f["compatible_regions"]),
                        (float(f["scale_range"][0]), float(f["scale_range"][1])), float(f["aspect"]),
                        len(palette))
    return Scene(int(d["scene_index"]), region, fg, palette, d.get("spec_hash", ""))
