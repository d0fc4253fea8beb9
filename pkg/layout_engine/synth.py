"""
Synthetic document pages with exact layout annotations.

Layouts are built on integer pixel coordinates so boxes and polygon masks are
exact by construction. Every category is drawn as a stack of lines inside its
own gray band.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from layout_data.coco_io import save_coco
from layout_data.types import BBox, Dataset, Instance, InstanceMask, PageRecord, Subset, Taxonomy
from layout_engine.pipeline import parallel_map
from utils.helpers import save_image

logger = logging.getLogger(__name__)

Rect = Tuple[int, int, int, int]  # x0, y0, x1, y1 (half-open)

BACKGROUND_LEVEL = 255
LEVEL_LOW, LEVEL_HIGH = 20, 235
MAX_CATEGORIES = (LEVEL_HIGH - LEVEL_LOW + 1) // 2


class LayoutFamily(str, Enum):
    RECTANGULAR = "rectangular"
    MANHATTAN = "manhattan"
    NON_MANHATTAN = "non_manhattan"
    MULTI_COLUMN = "multi_column"


@dataclass
class SynthPageSpec:
    family: LayoutFamily = LayoutFamily.MANHATTAN
    categories: Tuple[str, ...] = ("paragraph", "title", "figure", "table", "caption")
    min_instances: int = 3
    max_instances: int = 8
    width: int = 256
    height: int = 320
    margin: int = 8
    gap: int = 4
    min_block: int = 16
    taxonomy_id: str = "synthetic"

    def content_rect(self) -> Rect:
        return (self.margin, self.margin, self.width - self.margin, self.height - self.margin)

    def capacity(self) -> int:
        """Most blocks this family is guaranteed to place on one page."""
        x0, y0, x1, y1 = self.content_rect()
        cell = self.min_block + self.gap
        rows = max((y1 - y0 + self.gap) // cell, 0)
        if self.family == LayoutFamily.RECTANGULAR:
            return rows
        if self.family == LayoutFamily.MULTI_COLUMN:
            return rows * _max_columns(self.content_rect(), self)
        # a guillotine carve only stalls once every block is narrower and shorter
        # than two blocks plus a gap; blocks grown by one gap tile the grown page
        stalled = (2 * cell) ** 2
        return max((x1 - x0 + self.gap) * (y1 - y0 + self.gap) // stalled, 1)

    def validate(self) -> "SynthPageSpec":
        self.family = LayoutFamily(self.family)
        if not self.categories:
            raise ValueError("the category palette is empty")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("the category palette has duplicate names")
        if len(self.categories) > MAX_CATEGORIES:
            raise ValueError(f"at most {MAX_CATEGORIES} categories get distinct gray bands, "
                             f"got {len(self.categories)}")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ValueError(f"instance range [{self.min_instances}, {self.max_instances}] is empty or below 1")
        if self.width < 64 or self.height < 64:
            raise ValueError(f"page must be at least 64x64, got {self.width}x{self.height}")
        if self.min_block < 2 or self.gap < 0 or self.margin < 0:
            raise ValueError("min_block must be >= 2 and gap/margin non-negative")
        cap = self.capacity()
        if self.max_instances > cap:
            raise ValueError(
                f"infeasible spec: {self.max_instances} instances do not fit a {self.width}x{self.height} "
                f"{self.family.value} page (capacity {cap})")
        return self

    def taxonomy(self) -> Taxonomy:
        return Taxonomy.from_names(self.taxonomy_id, self.categories)


@dataclass
class SynthCorpus:
    dataset: Dataset
    images: List[np.ndarray] = field(default_factory=list)


def _split_sizes(total: int, k: int, minimum: int, rng: np.random.Generator) -> List[int]:
    """k integer sizes >= minimum summing to total."""
    spare = total - k * minimum
    if spare < 0:
        raise ValueError(f"cannot fit {k} blocks of {minimum}px into {total}px")
    cuts = np.sort(rng.integers(0, spare + 1, size=k - 1)) if k > 1 else np.array([], dtype=int)
    parts = np.diff(np.concatenate(([0], cuts, [spare])))
    return [minimum + int(p) for p in parts]


def _stack(rect: Rect, k: int, spec: SynthPageSpec, rng: np.random.Generator) -> List[Rect]:
    x0, y0, x1, y1 = rect
    heights = _split_sizes(y1 - y0 - (k - 1) * spec.gap, k, spec.min_block, rng)
    out, y = [], y0
    for h in heights:
        out.append((x0, y, x1, y + h))
        y += h + spec.gap
    return out


def _can_split(r: Rect, axis: int, spec: SynthPageSpec) -> bool:
    length = (r[2] - r[0]) if axis == 0 else (r[3] - r[1])
    return length >= 2 * spec.min_block + spec.gap


def _guillotine(rect: Rect, k: int, spec: SynthPageSpec, rng: np.random.Generator) -> List[Rect]:
    rects = [rect]
    while len(rects) < k:
        order = sorted(range(len(rects)), key=lambda i: -((rects[i][2] - rects[i][0]) * (rects[i][3] - rects[i][1])))
        for i in order:
            r = rects[i]
            w, h = r[2] - r[0], r[3] - r[1]
            axes = [a for a in ((0, 1) if w >= h else (1, 0)) if _can_split(r, a, spec)]
            if axes:
                break
        else:
            raise ValueError(f"infeasible spec: could not place {k} blocks")
        axis = axes[0] if rng.random() < 0.75 or len(axes) == 1 else axes[1]
        lo, hi = (r[0], r[2]) if axis == 0 else (r[1], r[3])
        length = hi - lo
        first_lo = spec.min_block
        first_hi = length - spec.min_block - spec.gap
        mid_lo, mid_hi = int(length * 0.3), int(length * 0.7)
        a, b = max(first_lo, mid_lo), min(first_hi, mid_hi)
        if a > b:
            a, b = first_lo, first_hi
        cut = lo + int(rng.integers(a, b + 1))
        if axis == 0:
            parts = [(r[0], r[1], cut, r[3]), (cut + spec.gap, r[1], r[2], r[3])]
        else:
            parts = [(r[0], r[1], r[2], cut), (r[0], cut + spec.gap, r[2], r[3])]
        rects[i:i + 1] = parts
    return rects


def _max_columns(rect: Rect, spec: SynthPageSpec) -> int:
    width = rect[2] - rect[0]
    for n in (3, 2):
        if (width - (n - 1) * spec.gap) // n >= spec.min_block:
            return n
    return 1


def _columns(rect: Rect, k: int, spec: SynthPageSpec, rng: np.random.Generator) -> List[Rect]:
    x0, y0, x1, y1 = rect
    cell = spec.min_block + spec.gap
    max_cols = _max_columns(rect, spec)
    rows_fit = (y1 - y0 + spec.gap) // cell
    need = -(-k // rows_fit)
    n_cols = int(rng.integers(2, max_cols + 1)) if max_cols >= 2 else 1
    n_cols = min(max(n_cols, need), max_cols, k)

    out: List[Rect] = []
    body = rect
    # full-width heading above the columns when the rest still fits
    if k > n_cols and rng.random() < 0.5:
        head_h = spec.min_block + int(rng.integers(0, spec.min_block + 1))
        body_rows = (y1 - y0 - head_h) // cell
        if body_rows * n_cols >= k - 1:
            out.append((x0, y0, x1, y0 + head_h))
            body = (x0, y0 + head_h + spec.gap, x1, y1)
            k -= 1
    bx0, by0, bx1, by1 = body
    widths = _split_sizes(bx1 - bx0 - (n_cols - 1) * spec.gap, n_cols, spec.min_block, rng)
    per_col = [k // n_cols + (1 if c < k % n_cols else 0) for c in range(n_cols)]
    x = bx0
    for w, count in zip(widths, per_col):
        if count:
            out.extend(_stack((x, by0, x + w, by1), count, spec, rng))
        x += w + spec.gap
    return out


def _rect_polygon(r: Rect) -> List[float]:
    x0, y0, x1, y1 = r
    return [float(x0), float(y0), float(x1), float(y0), float(x1), float(y1), float(x0), float(y1)]


def _carve_corner(r: Rect, spec: SynthPageSpec, rng: np.random.Generator):
    """Split r into an L-shaped polygon and a corner rectangle separated by the gap."""
    x0, y0, x1, y1 = r
    cw = int(rng.integers(spec.min_block, (x1 - x0) - spec.min_block - spec.gap + 1))
    ch = int(rng.integers(spec.min_block, (y1 - y0) - spec.min_block - spec.gap + 1))
    # corner occupies the bottom-right; the L wraps it with a gap-wide channel
    cx0, cy0 = x1 - cw, y1 - ch
    corner = (cx0, cy0, x1, y1)
    ex, ey = cx0 - spec.gap, cy0 - spec.gap
    l_poly = [float(x0), float(y0), float(x1), float(y0), float(x1), float(ey),
              float(ex), float(ey), float(ex), float(y1), float(x0), float(y1)]
    return l_poly, corner


def _layout(spec: SynthPageSpec, k: int, rng: np.random.Generator) -> List[Tuple[Rect, Optional[List[float]]]]:
    """Blocks as (box, polygon or None for a plain rectangle)."""
    content = spec.content_rect()
    if spec.family == LayoutFamily.RECTANGULAR:
        return [(r, None) for r in _stack(content, k, spec, rng)]
    if spec.family == LayoutFamily.MULTI_COLUMN:
        return [(r, None) for r in _columns(content, k, spec, rng)]
    if spec.family == LayoutFamily.MANHATTAN or k < 2:
        return [(r, None) for r in _guillotine(content, k, spec, rng)]

    rects = _guillotine(content, k - 1, spec, rng)
    carvable = [i for i, r in enumerate(rects) if _can_split(r, 0, spec) and _can_split(r, 1, spec)]
    if not carvable:
        return [(r, None) for r in _guillotine(content, k, spec, rng)]
    i = carvable[int(rng.integers(len(carvable)))]
    l_poly, corner = _carve_corner(rects[i], spec, rng)
    blocks = [(r, None) for j, r in enumerate(rects) if j != i]
    blocks.append((rects[i], l_poly))
    blocks.append((corner, None))
    return blocks


def category_band(index: int, n_categories: int) -> Tuple[int, int]:
    """Body and stripe gray levels of the index-th category (0-based); bands never overlap."""
    step = (LEVEL_HIGH - LEVEL_LOW + 1) // max(n_categories, 1)
    level = LEVEL_LOW + index * step
    return level, level + max(step // 2, 1)


def render_page(page: PageRecord, n_categories: int) -> np.ndarray:
    canvas = np.full((page.height, page.width), BACKGROUND_LEVEL, dtype=np.uint8)
    rows = np.arange(page.height)[:, None]
    for inst in page.instances:
        raster = inst.mask.to_raster(page.height, page.width)
        body, stripe_level = category_band(inst.category_id - 1, n_categories)
        y0 = int(inst.bbox.y_min)
        stripe = ((rows - y0) % 4 == 3) & raster
        canvas[raster] = body
        canvas[stripe] = stripe_level
    return np.repeat(canvas[..., None], 3, axis=2)


def generate_page(spec: SynthPageSpec, image_id: int, seed: int) -> PageRecord:
    rng = np.random.default_rng([seed, image_id])
    k = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    instances = []
    for rect, poly in _layout(spec, k, rng):
        cat = int(rng.integers(len(spec.categories))) + 1
        bbox = BBox(*(float(v) for v in rect))
        mask = InstanceMask.from_polygons([poly if poly is not None else _rect_polygon(rect)])
        instances.append(Instance(cat, bbox, mask))
    return PageRecord(image_id, spec.width, spec.height, Subset.SYNTHETIC, tuple(instances),
                      f"images/page_{image_id:05d}.png")


def generate_corpus(spec: SynthPageSpec, n_pages: int, seed: int = 0, workers: int = 1,
                    out_dir=None, render: bool = True) -> SynthCorpus:
    """Deterministic corpus; page i depends only on (seed, i)."""

    spec.validate()
    if n_pages < 1:
        raise ValueError(f"n_pages must be >= 1, got {n_pages}")
    taxonomy = spec.taxonomy()
    pages = parallel_map(lambda i: generate_page(spec, i, seed), range(1, n_pages + 1), workers)
    dataset = Dataset(taxonomy, tuple(pages))
    images = parallel_map(lambda p: render_page(p, len(taxonomy)), pages, workers) if render else []

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for page, image in zip(pages, images):
            save_image(image, out_dir / page.file_name)
        save_coco(dataset, out_dir / "annotations.json")
    logger.info("Generated %d %s pages (%d instances)", n_pages, spec.family.value, dataset.instance_count())
    return SynthCorpus(dataset, images)
