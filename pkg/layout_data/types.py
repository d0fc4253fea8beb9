"""Shared domain types: boxes, masks, categories, pages and datasets."""
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from layout_data.masks import polygon_bounds, polygonize_raster, rasterize_polygons

BACKGROUND_ID = 0  # reserved for the model's no-object class, never a Category


@dataclass(frozen=True)
class BBox:
    """Corner-form box in pixels, origin top-left. Not self-validating; see validate_dataset."""
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_ordered(self) -> bool:
        return self.x_min <= self.x_max and self.y_min <= self.y_max

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_tuple())

    def contains(self, other: "BBox", tol: float = 0.0) -> bool:
        return (other.x_min >= self.x_min - tol and other.y_min >= self.y_min - tol
                and other.x_max <= self.x_max + tol and other.y_max <= self.y_max + tol)

    def scaled(self, sx: float, sy: float) -> "BBox":
        return BBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def intersection(self, other: "BBox") -> "BBox":
        x0, y0 = max(self.x_min, other.x_min), max(self.y_min, other.y_min)
        x1, y1 = min(self.x_max, other.x_max), min(self.y_max, other.y_max)
        return BBox(x0, y0, max(x0, x1), max(y0, y1))


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """
    Either a polygon list (flat COCO polygons, pixel units) or a boolean raster
    the size of the owning page. Polygons are rasterized lazily on demand.
    """
    polygons: Optional[Tuple[Tuple[float, ...], ...]] = None
    raster: Optional[np.ndarray] = None

    @classmethod
    def from_polygons(cls, polygons: Sequence[Sequence[float]]) -> "InstanceMask":
        return cls(polygons=tuple(tuple(float(v) for v in p) for p in polygons))

    @classmethod
    def from_raster(cls, raster: np.ndarray) -> "InstanceMask":
        arr = np.asarray(raster).astype(bool)
        arr.setflags(write=False)
        return cls(raster=arr)

    @property
    def is_raster(self) -> bool:
        return self.raster is not None

    def to_raster(self, height: int, width: int) -> np.ndarray:
        if self.raster is not None:
            if self.raster.shape != (height, width):
                raise ValueError(
                    f"mask raster is {self.raster.shape}, expected {(height, width)}")
            return self.raster
        return rasterize_polygons(self.polygons or (), height, width)

    def rasterize(self, height: int, width: int) -> "InstanceMask":
        return InstanceMask.from_raster(self.to_raster(height, width))

    def polygonize(self) -> "InstanceMask":
        if self.raster is None:
            return self
        return InstanceMask.from_polygons(polygonize_raster(self.raster))

    def vertex_bounds(self) -> Optional[Tuple[float, float, float, float]]:
        if self.polygons is None:
            return None
        return polygon_bounds(self.polygons)

    def same_pixels(self, other: "InstanceMask", height: int, width: int) -> bool:
        return bool(np.array_equal(self.to_raster(height, width), other.to_raster(height, width)))


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    taxonomy_id: str


@dataclass(frozen=True)
class Taxonomy:
    id: str
    categories: Tuple[Category, ...]

    @classmethod
    def from_names(cls, taxonomy_id: str, names: Sequence[str]) -> "Taxonomy":
        return cls(taxonomy_id, tuple(Category(i + 1, n, taxonomy_id) for i, n in enumerate(names)))

    def __len__(self) -> int:
        return len(self.categories)

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.categories]

    @property
    def ids(self) -> List[int]:
        return [c.id for c in self.categories]

    def by_id(self, category_id: int) -> Optional[Category]:
        return self._id_index().get(category_id)

    def by_name(self, name: str) -> Optional[Category]:
        return self._name_index().get(name)

    def _id_index(self) -> Dict[int, Category]:
        return {c.id: c for c in self.categories}

    def _name_index(self) -> Dict[str, Category]:
        return {c.name: c for c in self.categories}


class Subset(str, Enum):
    SCIENTIFIC_ARTICLE = "scientific_article"
    TEXTBOOK = "textbook"
    TEST_PAPER = "test_paper"
    MAGAZINE_CH = "magazine_ch"
    MAGAZINE_EN = "magazine_en"
    NEWSPAPER_CH = "newspaper_ch"
    NEWSPAPER_EN = "newspaper_en"
    NOTE = "note"
    BOOK = "book"
    SYNTHETIC = "synthetic"

    def group(self) -> str:
        """Seven-way subset view: Chinese/English magazines and newspapers merged."""
        if self in (Subset.MAGAZINE_CH, Subset.MAGAZINE_EN):
            return "magazine"
        if self in (Subset.NEWSPAPER_CH, Subset.NEWSPAPER_EN):
            return "newspaper"
        return self.value


@dataclass(frozen=True)
class Instance:
    category_id: int
    bbox: Optional[BBox] = None
    mask: Optional[InstanceMask] = None
    score: Optional[float] = None  # absent for ground truth

    def with_category(self, category_id: int) -> "Instance":
        return replace(self, category_id=category_id)


@dataclass(frozen=True)
class PageRecord:
    image_id: int
    width: int
    height: int
    subset: Subset = Subset.SYNTHETIC
    instances: Tuple[Instance, ...] = field(default_factory=tuple)
    file_name: str = ""

    def with_instances(self, instances: Sequence[Instance]) -> "PageRecord":
        return replace(self, instances=tuple(instances))

    def bounds(self) -> BBox:
        return BBox(0.0, 0.0, float(self.width), float(self.height))


@dataclass(frozen=True)
class Dataset:
    taxonomy: Taxonomy
    pages: Tuple[PageRecord, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.pages)

    def page(self, image_id: int) -> PageRecord:
        for p in self.pages:
            if p.image_id == image_id:
                return p
        raise KeyError(f"no page with image_id {image_id}")

    def instance_count(self) -> int:
        return sum(len(p.instances) for p in self.pages)

    def with_pages(self, pages: Sequence[PageRecord]) -> "Dataset":
        return Dataset(self.taxonomy, tuple(pages))

    def select(self, image_ids) -> "Dataset":
        wanted = set(image_ids)
        return self.with_pages([p for p in self.pages if p.image_id in wanted])
