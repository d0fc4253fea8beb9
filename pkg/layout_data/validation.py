from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from layout_data.types import BBox, Dataset, Instance, PageRecord

BBOX_TOLERANCE = 1.0  # px slack between a mask's bounding rectangle and its box


@dataclass(frozen=True)
class Violation:
    page_id: Optional[int]
    instance_index: Optional[int]
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        where = "dataset" if self.page_id is None else f"page {self.page_id}"
        if self.instance_index is not None:
            where += f" instance {self.instance_index}"
        return f"{where}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


def mask_bounding_rect(instance: Instance, page: PageRecord) -> Optional[BBox]:
    """Minimum bounding rectangle of the instance mask, half-open pixel convention."""
    if instance.mask is None:
        return None
    if not instance.mask.is_raster:
        bounds = instance.mask.vertex_bounds()
        return BBox(*bounds) if bounds else None
    if instance.mask.raster.shape != (page.height, page.width):
        return None
    ys, xs = np.nonzero(instance.mask.raster)
    if ys.size == 0:
        return None
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _check_taxonomy(d: Dataset) -> List[Violation]:
    out = []
    ids = d.taxonomy.ids
    if ids != list(range(1, len(ids) + 1)):
        out.append(Violation(None, None, "taxonomy ids", "category ids must be contiguous from 1"))
    names = d.taxonomy.names
    if len(set(names)) != len(names):
        out.append(Violation(None, None, "taxonomy names", "duplicate category name"))
    for c in d.taxonomy.categories:
        if c.taxonomy_id != d.taxonomy.id:
            out.append(Violation(None, None, "taxonomy ids", f"category '{c.name}' belongs to '{c.taxonomy_id}'"))
    return out


def _check_instance(page: PageRecord, idx: int, inst: Instance, known_ids) -> List[Violation]:
    out = []

    def add(rule, detail=""):
        out.append(Violation(page.image_id, idx, rule, detail))

    if inst.category_id not in known_ids:
        add("unknown category", f"category_id {inst.category_id}")
    if inst.score is not None and not (0.0 <= inst.score <= 1.0):
        add("score range", f"score {inst.score}")

    box = inst.bbox
    box_ok = False
    if box is not None:
        if not box.is_finite():
            add("bbox finite", str(box.as_tuple()))
        elif not box.is_ordered():
            add("bbox order", str(box.as_tuple()))
        else:
            box_ok = True
            if box.area() <= 0.0:
                add("zero area", str(box.as_tuple()))
            if not page.bounds().contains(box):
                add("bbox outside page", str(box.as_tuple()))

    if inst.mask is not None:
        if inst.mask.is_raster:
            if inst.mask.raster.shape != (page.height, page.width):
                add("raster shape", f"{inst.mask.raster.shape} vs page {(page.height, page.width)}")
        else:
            for p in inst.mask.polygons or ():
                if len(p) < 6 or len(p) % 2:
                    add("polygon vertices", f"{len(p) // 2} vertices")
        if box_ok:
            rect = mask_bounding_rect(inst, page)
            if rect is not None and not box.contains(rect, tol=BBOX_TOLERANCE):
                add("mask outside bbox", f"mask {rect.as_tuple()} box {box.as_tuple()}")
    return out


def validate_dataset(d: Dataset) -> List[Violation]:
    """Every broken type invariant as data; an empty list means the dataset is valid."""
    violations = _check_taxonomy(d)
    known_ids = set(d.taxonomy.ids)
    seen = set()
    for page in d.pages:
        if page.image_id in seen:
            violations.append(Violation(page.image_id, None, "duplicate image_id"))
        seen.add(page.image_id)
        if page.width <= 0 or page.height <= 0:
            violations.append(Violation(page.image_id, None, "page size", f"{page.width}x{page.height}"))
            continue
        for idx, inst in enumerate(page.instances):
            violations.extend(_check_instance(page, idx, inst, known_ids))
    return violations


def _mask_diff(a, b, page: PageRecord, atol: float) -> Optional[str]:
    if (a is None) != (b is None):
        return "mask presence"
    if a is None:
        return None
    if not a.is_raster and not b.is_raster and len(a.polygons) == len(b.polygons):
        for pa, pb in zip(a.polygons, b.polygons):
            if len(pa) != len(pb) or not np.allclose(pa, pb, atol=atol, rtol=0.0):
                break
        else:
            return None
    if not a.same_pixels(b, page.height, page.width):
        return "mask pixels"
    return None


def dataset_diff(a: Dataset, b: Dataset, atol: float = 1e-6) -> List[str]:
    """Structural differences between two datasets; empty when equal up to atol."""
    out = []
    if a.taxonomy != b.taxonomy:
        out.append(f"taxonomy {a.taxonomy.id} != {b.taxonomy.id}")
    if len(a.pages) != len(b.pages):
        return out + [f"page count {len(a.pages)} != {len(b.pages)}"]
    for pa, pb in zip(a.pages, b.pages):
        head = (pa.image_id, pa.width, pa.height, pa.subset, pa.file_name)
        if head != (pb.image_id, pb.width, pb.height, pb.subset, pb.file_name):
            out.append(f"page {pa.image_id}: header {head}")
            continue
        if len(pa.instances) != len(pb.instances):
            out.append(f"page {pa.image_id}: instance count {len(pa.instances)} != {len(pb.instances)}")
            continue
        for idx, (ia, ib) in enumerate(zip(pa.instances, pb.instances)):
            where = f"page {pa.image_id} instance {idx}"
            if ia.category_id != ib.category_id:
                out.append(f"{where}: category {ia.category_id} != {ib.category_id}")
            if (ia.bbox is None) != (ib.bbox is None) or (
                    ia.bbox is not None
                    and not np.allclose(ia.bbox.as_tuple(), ib.bbox.as_tuple(), atol=atol, rtol=0.0)):
                out.append(f"{where}: bbox")
            if (ia.score is None) != (ib.score is None) or (
                    ia.score is not None and abs(ia.score - ib.score) > atol):
                out.append(f"{where}: score")
            problem = _mask_diff(ia.mask, ib.mask, pa, atol)
            if problem:
                out.append(f"{where}: {problem}")
    return out
