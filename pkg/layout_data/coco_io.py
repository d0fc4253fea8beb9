"""
COCO annotation I/O, dataset statistics and the stratified train/val/test split.
"""
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from marshmallow import EXCLUDE, Schema, ValidationError, fields, post_load, validate

from layout_data.errors import CocoParseError, DatasetValidationError, SchemaError
from layout_data.types import (BBox, Category, Dataset, Instance, InstanceMask, PageRecord, Subset,
                               Taxonomy)
from layout_data.validation import validate_dataset

logger = logging.getLogger(__name__)


@dataclass
class CocoImage:
    id: int
    width: int
    height: int
    file_name: str = ""
    subset: Optional[str] = None


@dataclass
class CocoAnnotation:
    image_id: int
    category_id: int
    id: Optional[int] = None
    bbox: Optional[List[float]] = None
    segmentation: Optional[List[List[float]]] = None
    area: Optional[float] = None
    iscrowd: int = 0
    score: Optional[float] = None


@dataclass
class CocoCategory:
    id: int
    name: str
    supercategory: Optional[str] = None


@dataclass
class CocoDocument:
    images: List[CocoImage]
    categories: List[CocoCategory]
    annotations: List[CocoAnnotation] = field(default_factory=list)
    info: Dict[str, Any] = field(default_factory=dict)


class CocoImageSchema(Schema):
    class Meta:
        unknown = EXCLUDE

    id = fields.Integer(required=True)
    width = fields.Integer(required=True)
    height = fields.Integer(required=True)
    file_name = fields.String(load_default="")
    subset = fields.String(load_default=None, allow_none=True)

    @post_load
    def make(self, data, **kwargs):
        return CocoImage(**data)


class CocoAnnotationSchema(Schema):
    class Meta:
        unknown = EXCLUDE

    id = fields.Integer(load_default=None, allow_none=True)
    image_id = fields.Integer(required=True)
    category_id = fields.Integer(required=True)
    bbox = fields.List(fields.Float(allow_nan=True), validate=validate.Length(equal=4),
                       load_default=None, allow_none=True)
    segmentation = fields.List(fields.List(fields.Float(allow_nan=True)), load_default=None, allow_none=True)
    area = fields.Float(load_default=None, allow_none=True)
    iscrowd = fields.Integer(load_default=0)
    score = fields.Float(load_default=None, allow_none=True)

    @post_load
    def make(self, data, **kwargs):
        return CocoAnnotation(**data)


class CocoCategorySchema(Schema):
    class Meta:
        unknown = EXCLUDE

    id = fields.Integer(required=True)
    name = fields.String(required=True)
    supercategory = fields.String(load_default=None, allow_none=True)

    @post_load
    def make(self, data, **kwargs):
        return CocoCategory(**data)


class CocoDocumentSchema(Schema):
    class Meta:
        unknown = EXCLUDE

    info = fields.Dict(load_default=dict)
    images = fields.List(fields.Nested(CocoImageSchema), required=True)
    annotations = fields.List(fields.Nested(CocoAnnotationSchema), load_default=list)
    categories = fields.List(fields.Nested(CocoCategorySchema), required=True)

    @post_load
    def make(self, data, **kwargs):
        return CocoDocument(**data)


def _first_error(messages, path=()) -> Tuple[str, str]:
    """Dotted field path and message of the first schema error."""
    if isinstance(messages, dict) and messages:
        key = next(iter(messages))
        return _first_error(messages[key], path + (str(key),))
    if isinstance(messages, list) and messages:
        return ".".join(path), str(messages[0])
    return ".".join(path), str(messages)


def _parse_document(raw: bytes) -> CocoDocument:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CocoParseError("annotation file is not UTF-8", offset=e.start) from e
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[:e.pos].encode("utf-8"))
        raise CocoParseError(f"malformed JSON: {e.msg}", offset=offset) from e
    if not isinstance(payload, dict):
        raise CocoParseError("top level must be a JSON object", offset=0)
    try:
        return CocoDocumentSchema().load(payload)
    except ValidationError as e:
        loc, msg = _first_error(e.messages)
        raise CocoParseError(f"invalid COCO document: {msg}", field=loc) from e


def _taxonomy_from_categories(cats: Sequence[CocoCategory], taxonomy_id: str) -> Taxonomy:
    ordered = sorted(cats, key=lambda c: c.id)
    return Taxonomy(taxonomy_id, tuple(Category(c.id, c.name, taxonomy_id) for c in ordered))


def _check_categories(cats: Sequence[CocoCategory], taxonomy: Taxonomy) -> None:
    for c in cats:
        known = taxonomy.by_id(c.id)
        if known is None:
            raise SchemaError(f"category id {c.id} ('{c.name}') is not in taxonomy '{taxonomy.id}'")
        if known.name != c.name:
            raise SchemaError(
                f"category id {c.id} is '{c.name}' in the file but '{known.name}' in taxonomy '{taxonomy.id}'")


def load_coco(path, taxonomy: Optional[Taxonomy] = None, strict: bool = True,
              default_subset: Subset = Subset.SYNTHETIC) -> Dataset:
    """
    Reads a COCO object-detection annotation file into a Dataset.

    Without a taxonomy, one is built from the file's categories block; its id
    comes from info.taxonomy when present, otherwise from the file stem.
    """
    path = Path(path)
    doc = _parse_document(path.read_bytes())

    if taxonomy is None:
        taxonomy_id = str(doc.info.get("taxonomy") or path.stem)
        taxonomy = _taxonomy_from_categories(doc.categories, taxonomy_id)
    else:
        _check_categories(doc.categories, taxonomy)

    index_of: Dict[int, int] = {}
    page_fields = []
    for i, img in enumerate(doc.images):
        subset = default_subset
        if img.subset is not None:
            try:
                subset = Subset(img.subset)
            except ValueError as e:
                raise CocoParseError(f"unknown subset '{img.subset}'", field=f"images.{i}.subset") from e
        index_of.setdefault(img.id, i)
        page_fields.append((img, subset))

    instances: List[List[Instance]] = [[] for _ in doc.images]
    for i, ann in enumerate(doc.annotations):
        if ann.image_id not in index_of:
            raise CocoParseError(f"dangling annotation: image_id {ann.image_id} has no image record",
                                 field=f"annotations.{i}.image_id")
        if ann.iscrowd:
            raise CocoParseError("iscrowd=1 annotations are not supported", field=f"annotations.{i}.iscrowd")
        bbox = BBox.from_xywh(*ann.bbox) if ann.bbox is not None else None
        mask = InstanceMask.from_polygons(ann.segmentation) if ann.segmentation else None
        instances[index_of[ann.image_id]].append(Instance(ann.category_id, bbox, mask, ann.score))

    pages = tuple(
        PageRecord(img.id, img.width, img.height, subset, tuple(insts), img.file_name)
        for (img, subset), insts in zip(page_fields, instances)
    )
    d = Dataset(taxonomy, pages)

    violations = validate_dataset(d)
    if violations:
        if strict:
            raise DatasetValidationError(violations)
        logger.warning("%s: %d validation violation(s)", path.name, len(violations))
    logger.info("Loaded %s: %d pages, %d instances", path.name, len(d), d.instance_count())
    return d


def _polygon_area(polygons) -> float:
    total = 0.0
    for p in polygons:
        pts = np.asarray(p, dtype=np.float64).reshape(-1, 2)
        x, y = pts[:, 0], pts[:, 1]
        total += 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
    return total


def _annotation_record(ann_id: int, page: PageRecord, inst: Instance) -> dict:
    rec = {"id": ann_id, "image_id": page.image_id, "category_id": inst.category_id, "iscrowd": 0}
    area = 0.0
    if inst.bbox is not None:
        rec["bbox"] = inst.bbox.to_xywh()
        area = inst.bbox.area()
    if inst.mask is not None:
        polygons = inst.mask.polygonize().polygons or ()
        rec["segmentation"] = [list(p) for p in polygons]
        area = _polygon_area(polygons)
    rec["area"] = area
    if inst.score is not None:
        rec["score"] = inst.score
    return rec


def save_coco(d: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for page in d.pages:
        images.append({"id": page.image_id, "width": page.width, "height": page.height,
                       "file_name": page.file_name, "subset": page.subset.value})
        for inst in page.instances:
            annotations.append(_annotation_record(len(annotations) + 1, page, inst))
    doc = {
        "info": {"taxonomy": d.taxonomy.id},
        "images": images,
        "annotations": annotations,
        "categories": [{"id": c.id, "name": c.name} for c in d.taxonomy.categories],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, ensure_ascii=False)
    logger.info("Wrote %s (%d pages, %d annotations)", path, len(images), len(annotations))


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


SPLITS = (Split.TRAIN, Split.VAL, Split.TEST)


@dataclass(frozen=True)
class SplitAssignment:
    assignment: Dict[int, Split] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.assignment)

    def __getitem__(self, image_id: int) -> Split:
        return self.assignment[image_id]

    def ids(self, split: Split) -> List[int]:
        return sorted(i for i, s in self.assignment.items() if s == Split(split))

    def sizes(self) -> Dict[Split, int]:
        c = Counter(self.assignment.values())
        return {s: c.get(s, 0) for s in SPLITS}


@dataclass(frozen=True)
class DatasetStats:
    """Per-category counts and percentage shares for each split ('all' when unsplit)."""
    category_names: Tuple[str, ...]
    counts: Dict[str, Dict[str, int]]

    @classmethod
    def from_counts(cls, counts: Mapping[str, Mapping[str, int]],
                    category_names: Optional[Sequence[str]] = None) -> "DatasetStats":
        names = list(category_names) if category_names is not None else []
        if category_names is None:
            for per_split in counts.values():
                for n in per_split:
                    if n not in names:
                        names.append(n)
        table: Dict[str, Dict[str, int]] = {}
        for split, per_split in counts.items():
            row = {}
            for n in names:
                v = per_split.get(n, 0)
                if int(v) != v or v < 0:
                    raise ValueError(f"count for '{n}' in split '{split}' must be a non-negative integer, got {v}")
                row[n] = int(v)
            table[str(split)] = row
        return cls(tuple(names), table)

    @property
    def splits(self) -> List[str]:
        return list(self.counts)

    def total(self, split: str) -> int:
        return sum(self.counts[split].values())

    def count(self, split: str, name: str) -> int:
        return self.counts[split][name]

    def share(self, split: str, name: str) -> float:
        total = self.total(split)
        return 100.0 * self.counts[split][name] / total if total else 0.0

    def to_frame(self) -> pd.DataFrame:
        cols = {"category": list(self.category_names)}
        for split in self.splits:
            cols[split] = [self.count(split, n) for n in self.category_names]
            cols[f"{split}_pct"] = [self.share(split, n) for n in self.category_names]
        return pd.DataFrame(cols)


def _page_histogram(page: PageRecord) -> Counter:
    return Counter(inst.category_id for inst in page.instances)


def dataset_stats(d: Dataset, split: Optional[SplitAssignment] = None, workers: int = 1) -> DatasetStats:
    # Lazy import to keep layout_data free of engine imports at module load
    from layout_engine.pipeline import parallel_map

    histograms = parallel_map(_page_histogram, d.pages, workers)
    tallies: Dict[str, Counter] = {}
    if split is None:
        tallies["all"] = sum(histograms, Counter())
    else:
        for s in SPLITS:
            tallies[s.value] = Counter()
        for page, hist in zip(d.pages, histograms):
            if page.image_id not in split.assignment:
                raise ValueError(f"page {page.image_id} has no split assignment")
            tallies[split[page.image_id].value].update(hist)

    names = d.taxonomy.names
    counts = {}
    for s, tally in tallies.items():
        unknown = [cid for cid in tally if d.taxonomy.by_id(cid) is None]
        if unknown:
            logger.warning("Ignoring %d instance(s) with unknown category ids %s",
                           sum(tally[c] for c in unknown), sorted(unknown))
        counts[s] = {c.name: tally.get(c.id, 0) for c in d.taxonomy.categories}
    return DatasetStats.from_counts(counts, names)


def subset_stats(d: Dataset, grouped: bool = False) -> pd.DataFrame:
    """Pages and instances per subset, with each subset's percentage of pages."""
    rows: Dict[str, List[int]] = {}
    for page in d.pages:
        key = page.subset.group() if grouped else page.subset.value
        row = rows.setdefault(key, [0, 0])
        row[0] += 1
        row[1] += len(page.instances)
    order = []
    for s in Subset:
        key = s.group() if grouped else s.value
        if key in rows and key not in order:
            order.append(key)
    n = max(len(d), 1)
    return pd.DataFrame({
        "subset": order,
        "pages": [rows[k][0] for k in order],
        "instances": [rows[k][1] for k in order],
        "page_pct": [100.0 * rows[k][0] / n for k in order],
    })


def _largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    total = float(sum(ratios))
    exact = [n * r / total for r in ratios]
    sizes = [int(np.floor(x)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def _refine_by_swaps(H: np.ndarray, labels: np.ndarray, fractions: np.ndarray, max_swaps: int) -> int:
    """
    Pairwise page swaps between splits that lower the weighted squared gap between
    each split's category counts and its share of the global counts. Split sizes
    are preserved. Returns the number of swaps applied.
    """
    G = H.sum(axis=0)
    present = G > 0
    if not present.any():
        return 0
    w = np.where(present, 1.0 / np.maximum(G, 1.0), 0.0)
    Hw = H * w
    self_term = (H * Hw).sum(axis=1)
    n_splits = len(fractions)
    members = [np.flatnonzero(labels == s) for s in range(n_splits)]
    # E[s]: split s category counts minus its share of the global counts, kept up to date per swap
    E = np.stack([H[m].sum(axis=0) for m in members]) - fractions[:, None] * G[None, :]
    swaps = 0
    while swaps < max_swaps:
        best = (-1e-9, None)
        for s in range(n_splits):
            for t in range(s + 1, n_splits):
                idx_s, idx_t = members[s], members[t]
                if idx_s.size == 0 or idx_t.size == 0:
                    continue
                we = w * (E[s] - E[t])
                # moving page j (in t) into s and page i (in s) into t
                delta = 2.0 * ((H[idx_t] @ we)[None, :] - (H[idx_s] @ we)[:, None]) + 2.0 * (
                    self_term[idx_s][:, None] + self_term[idx_t][None, :] - 2.0 * (Hw[idx_s] @ H[idx_t].T))
                k = int(np.argmin(delta))
                i, j = divmod(k, delta.shape[1])
                if delta[i, j] < best[0]:
                    best = (float(delta[i, j]), (i, j, s, t))
        if best[1] is None:
            break
        i, j, s, t = best[1]
        pi, pj = members[s][i], members[t][j]
        labels[pi], labels[pj] = t, s
        members[s][i], members[t][j] = pj, pi
        E[s] += H[pj] - H[pi]
        E[t] += H[pi] - H[pj]
        swaps += 1
    return swaps


def stratified_split(d: Dataset, ratios: Sequence[float] = (6, 1, 3), seed: int = 0) -> SplitAssignment:
    """
    Page-level split whose per-category instance shares track the global shares.

    Pages are taken rarest-category first and each goes to the split with the
    largest remaining per-category demand among splits with room left; a swap
    pass then evens out the residual imbalance.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"split ratios must be three non-negative numbers with a positive sum, got {ratios}")
    n = len(d)
    if n < 10:
        raise ValueError(f"stratified_split needs at least 10 pages, got {n}")

    cat_index = {cid: k for k, cid in enumerate(d.taxonomy.ids)}
    H = np.zeros((n, len(cat_index)), dtype=np.float64)
    for p, page in enumerate(d.pages):
        for inst in page.instances:
            k = cat_index.get(inst.category_id)
            if k is not None:
                H[p, k] += 1
    G = H.sum(axis=0)
    fractions = np.asarray(ratios) / sum(ratios)
    targets = _largest_remainder(n, ratios)

    # rarest category present, seeded tie-break over image ids
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(n)
    rarity = np.array([G[H[p] > 0].min() if H[p].any() else np.inf for p in range(n)])
    ids = np.array([page.image_id for page in d.pages])
    order = np.lexsort((ids, tiebreak, -H.sum(axis=1), rarity))

    demand = fractions[:, None] * G[None, :]
    inv_g = np.where(G > 0, 1.0 / np.maximum(G, 1.0), 0.0)
    labels = np.full(n, -1, dtype=np.int64)
    filled = [0, 0, 0]
    for p in order:
        open_splits = [s for s in range(3) if filled[s] < targets[s]]
        scores = [float((H[p] * demand[s] * inv_g).sum()) for s in open_splits]
        room = [(targets[s] - filled[s]) / max(targets[s], 1) for s in open_splits]
        pick = max(range(len(open_splits)), key=lambda i: (scores[i], room[i], -open_splits[i]))
        s = open_splits[pick]
        labels[p] = s
        filled[s] += 1
        demand[s] -= H[p]

    swaps = _refine_by_swaps(H, labels, fractions, max_swaps=n)
    logger.info("Stratified split of %d pages into %s (%d refinement swaps)", n, targets, swaps)
    return SplitAssignment({int(ids[p]): SPLITS[labels[p]] for p in range(n)})


def sample_fraction(d: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Seeded page subsample keeping the original page order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(d)
    if n == 0:
        return d
    k = max(1, int(round(fraction * n)))
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=k, replace=False))
    return d.with_pages([d.pages[i] for i in keep])


def write_split(d: Dataset, assignment: SplitAssignment, out_dir) -> Dict[str, Path]:
    """train/val/test COCO files plus split_manifest.tsv (image_id<TAB>split)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for s in SPLITS:
        p = out_dir / f"{s.value}.json"
        save_coco(d.select(assignment.ids(s)), p)
        paths[s.value] = p
    manifest = out_dir / "split_manifest.tsv"
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("# image_id\tsplit\n")
        for image_id in sorted(assignment.assignment):
            f.write(f"{image_id}\t{assignment[image_id].value}\n")
    paths["manifest"] = manifest
    return paths


def read_split_manifest(path) -> SplitAssignment:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        image_id, split = line.split("\t")
        out[int(image_id)] = Split(split)
    return SplitAssignment(out)
