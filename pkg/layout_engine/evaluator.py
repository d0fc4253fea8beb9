"""
COCO-style detection and instance-segmentation scoring.

AP is the 101-point interpolated area under the precision/recall curve,
computed per category and IoU threshold with greedy score-descending
matching. Categories without ground truth are reported as NaN and left out of
every mean.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from layout_data.errors import TaxonomyMismatchError
from layout_data.types import Dataset, Instance, PageRecord, Subset
from layout_engine.geometry import box_from_mask, box_iou_matrix, mask_from_box, mask_iou_matrix
from layout_engine.pipeline import parallel_map

logger = logging.getLogger(__name__)

MODES = ("boxes", "masks")
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
NOT_APPLICABLE = "nan"

Predictions = Union[Dataset, Mapping[int, Sequence[Instance]]]


def default_iou_thresholds() -> Tuple[float, ...]:
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = field(default_factory=default_iou_thresholds)
    max_dets: int = 100
    area_range: str = "all"

    def validate(self) -> "EvalConfig":
        t = list(self.iou_thresholds)
        if not t:
            raise ValueError("at least one IoU threshold is required")
        if any(not 0.0 < x <= 1.0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"IoU thresholds must be strictly increasing in (0, 1], got {t}")
        if self.max_dets < 1:
            raise ValueError(f"max_dets must be >= 1, got {self.max_dets}")
        if self.area_range != "all":
            raise ValueError(f"only the 'all' area range is supported, got {self.area_range!r}")
        return self


@dataclass
class EvalResult:
    mode: str
    metrics: Dict[str, float]
    category_names: Tuple[str, ...] = ()
    iou_thresholds: Tuple[float, ...] = ()
    ap: Optional[np.ndarray] = None  # (C, T), NaN where a category has no ground truth
    recall: Optional[np.ndarray] = None  # (C, T)
    taxonomy_id: str = ""

    @property
    def mAP(self) -> float:
        return self.metrics["mAP"]

    @property
    def AP50(self) -> float:
        return self.metrics["AP50"]

    @property
    def AP75(self) -> float:
        return self.metrics["AP75"]

    @property
    def AR(self) -> float:
        return self.metrics["AR"]

    def category_ap(self) -> Dict[str, float]:
        """Per-category AP averaged over thresholds; NaN for categories absent from ground truth."""
        if self.ap is None:
            return {}
        out = {}
        for name, row in zip(self.category_names, self.ap):
            out[name] = float(np.mean(row)) if not np.isnan(row).any() else math.nan
        return out

    def to_record(self) -> Dict[str, object]:
        rec = {"mode": self.mode, "taxonomy": self.taxonomy_id, **self.metrics,
               "iou_thresholds": list(self.iou_thresholds)}
        if self.ap is not None:
            rec["category_ap"] = {n: _json_float(v) for n, v in self.category_ap().items()}
            rec["ap"] = [[_json_float(v) for v in row] for row in self.ap]
            rec["recall"] = [[_json_float(v) for v in row] for row in self.recall]
        rec["category_names"] = list(self.category_names)
        return rec

    @classmethod
    def from_record(cls, rec: Mapping[str, object]) -> "EvalResult":
        ap = rec.get("ap")
        recall = rec.get("recall")
        metrics = {k: _float(rec.get(k)) for k in ("mAP", "AP50", "AP75", "AR")}
        return cls(
            mode=str(rec["mode"]),
            metrics=metrics,
            category_names=tuple(rec.get("category_names", ())),
            iou_thresholds=tuple(float(t) for t in rec.get("iou_thresholds", ())),
            ap=_nan_array(ap) if ap is not None else None,
            recall=_nan_array(recall) if recall is not None else None,
            taxonomy_id=str(rec.get("taxonomy", "")),
        )

    @classmethod
    def from_summary(cls, mode: str, mAP: float, AP50: float = math.nan, AP75: float = math.nan,
                     AR: float = math.nan, taxonomy_id: str = "") -> "EvalResult":
        """A result holding published summary numbers only, for side-by-side comparison."""
        return cls(mode, {"mAP": float(mAP), "AP50": float(AP50), "AP75": float(AP75), "AR": float(AR)},
                   taxonomy_id=taxonomy_id)


def _json_float(v: float) -> Optional[float]:
    return None if v is None or math.isnan(v) else float(v)


def _float(v) -> float:
    return math.nan if v is None else float(v)


def _nan_array(rows) -> np.ndarray:
    return np.array([[math.nan if v is None else v for v in row] for row in rows], dtype=np.float64)


# -- matching --

def _check_taxonomy(preds: Predictions, gts: Dataset) -> Dict[int, Sequence[Instance]]:
    if isinstance(preds, Dataset):
        if preds.taxonomy.names != gts.taxonomy.names or preds.taxonomy.ids != gts.taxonomy.ids:
            raise TaxonomyMismatchError(
                f"predictions use taxonomy '{preds.taxonomy.id}', ground truth uses "
                f"'{gts.taxonomy.id}'")
        by_page = {p.image_id: p.instances for p in preds.pages}
    else:
        by_page = dict(preds)
    known = set(gts.taxonomy.ids)
    gt_ids = {p.image_id for p in gts.pages}
    for image_id, instances in by_page.items():
        if image_id not in gt_ids:
            raise ValueError(f"predictions for image {image_id} which is not in the ground truth")
        for inst in instances:
            if inst.category_id not in known:
                raise TaxonomyMismatchError(
                    f"prediction on image {image_id} has category {inst.category_id}, unknown to "
                    f"taxonomy '{gts.taxonomy.id}'")
            if inst.score is None:
                raise ValueError(f"prediction on image {image_id} has no score")
    return by_page


def _box_rows(instances: Sequence[Instance], page: PageRecord) -> np.ndarray:
    rows = []
    for inst in instances:
        b = inst.bbox if inst.bbox is not None else box_from_mask(inst.mask, page.height, page.width)
        rows.append(b.as_tuple())
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def _mask_stack(instances: Sequence[Instance], page: PageRecord) -> np.ndarray:
    out = np.zeros((len(instances), page.height, page.width), dtype=bool)
    for i, inst in enumerate(instances):
        m = inst.mask if inst.mask is not None else mask_from_box(inst.bbox, page.height, page.width)
        out[i] = m.to_raster(page.height, page.width)
    return out


def _iou(dets: Sequence[Instance], gts: Sequence[Instance], page: PageRecord, mode: str) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    if mode == "boxes":
        return box_iou_matrix(_box_rows(dets, page), _box_rows(gts, page))
    return mask_iou_matrix(_mask_stack(dets, page), _mask_stack(gts, page))


def _greedy_match(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Detections in score order take the best still-free gt with IoU >= threshold."""
    n_det, n_gt = ious.shape
    matched = np.zeros(n_det, dtype=bool)
    taken = np.zeros(n_gt, dtype=bool)
    for d in range(n_det):
        best, best_iou = -1, threshold
        for g in range(n_gt):
            if taken[g] or ious[d, g] < best_iou:
                continue
            if best >= 0 and ious[d, g] == best_iou:
                continue
            best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            matched[d] = True
    return matched


@dataclass
class _PageCategoryMatch:
    image_id: int
    category_id: int
    scores: np.ndarray  # (n_det,)
    order: np.ndarray  # instance index within the page prediction list
    matched: np.ndarray  # (T, n_det) bool
    n_gt: int


def _match_page(page: PageRecord, dets: Sequence[Instance], mode: str, cfg: EvalConfig) -> List[_PageCategoryMatch]:
    out = []
    categories = sorted({i.category_id for i in page.instances} | {i.category_id for i in dets})
    for cat in categories:
        gt = [i for i in page.instances if i.category_id == cat]
        idx = [k for k, i in enumerate(dets) if i.category_id == cat]
        idx.sort(key=lambda k: -dets[k].score)  # stable: ties keep list order
        idx = idx[:cfg.max_dets]
        ds = [dets[k] for k in idx]
        ious = _iou(ds, gt, page, mode)
        matched = np.array([_greedy_match(ious, t) for t in cfg.iou_thresholds], dtype=bool).reshape(
            len(cfg.iou_thresholds), len(ds))
        out.append(_PageCategoryMatch(page.image_id, cat, np.array([d.score for d in ds], dtype=np.float64),
                                      np.array(idx, dtype=np.int64), matched, len(gt)))
    return out


def _interpolated_ap(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> Tuple[float, float]:
    """101-point AP and final recall from cumulative TP/FP counts in score order."""
    if len(tp) == 0:
        return 0.0, 0.0
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    # precision envelope, non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean()), float(recall[-1])


def _summarize(ap: np.ndarray, recall: np.ndarray, thresholds: Sequence[float]) -> Dict[str, float]:
    present = ~np.isnan(ap[:, 0]) if ap.size else np.zeros(0, dtype=bool)

    def at(t: float) -> float:
        for j, x in enumerate(thresholds):
            if abs(x - t) < 1e-9:
                return float(ap[present, j].mean()) if present.any() else math.nan
        return math.nan

    if not present.any():
        return {"mAP": math.nan, "AP50": math.nan, "AP75": math.nan, "AR": math.nan}
    return {
        "mAP": float(ap[present].mean()),
        "AP50": at(0.5),
        "AP75": at(0.75),
        "AR": float(recall[present].mean()),
    }


def evaluate(preds: Predictions, gts: Dataset, cfg: Optional[EvalConfig] = None, mode: str = "boxes",
             workers: int = 1) -> EvalResult:
    """
    Score predictions against ground truth.

    In mask mode a prediction without a mask is scored with its filled box;
    in box mode a prediction without a box uses its mask's bounding
    rectangle. Ground truth follows the same rules.
    """
    cfg = (cfg or EvalConfig()).validate()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    by_page = _check_taxonomy(preds, gts)

    pages = sorted(gts.pages, key=lambda p: p.image_id)
    per_page = parallel_map(lambda p: _match_page(p, list(by_page.get(p.image_id, ())), mode, cfg),
                            pages, workers)

    cat_ids = gts.taxonomy.ids
    n_t = len(cfg.iou_thresholds)
    ap = np.full((len(cat_ids), n_t), math.nan)
    recall = np.full((len(cat_ids), n_t), math.nan)
    grouped: Dict[int, List[_PageCategoryMatch]] = {c: [] for c in cat_ids}
    for matches in per_page:
        for m in matches:
            grouped[m.category_id].append(m)

    for row, cat in enumerate(cat_ids):
        items = grouped[cat]
        n_gt = sum(m.n_gt for m in items)
        if n_gt == 0:
            continue
        scores = np.concatenate([m.scores for m in items]) if items else np.zeros(0)
        image_ids = np.concatenate([np.full(len(m.scores), m.image_id) for m in items]) if items else np.zeros(0)
        order = np.concatenate([m.order for m in items]) if items else np.zeros(0)
        matched = np.concatenate([m.matched for m in items], axis=1) if items else np.zeros((n_t, 0), dtype=bool)
        # score descending, ties by (image_id, instance index)
        ranking = np.lexsort((order, image_ids, -scores))
        for j in range(n_t):
            hits = matched[j, ranking]
            tp = np.cumsum(hits).astype(np.float64)
            fp = np.cumsum(~hits).astype(np.float64)
            ap[row, j], recall[row, j] = _interpolated_ap(tp, fp, n_gt)

    metrics = _summarize(ap, recall, cfg.iou_thresholds)
    logger.info("Evaluated %d pages in %s mode: mAP %.4f AP50 %.4f AP75 %.4f AR %.4f",
                len(pages), mode, metrics["mAP"], metrics["AP50"], metrics["AP75"], metrics["AR"])
    return EvalResult(mode, metrics, tuple(gts.taxonomy.names), tuple(cfg.iou_thresholds), ap, recall,
                      gts.taxonomy.id)


def evaluate_by_subset(preds: Predictions, gts: Dataset, cfg: Optional[EvalConfig] = None,
                       mode: str = "boxes", workers: int = 1) -> Dict[Subset, EvalResult]:
    """One result per page subset present in the ground truth."""
    by_page = _check_taxonomy(preds, gts)
    out = {}
    for subset in Subset:
        pages = [p for p in gts.pages if p.subset == subset]
        if not pages:
            continue
        part = gts.with_pages(pages)
        wanted = {p.image_id for p in pages}
        out[subset] = evaluate({k: v for k, v in by_page.items() if k in wanted}, part, cfg, mode, workers)
    return out


# -- reports --

def per_category_report(r: EvalResult) -> pd.DataFrame:
    """One row per taxonomy category: AP in [0, 1], NaN where the category has no ground truth."""
    rows = [{"category": name, "AP": ap} for name, ap in r.category_ap().items()]
    return pd.DataFrame(rows, columns=["category", "AP"])


def format_report_table(df: pd.DataFrame, columns: int = 3) -> str:
    """
    Lays out (category, AP) rows as `columns` side-by-side pairs, AP in
    percent with three decimals and "nan" for non-applicable categories.
    """
    if columns < 1:
        raise ValueError(f"columns must be >= 1, got {columns}")
    cells = []
    for name, ap in zip(df["category"], df["AP"]):
        cells.append((str(name), NOT_APPLICABLE if pd.isna(ap) else f"{100.0 * ap:.3f}"))
    header = " | ".join(["Category", "AP"] * columns)
    lines = [header, "-" * len(header)]
    for start in range(0, len(cells), columns):
        chunk = cells[start:start + columns]
        chunk += [("", "")] * (columns - len(chunk))
        lines.append(" | ".join(f"{n} | {v}" for n, v in chunk).rstrip(" |"))
    return "\n".join(lines)


def compare_runs(a: EvalResult, b: EvalResult) -> pd.DataFrame:
    """Per-metric deltas a - b, largest absolute change first."""
    if a.mode != b.mode:
        raise ValueError(f"cannot compare a {a.mode} result with a {b.mode} result")
    if a.taxonomy_id and b.taxonomy_id and a.taxonomy_id != b.taxonomy_id:
        raise TaxonomyMismatchError(f"results use taxonomies '{a.taxonomy_id}' and '{b.taxonomy_id}'")
    if a.iou_thresholds and b.iou_thresholds and tuple(a.iou_thresholds) != tuple(b.iou_thresholds):
        raise ValueError("results were computed with different IoU thresholds")

    rows = [(name, a.metrics.get(name, math.nan), b.metrics.get(name, math.nan))
            for name in ("mAP", "AP50", "AP75", "AR")]
    if a.ap is not None and b.ap is not None:
        if tuple(a.category_names) != tuple(b.category_names):
            raise TaxonomyMismatchError("results cover different category lists")
        cap_a, cap_b = a.category_ap(), b.category_ap()
        rows += [(f"AP[{n}]", cap_a[n], cap_b[n]) for n in a.category_names]

    df = pd.DataFrame(rows, columns=["metric", "a", "b"])
    both_nan = df["a"].isna() & df["b"].isna()
    df["delta"] = (df["a"] - df["b"]).where(~both_nan, 0.0)
    df["abs_delta"] = df["delta"].abs()
    df = df.sort_values("abs_delta", ascending=False, kind="mergesort", na_position="last")
    return df.drop(columns="abs_delta").reset_index(drop=True)


def write_results(results: Iterable[EvalResult], path, extra: Optional[Mapping[str, object]] = None) -> Path:
    """One JSON line per result."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            rec = r.to_record()
            if extra:
                rec.update(extra)
            f.write(json.dumps(rec) + "\n")
    return path


def read_results(path) -> List[EvalResult]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(EvalResult.from_record(json.loads(line)))
    return out
