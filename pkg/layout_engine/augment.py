import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from layout_data.types import BBox, Instance, InstanceMask, PageRecord

logger = logging.getLogger(__name__)


@dataclass
class AugmentConfig:
    enabled: bool = True
    min_short: int = 704
    max_short: int = 896
    max_long: int = 1333
    crop_prob: float = 0.5
    min_crop_frac: float = 0.7

    def validate(self) -> "AugmentConfig":
        if not 0 < self.min_short <= self.max_short:
            raise ValueError(f"short-side range [{self.min_short}, {self.max_short}] is invalid")
        if self.max_long < 1:
            raise ValueError(f"max_long must be positive, got {self.max_long}")
        if not 0.0 <= self.crop_prob <= 1.0:
            raise ValueError(f"crop_prob must be in [0, 1], got {self.crop_prob}")
        if not 0.0 < self.min_crop_frac <= 1.0:
            raise ValueError(f"min_crop_frac must be in (0, 1], got {self.min_crop_frac}")
        return self


def resize_scale(width: int, height: int, short_side: float, max_long: float) -> float:
    """Scale that brings the short side to short_side unless the long side would exceed max_long."""
    return min(short_side / min(width, height), max_long / max(width, height))


def _scale_instance(inst: Instance, sx: float, sy: float, new_w: int, new_h: int) -> Instance:
    bbox = inst.bbox.scaled(sx, sy) if inst.bbox is not None else None
    mask = inst.mask
    if mask is not None:
        if mask.is_raster:
            img = Image.fromarray(mask.raster.astype(np.uint8) * 255)
            mask = InstanceMask.from_raster(np.asarray(img.resize((new_w, new_h), Image.NEAREST)) > 127)
        else:
            mask = InstanceMask.from_polygons(
                [[v * (sx if i % 2 == 0 else sy) for i, v in enumerate(p)] for p in mask.polygons])
    return Instance(inst.category_id, bbox, mask, inst.score)


def crop_page(page: PageRecord, image: np.ndarray, window: Tuple[int, int, int, int]):
    """Crop to (x0, y0, x1, y1); instances left with no area inside the window are removed."""
    x0, y0, x1, y1 = window
    w, h = x1 - x0, y1 - y0
    win = BBox(float(x0), float(y0), float(x1), float(y1))
    kept = []
    for inst in page.instances:
        bbox = inst.bbox.intersection(win).shifted(-x0, -y0) if inst.bbox is not None else None
        mask = None
        if inst.mask is not None:
            raster = inst.mask.to_raster(page.height, page.width)[y0:y1, x0:x1]
            if not raster.any():
                continue
            mask = InstanceMask.from_raster(raster)
        if bbox is not None and bbox.area() <= 0:
            continue
        kept.append(Instance(inst.category_id, bbox, mask, inst.score))
    cropped = PageRecord(page.image_id, w, h, page.subset, tuple(kept), page.file_name)
    return cropped, image[y0:y1, x0:x1]


def resize_page(page: PageRecord, image: np.ndarray, scale: float):
    new_w, new_h = max(1, int(round(page.width * scale))), max(1, int(round(page.height * scale)))
    sx, sy = new_w / page.width, new_h / page.height
    resized = np.asarray(Image.fromarray(image).resize((new_w, new_h), Image.BILINEAR))
    instances = tuple(_scale_instance(i, sx, sy, new_w, new_h) for i in page.instances)
    return PageRecord(page.image_id, new_w, new_h, page.subset, instances, page.file_name), resized


def augment(page: PageRecord, image: np.ndarray, seed: int,
            cfg: Optional[AugmentConfig] = None) -> Tuple[PageRecord, np.ndarray]:
    """Optional random crop, then the short/long-side resize."""
    cfg = (cfg or AugmentConfig()).validate()
    if not cfg.enabled:
        return page, image
    rng = np.random.default_rng(seed)
    if cfg.crop_prob > 0 and rng.random() < cfg.crop_prob:
        fw, fh = rng.uniform(cfg.min_crop_frac, 1.0, size=2)
        cw, ch = max(1, int(page.width * fw)), max(1, int(page.height * fh))
        cx = int(rng.integers(0, page.width - cw + 1))
        cy = int(rng.integers(0, page.height - ch + 1))
        page, image = crop_page(page, image, (cx, cy, cx + cw, cy + ch))
    short = rng.uniform(cfg.min_short, cfg.max_short)
    scale = resize_scale(page.width, page.height, short, cfg.max_long)
    return resize_page(page, image, scale)
