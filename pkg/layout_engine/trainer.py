"""
Training loop for TransDLANet.

AdamW with a piecewise-constant schedule: base_lr until the first milestone,
then base_lr * 0.1, then base_lr * 0.01. Every page is one sample; a batch
averages the per-page set-prediction losses. Data order and augmentation
seeds are derived from the run seed, so a single-worker run is repeatable.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from layout_data.errors import DivergenceError
from layout_data.types import Dataset, Instance, PageRecord
from layout_engine.augment import AugmentConfig, augment
from layout_engine.evaluator import EvalConfig, evaluate
from layout_engine.geometry import MatchWeights
from layout_engine.losses import Targets, compute_loss, encode_targets
from layout_engine.mask_codec import MaskCodec, mask_codec_fit, training_patches
from layout_engine.model import TransDLANet, image_to_tensor, predict, save_checkpoint
from layout_engine.pipeline import parallel_map, update_job_status
from utils.exporters import append_jsonl

logger = logging.getLogger(__name__)

EVAL_SCORE_THRESHOLD = 0.05


@dataclass
class TrainConfig:
    epochs: int = 500
    base_lr: float = 2e-5
    lr_milestones: Tuple[float, float] = (0.5, 0.75)
    lr_factors: Tuple[float, float] = (0.1, 0.01)
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    batch_size: int = 1
    focal: bool = False
    max_grad_norm: float = 0.0
    eval_every: int = 0
    max_steps: Optional[int] = None
    cls_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    mask_weight: float = 1.0

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        # 20 pages x 100 epochs = 2,000 single-page steps
        base = dict(epochs=100, base_lr=1e-3, max_grad_norm=1.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        m1, m2 = self.lr_milestones
        if not 0.0 < m1 <= m2 <= 1.0:
            raise ValueError(f"lr milestones must satisfy 0 < m1 <= m2 <= 1, got {self.lr_milestones}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.eval_every < 0 or self.max_grad_norm < 0:
            raise ValueError("eval_every and max_grad_norm must be non-negative")
        return self

    def weights(self) -> MatchWeights:
        return MatchWeights(self.cls_weight, self.l1_weight, self.giou_weight, self.mask_weight)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch must be in [0, {cfg.epochs}), got {epoch}")
    m1, m2 = cfg.lr_milestones
    f1, f2 = cfg.lr_factors
    if epoch >= m2 * cfg.epochs:
        return cfg.base_lr * f2
    if epoch >= m1 * cfg.epochs:
        return cfg.base_lr * f1
    return cfg.base_lr


class MetricLog:
    """Append-only per-epoch records, mirrored to a JSONL file when a path is given."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, object]] = []
        if self.path is not None and self.path.exists():
            self.path.unlink()

    def append(self, record: Dict[str, object]) -> None:
        self.records.append(record)
        if self.path is not None:
            append_jsonl(self.path, record)

    def losses(self) -> List[float]:
        return [float(r["loss"]) for r in self.records]

    def lrs(self) -> List[float]:
        return [float(r["lr"]) for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class TrainResult:
    model: TransDLANet
    log: MetricLog
    steps: int
    checkpoint: Optional[Path] = None
    step_losses: List[float] = field(default_factory=list)


def fit_codec(dataset: Dataset, dim: int, patch_size: int) -> Optional[MaskCodec]:
    """
    Mask codec from the training masks. With fewer masks than dimensions the
    fitted basis is zero-padded to `dim` rows; box-only data gets no codec.
    """
    patches = training_patches([dataset], patch_size)
    if len(patches) == 0:
        logger.warning("No instance masks in the training data; masks will be predicted as boxes")
        return None
    k = min(dim, len(patches))
    codec = mask_codec_fit(patches, k, patch_size)
    if k < dim:
        logger.warning("Only %d training masks for a %d-dim codec; padding the basis with zeros", k, dim)
        pad = np.zeros((dim - k, codec.components.shape[1]))
        codec = MaskCodec(np.vstack([codec.components, pad]), codec.mean, patch_size, codec.residual_energy)
    return codec


def _sample_seed(seed: int, epoch: int, image_id: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, image_id]).generate_state(1)[0])


def _check_finite(loss: torch.Tensor, terms: Mapping[str, float], epoch: int, step: int, image_ids) -> None:
    if torch.isfinite(loss):
        return
    diagnostic = {"epoch": epoch, "step": step, "image_ids": list(image_ids),
                  **{k: float(v) for k, v in terms.items()}}
    logger.error("Training diverged: %s", diagnostic)
    raise DivergenceError(diagnostic)


def predict_pages(model: TransDLANet, dataset: Dataset, images: Mapping[int, np.ndarray],
                  score_threshold: float = EVAL_SCORE_THRESHOLD, max_instances: int = 100,
                  workers: int = 1) -> Dict[int, List[Instance]]:
    return dict(parallel_map(
        lambda p: (p.image_id, predict(model, images[p.image_id], score_threshold, max_instances)),
        dataset.pages, workers))


def eval_snapshot(model: TransDLANet, dataset: Dataset, images: Mapping[int, np.ndarray],
                  eval_cfg: Optional[EvalConfig] = None) -> Dict[str, float]:
    preds = predict_pages(model, dataset, images)
    det = evaluate(preds, dataset, eval_cfg, "boxes")
    seg = evaluate(preds, dataset, eval_cfg, "masks")
    return {"det_mAP": det.mAP, "det_AP50": det.AP50, "seg_mAP": seg.mAP, "seg_AP50": seg.AP50}


def train(model: TransDLANet, dataset: Dataset, cfg: TrainConfig, images: Mapping[int, np.ndarray],
          out_dir=None, augment_cfg: Optional[AugmentConfig] = None, eval_dataset: Optional[Dataset] = None,
          eval_images: Optional[Mapping[int, np.ndarray]] = None,
          workers: int = 1, job_id: Optional[str] = None,
          on_epoch: Optional[Callable[[Dict[str, object]], None]] = None) -> TrainResult:
    """
    Train in place. `images` maps image_id to an H x W x 3 page image. When
    out_dir is given, metrics.jsonl and model.pt are written there. Periodic
    evaluation runs on eval_dataset (default: the training pages) with
    eval_images, falling back to `images`.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    missing = [p.image_id for p in dataset.pages if p.image_id not in images]
    if missing:
        raise ValueError(f"no image for pages {missing[:5]}")
    eval_dataset = eval_dataset or dataset
    eval_images = eval_images if eval_images is not None else images
    if cfg.eval_every:
        missing = [p.image_id for p in eval_dataset.pages if p.image_id not in eval_images]
        if missing:
            raise ValueError(f"no image for evaluation pages {missing[:5]}")
    if model.cfg.num_classes != len(dataset.taxonomy):
        raise ValueError(f"model predicts {model.cfg.num_classes} classes, taxonomy "
                         f"'{dataset.taxonomy.id}' has {len(dataset.taxonomy)}")
    if dataset.taxonomy.ids != list(range(1, len(dataset.taxonomy) + 1)):
        raise ValueError("category ids must be 1..C to serve as class indices; remap the dataset first")
    augment_cfg = augment_cfg or AugmentConfig(enabled=False)
    out_dir = Path(out_dir) if out_dir is not None else None
    log = MetricLog(out_dir / "metrics.jsonl" if out_dir is not None else None)

    if model.codec is None:
        model.codec = fit_codec(dataset, model.cfg.mask_embedding_dim, model.cfg.mask_patch_size)
    codec = model.codec
    dim = model.cfg.mask_embedding_dim
    weights = cfg.weights()

    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, betas=tuple(cfg.betas),
                                  weight_decay=cfg.weight_decay)

    fixed: Dict[int, Tuple[torch.Tensor, Targets]] = {}

    def prepare(page: PageRecord, epoch: int) -> Tuple[torch.Tensor, Targets]:
        if not augment_cfg.enabled:
            if page.image_id not in fixed:
                fixed[page.image_id] = (image_to_tensor(images[page.image_id]), encode_targets(page, codec, dim))
            return fixed[page.image_id]
        p, img = augment(page, images[page.image_id], _sample_seed(cfg.seed, epoch, page.image_id), augment_cfg)
        return image_to_tensor(img), encode_targets(p, codec, dim)

    pages = list(dataset.pages)
    steps = 0
    step_losses: List[float] = []
    model.train()
    logger.info("Training on %d pages for %d epochs (batch %d, base lr %g)",
                len(pages), cfg.epochs, cfg.batch_size, cfg.base_lr)

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = order_rng.permutation(len(pages))
        sums: Dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [pages[i] for i in perm[start:start + cfg.batch_size]]
            samples = parallel_map(lambda p: prepare(p, epoch), batch, workers)
            optimizer.zero_grad()
            total = 0.0
            terms: Dict[str, float] = {}
            for x, targets in samples:
                out = compute_loss(model(x), targets, weights, cfg.focal)
                total = total + out.total / len(samples)
                for k, v in out.terms.items():
                    terms[k] = terms.get(k, 0.0) + v / len(samples)
            _check_finite(total, terms, epoch, steps, [p.image_id for p in batch])
            total.backward()
            if cfg.max_grad_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            optimizer.step()
            steps += 1
            n_batches += 1
            step_losses.append(float(total.detach()))
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break

        record: Dict[str, object] = {"epoch": epoch, "lr": lr, "steps": steps,
                                     "loss": sums.get("total", math.nan) / max(n_batches, 1)}
        record.update({k: v / max(n_batches, 1) for k, v in sums.items() if k != "total"})
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            record["eval"] = eval_snapshot(model, eval_dataset, eval_images)
            model.train()
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if job_id is not None:
            update_job_status(job_id, "processing", int(100 * (epoch + 1) / cfg.epochs),
                              f"epoch {epoch + 1}/{cfg.epochs} loss {record['loss']:.4f}")
        logger.debug("epoch %d lr %g loss %.5f", epoch, lr, record["loss"])
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            logger.info("Reached max_steps=%d at epoch %d", cfg.max_steps, epoch)
            break

    model.eval()
    checkpoint = None
    if out_dir is not None:
        checkpoint = out_dir / "model.pt"
        save_checkpoint(model, checkpoint, dataset.taxonomy.names, codec)
    logger.info("Finished training: %d steps, final epoch loss %.5f", steps, log.records[-1]["loss"])
    return TrainResult(model, log, steps, checkpoint, step_losses)


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")
