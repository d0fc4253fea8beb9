"""
TransDLANet at desk scale: query-based instance segmentation with K rounds of
box refinement.

Every round crops region features for the current query boxes (RoIAlign),
mixes the query embeddings with a Transformer encoder that carries no
positional encoding, fuses each query with its region through per-query
dynamic channel mixing, and reads class logits, box deltas and mask
embeddings off three MLP branches shared across rounds.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align as tv_roi_align

from layout_data.types import BBox, Instance, InstanceMask
from layout_engine.geometry import box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, mask_from_box
from layout_engine.mask_codec import MaskCodec, paste_patch

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tdla-v1"
BACKBONE_STRIDE = 8
MIN_IMAGE_SIZE = 64
BOX_EPS = 1e-4
MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass
class ModelConfig:
    num_queries: int = 300
    embed_dim: int = 256
    mask_embedding_dim: int = 40
    refinement_iterations: int = 6
    num_classes: int = 74
    roi_resolution: int = 7
    encoder_layers: int = 1
    encoder_heads: int = 8
    ffn_dim: int = 1024
    dynamic_dim: int = 64
    mask_patch_size: int = 28
    use_encoder: bool = True
    use_dynamic_decoder: bool = True
    share_heads: bool = True
    shared_trunk: bool = False
    detach_boxes: bool = True

    @classmethod
    def toy(cls, num_classes: int = 74, **overrides) -> "ModelConfig":
        base = dict(num_queries=50, embed_dim=64, mask_embedding_dim=40, refinement_iterations=3,
                    encoder_layers=1, encoder_heads=4, ffn_dim=128, dynamic_dim=16)
        base.update(overrides)
        return cls(num_classes=num_classes, **base)

    @classmethod
    def full(cls, num_classes: int = 74, **overrides) -> "ModelConfig":
        base = dict(num_queries=300, embed_dim=256, mask_embedding_dim=40, refinement_iterations=6,
                    encoder_layers=1, encoder_heads=8, ffn_dim=1024, dynamic_dim=64)
        base.update(overrides)
        return cls(num_classes=num_classes, **base)

    def validate(self) -> "ModelConfig":
        positive = ("num_queries", "embed_dim", "mask_embedding_dim", "refinement_iterations",
                    "num_classes", "roi_resolution", "encoder_heads", "ffn_dim", "dynamic_dim",
                    "mask_patch_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.encoder_layers < 0:
            raise ValueError(f"encoder_layers must be >= 0, got {self.encoder_layers}")
        if self.embed_dim % self.encoder_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by encoder_heads {self.encoder_heads}")
        if self.mask_embedding_dim > self.mask_patch_size ** 2:
            raise ValueError(f"mask_embedding_dim {self.mask_embedding_dim} exceeds mask_patch_size^2")
        return self

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class QueryState:
    embeddings: torch.Tensor  # (N, d)
    boxes: torch.Tensor  # (N, 4) normalized cx, cy, w, h


@dataclass
class IterationOutput:
    class_logits: torch.Tensor  # (N, C+1), column 0 is no-object
    boxes: torch.Tensor  # (N, 4) normalized cx, cy, w, h
    mask_embeddings: torch.Tensor  # (N, D)


@dataclass
class ModelOutput:
    iterations: List[IterationOutput] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iterations)

    @property
    def final(self) -> IterationOutput:
        return self.iterations[-1]


def roi_align_features(features: torch.Tensor, boxes: torch.Tensor, resolution: int,
                       sampling_ratio: int = 1) -> torch.Tensor:
    """
    Bilinear region features for normalized cx, cy, w, h boxes.

    Box coordinates are taken relative to the feature map extent, so the
    full box (0.5, 0.5, 1, 1) covers the whole map. Returns (N, d, R, R).
    """
    if features.dim() == 3:
        features = features[None]
    h, w = features.shape[-2:]
    xyxy = box_cxcywh_to_xyxy(boxes.to(features.dtype))
    scale = torch.tensor([w, h, w, h], dtype=features.dtype, device=features.device)
    rois = torch.cat([torch.zeros_like(xyxy[:, :1]), xyxy * scale], dim=1)
    return tv_roi_align(features, rois, output_size=(resolution, resolution), spatial_scale=1.0,
                        sampling_ratio=sampling_ratio, aligned=True)


class MLP(nn.Module):
    """Plain feed-forward stack with ReLU between layers."""

    def __init__(self, input_dim, hidden_dim, output_dim, num_layers):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1) + [output_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class Backbone(nn.Module):
    """Four conv stages, total stride 8, no normalization layers."""

    def __init__(self, embed_dim: int):
        super().__init__()
        c1, c2 = max(embed_dim // 4, 8), max(embed_dim // 2, 8)
        self.stages = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c2, embed_dim, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(embed_dim, embed_dim, 3, stride=1, padding=1),
        )

    def forward(self, x):
        return self.stages(x)


class DynamicConv(nn.Module):
    """
    Per-query channel mixing: two linear maps whose weights are generated from
    the query embedding are applied to that query's R x R region features.
    """

    def __init__(self, embed_dim: int, dynamic_dim: int, resolution: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.dynamic_dim = dynamic_dim
        self.dynamic_layer = nn.Linear(embed_dim, 2 * embed_dim * dynamic_dim)
        self.norm1 = nn.LayerNorm(dynamic_dim)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.out_layer = nn.Linear(embed_dim * resolution * resolution, embed_dim)
        self.norm3 = nn.LayerNorm(embed_dim)

    def forward(self, q_embed: torch.Tensor, roi: torch.Tensor) -> torch.Tensor:
        # roi: (N, d, R, R) -> (N, R*R, d)
        n = roi.shape[0]
        feats = roi.flatten(2).permute(0, 2, 1)
        params = self.dynamic_layer(q_embed)
        split = self.embed_dim * self.dynamic_dim
        w1 = params[:, :split].view(n, self.embed_dim, self.dynamic_dim)
        w2 = params[:, split:].view(n, self.dynamic_dim, self.embed_dim)
        feats = F.relu(self.norm1(torch.bmm(feats, w1)))
        feats = F.relu(self.norm2(torch.bmm(feats, w2)))
        return F.relu(self.norm3(self.out_layer(feats.flatten(1))))


class RefinementStage(nn.Module):
    """Encoder, dynamic decoder and FFN for one refinement round."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.use_encoder = cfg.use_encoder and cfg.encoder_layers > 0
        self.use_dynamic = cfg.use_dynamic_decoder
        if self.use_encoder:
            layer = nn.TransformerEncoderLayer(d, cfg.encoder_heads, dim_feedforward=cfg.ffn_dim,
                                               dropout=0.0, batch_first=True)
            self.encoder = nn.TransformerEncoder(layer, cfg.encoder_layers, enable_nested_tensor=False)
        if self.use_dynamic:
            self.dynamic = DynamicConv(d, cfg.dynamic_dim, cfg.roi_resolution)
        self.norm = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.ReLU(inplace=True), nn.Linear(cfg.ffn_dim, d))
        self.ffn_norm = nn.LayerNorm(d)

    def encode(self, q_embed: torch.Tensor) -> torch.Tensor:
        if not self.use_encoder:
            return q_embed
        return self.encoder(q_embed[None])[0]

    def decode(self, q_embed: torch.Tensor, roi: torch.Tensor) -> torch.Tensor:
        if not self.use_dynamic:
            return roi.mean(dim=(2, 3))
        return self.dynamic(q_embed, roi)

    def forward(self, q_embed: torch.Tensor, roi: torch.Tensor) -> torch.Tensor:
        q = self.encode(q_embed)
        q = self.norm(q + self.decode(q, roi))
        return self.ffn_norm(q + self.ffn(q))


class PredictionHeads(nn.Module):
    """Classification, box-delta and mask-embedding branches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        if cfg.shared_trunk:
            self.trunk = MLP(d, d, d, 2)
            self.cls = nn.Linear(d, cfg.num_classes + 1)
            self.box = nn.Linear(d, 4)
            self.mask = nn.Linear(d, cfg.mask_embedding_dim)
        else:
            self.trunk = None
            self.cls = MLP(d, d, cfg.num_classes + 1, 2)
            self.box = MLP(d, d, 4, 3)
            self.mask = MLP(d, d, cfg.mask_embedding_dim, 3)
        last = self.box if isinstance(self.box, nn.Linear) else self.box.layers[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def forward(self, fused: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = F.relu(self.trunk(fused)) if self.trunk is not None else fused
        return self.cls(x), self.box(x), self.mask(x)


class TransDLANet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.codec: Optional[MaskCodec] = None
        self.backbone = Backbone(cfg.embed_dim)
        self.query_embed = nn.Embedding(cfg.num_queries, cfg.embed_dim)
        self.register_buffer("init_boxes", torch.tensor([[0.5, 0.5, 1.0, 1.0]]).repeat(cfg.num_queries, 1))
        self.stages = nn.ModuleList(RefinementStage(cfg) for _ in range(cfg.refinement_iterations))
        n_heads = 1 if cfg.share_heads else cfg.refinement_iterations
        self.heads = nn.ModuleList(PredictionHeads(cfg) for _ in range(n_heads))

    def head_for(self, k: int) -> PredictionHeads:
        return self.heads[0] if self.cfg.share_heads else self.heads[k]

    def initial_state(self) -> QueryState:
        return QueryState(self.query_embed.weight, self.init_boxes)

    def backbone_features(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image[None]
        h, w = image.shape[-2:]
        if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
            raise ValueError(f"image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {h}x{w}")
        return self.backbone(image)

    def roi_align(self, features: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        return roi_align_features(features, boxes, self.cfg.roi_resolution)

    def encoder_forward(self, q: QueryState, k: int = 0) -> torch.Tensor:
        return self.stages[k].encode(q.embeddings)

    def dynamic_decode(self, q_embed: torch.Tensor, roi: torch.Tensor, k: int = 0) -> torch.Tensor:
        if q_embed.shape[0] != roi.shape[0]:
            raise ValueError(f"{q_embed.shape[0]} queries but {roi.shape[0]} regions")
        return self.stages[k].decode(q_embed, roi)

    def heads_forward(self, fused: torch.Tensor, k: int = 0):
        return self.head_for(k)(fused)

    def update_boxes(self, prev: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
        """Centre shift scaled by box size, log-scale size change, clamped to the unit square."""
        base = prev.detach() if self.cfg.detach_boxes else prev
        cx = base[:, 0] + deltas[:, 0] * base[:, 2]
        cy = base[:, 1] + deltas[:, 1] * base[:, 3]
        w = base[:, 2] * torch.exp(deltas[:, 2].clamp(max=MAX_LOG_SCALE))
        h = base[:, 3] * torch.exp(deltas[:, 3].clamp(max=MAX_LOG_SCALE))
        xyxy = box_cxcywh_to_xyxy(torch.stack([cx, cy, w, h], dim=-1)).clamp(min=0.0, max=1.0)
        boxes = box_xyxy_to_cxcywh(xyxy)
        return torch.cat([boxes[:, :2], boxes[:, 2:].clamp(min=BOX_EPS)], dim=-1)

    def forward(self, image: torch.Tensor) -> ModelOutput:
        features = self.backbone_features(image)
        state = self.initial_state()
        out = ModelOutput()
        for k, stage in enumerate(self.stages):
            roi = self.roi_align(features, state.boxes)
            q = stage(state.embeddings, roi)
            logits, deltas, embeds = self.heads_forward(q, k)
            boxes = self.update_boxes(state.boxes, deltas)
            out.iterations.append(IterationOutput(logits, boxes, embeds))
            state = QueryState(q, boxes)
        return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def init_model(cfg: ModelConfig, seed: int = 0) -> TransDLANet:
    """Deterministic construction; the global torch RNG is left untouched."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TransDLANet(cfg)
    logger.info("Initialized TransDLANet: %d parameters, N=%d, K=%d, D=%d",
                count_parameters(model), cfg.num_queries, cfg.refinement_iterations, cfg.mask_embedding_dim)
    return model


def image_to_tensor(image) -> torch.Tensor:
    """H x W x 3 array (uint8 or float in [0, 1]) to a (1, 3, H, W) float tensor."""
    if isinstance(image, torch.Tensor):
        t = image.float()
        return t[None] if t.dim() == 3 else t
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    t = torch.as_tensor(arr.astype(np.float32))
    if arr.dtype == np.uint8:
        t = t / 255.0
    return t.permute(2, 0, 1)[None].contiguous()


def backbone_features(model: TransDLANet, image) -> torch.Tensor:
    return model.backbone_features(image_to_tensor(image))


def forward(model: TransDLANet, image) -> ModelOutput:
    return model(image_to_tensor(image))


@torch.no_grad()
def predict(model: TransDLANet, image, score_threshold: float = 0.5, max_instances: int = 100,
            codec: Optional[MaskCodec] = None) -> List[Instance]:
    """
    Final-round detections: best foreground class per query, kept when its
    probability reaches the threshold, top max_instances by score. No NMS.
    """
    was_training = model.training
    model.eval()
    x = image_to_tensor(image)
    height, width = x.shape[-2:]
    final = model(x).final
    model.train(was_training)

    probs = final.class_logits.double().softmax(-1)[:, 1:]
    scores, labels = probs.max(-1)
    keep = torch.nonzero(scores >= score_threshold).flatten()
    keep = keep[torch.argsort(scores[keep], descending=True, stable=True)][:max_instances]

    codec = codec or model.codec
    boxes = box_cxcywh_to_xyxy(final.boxes.double()) * torch.tensor([width, height, width, height],
                                                                      dtype=torch.float64)
    out = []
    for i in keep.tolist():
        x0, y0, x1, y1 = boxes[i].clamp(min=0).tolist()
        bbox = BBox(x0, y0, min(x1, float(width)), min(y1, float(height)))
        if codec is not None:
            patch = codec.decode(final.mask_embeddings[i].double().numpy())
            mask = InstanceMask.from_raster(paste_patch(patch, bbox, height, width))
        else:
            mask = mask_from_box(bbox, height, width)
        out.append(Instance(int(labels[i]) + 1, bbox, mask, float(scores[i])))
    return out


def save_checkpoint(model: TransDLANet, path, taxonomy_names: Sequence[str] = (),
                    codec: Optional[MaskCodec] = None) -> None:
    codec = codec or model.codec
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "taxonomy": list(taxonomy_names),
        "state_dict": model.state_dict(),
        "codec": codec.to_state() if codec is not None else None,
    }, path)
    logger.info("Saved checkpoint to %s", path)


def load_checkpoint(path) -> Tuple[TransDLANet, List[str]]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    cfg = ModelConfig.from_dict(blob["config"])
    model = TransDLANet(cfg)
    model.load_state_dict(blob["state_dict"])
    if blob.get("codec") is not None:
        model.codec = MaskCodec.from_state(blob["codec"])
    model.eval()
    return model, list(blob.get("taxonomy", []))
