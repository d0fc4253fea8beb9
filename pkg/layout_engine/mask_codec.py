"""
Principal-subspace mask codec.

Instance masks are cropped to their box, resampled to an m x m patch and
projected onto the top-D principal components of the training patches. The
model regresses those D coefficients; decoding maps them back to a patch that
is pasted into the page at the predicted box.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.decomposition import PCA
from torchvision.ops import roi_align

from layout_data.types import BBox, Dataset

logger = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 28


def crop_to_patch(raster: np.ndarray, bbox: BBox, m: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Bilinear resample of the box region of a page raster to an m x m float patch."""
    page = torch.as_tensor(np.asarray(raster, dtype=np.float32))[None, None]
    box = torch.tensor([[0.0, bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max]], dtype=torch.float32)
    patch = roi_align(page, box, output_size=(m, m), spatial_scale=1.0, sampling_ratio=1, aligned=True)
    return patch[0, 0].numpy().astype(np.float64)


def paste_patch(patch: np.ndarray, bbox: BBox, height: int, width: int, threshold: float = 0.5) -> np.ndarray:
    """Inverse of crop_to_patch: resample the patch over the box pixels and binarize."""
    out = np.zeros((height, width), dtype=bool)
    c0, c1 = max(0, int(np.ceil(bbox.x_min - 0.5))), min(width, int(np.ceil(bbox.x_max - 0.5)))
    r0, r1 = max(0, int(np.ceil(bbox.y_min - 0.5))), min(height, int(np.ceil(bbox.y_max - 0.5)))
    if c1 <= c0 or r1 <= r0 or bbox.width <= 0 or bbox.height <= 0:
        return out
    xs = (np.arange(c0, c1) + 0.5 - bbox.x_min) / bbox.width * 2.0 - 1.0
    ys = (np.arange(r0, r1) + 0.5 - bbox.y_min) / bbox.height * 2.0 - 1.0
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    grid = torch.as_tensor(np.stack([gx, gy], axis=-1), dtype=torch.float32)[None]
    src = torch.as_tensor(np.asarray(patch, dtype=np.float32))[None, None]
    sampled = F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=False)
    out[r0:r1, c0:c1] = sampled[0, 0].numpy() >= threshold
    return out


@dataclass
class MaskCodec:
    components: np.ndarray  # (D, m*m), orthonormal rows
    mean: np.ndarray  # (m*m,)
    patch_size: int
    residual_energy: float  # squared reconstruction error summed over the fit set

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    def encode(self, patch: np.ndarray) -> np.ndarray:
        x = np.asarray(patch, dtype=np.float64).reshape(-1, self.patch_size * self.patch_size)
        codes = (x - self.mean) @ self.components.T
        return codes[0] if np.ndim(patch) == 2 else codes

    def decode(self, code: np.ndarray, threshold: Optional[float] = None) -> np.ndarray:
        v = np.asarray(code, dtype=np.float64)
        flat = v.reshape(-1, self.dim) @ self.components + self.mean
        patches = flat.reshape(-1, self.patch_size, self.patch_size)
        if threshold is not None:
            patches = patches >= threshold
        return patches[0] if v.ndim == 1 else patches

    def to_state(self) -> Dict[str, torch.Tensor]:
        return {
            "components": torch.as_tensor(self.components),
            "mean": torch.as_tensor(self.mean),
            "patch_size": torch.tensor(self.patch_size),
            "residual_energy": torch.tensor(self.residual_energy, dtype=torch.float64),
        }

    @classmethod
    def from_state(cls, state: Dict[str, torch.Tensor]) -> "MaskCodec":
        return cls(state["components"].double().numpy(), state["mean"].double().numpy(),
                   int(state["patch_size"]), float(state["residual_energy"]))


def mask_codec_fit(patches: Sequence[np.ndarray], dim: int, patch_size: Optional[int] = None) -> MaskCodec:
    x = np.asarray(list(patches), dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a stack of square patches, got shape {x.shape}")
    m = patch_size or x.shape[1]
    if x.shape[1:] != (m, m):
        raise ValueError(f"patches must be {m}x{m}, got {x.shape[1:]}")
    if dim < 1 or dim > m * m:
        raise ValueError(f"mask embedding dim must be in [1, {m * m}], got {dim}")
    if len(x) < dim:
        raise ValueError(f"need at least {dim} training masks to fit a {dim}-dim codec, got {len(x)}")

    flat = x.reshape(len(x), -1)
    pca = PCA(n_components=dim, svd_solver="full")
    pca.fit(flat)
    centered = flat - pca.mean_
    total = float((centered ** 2).sum())
    retained = float(((centered @ pca.components_.T) ** 2).sum())
    codec = MaskCodec(pca.components_.copy(), pca.mean_.copy(), m, max(total - retained, 0.0))
    logger.info("Fitted %d-dim mask codec on %d patches (%dx%d), residual energy %.4f",
                dim, len(x), m, m, codec.residual_energy)
    return codec


def mask_encode(codec: MaskCodec, patch: np.ndarray) -> np.ndarray:
    return codec.encode(patch)


def mask_decode(codec: MaskCodec, code: np.ndarray, threshold: Optional[float] = 0.5) -> np.ndarray:
    return codec.decode(code, threshold)


def training_patches(datasets: Iterable[Dataset], m: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Box-cropped patches of every instance that carries both a box and a mask."""
    out = []
    for d in datasets:
        for page in d.pages:
            for inst in page.instances:
                if inst.bbox is None or inst.mask is None or inst.bbox.area() <= 0:
                    continue
                out.append(crop_to_patch(inst.mask.to_raster(page.height, page.width), inst.bbox, m))
    return np.asarray(out, dtype=np.float64).reshape(-1, m, m)
