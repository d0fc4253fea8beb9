import hashlib
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = {'png', 'jpg', 'jpeg', 'tif', 'tiff', 'bmp'}


def allowed_image(filename):
    return '.' in filename and \
           filename.rsplit('.', 1)[1].lower() in IMAGE_EXTENSIONS


def load_image(path):
    """Page image as an H x W x 3 uint8 array."""
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'))


def save_image(array, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)
    return path


def load_page_images(dataset, root) -> Dict[int, np.ndarray]:
    """Loads every page's file_name relative to root, keyed by image_id."""
    root = Path(root)
    images = {}
    for page in dataset.pages:
        if not page.file_name:
            raise FileNotFoundError(f'page {page.image_id} has no file_name')
        if not allowed_image(page.file_name):
            raise ValueError(f'page {page.image_id}: unsupported image type {page.file_name}')
        path = root / page.file_name
        if not path.exists():
            raise FileNotFoundError(f'image for page {page.image_id} not found at {path}')
        img = load_image(path)
        if img.shape[:2] != (page.height, page.width):
            raise ValueError(f'{path} is {img.shape[1]}x{img.shape[0]} but page {page.image_id} '
                             f'is annotated as {page.width}x{page.height}')
        images[page.image_id] = img
    return images


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def codec_cache_path(digest, dim, patch_size, cache_dir: Optional[str] = None):
    """Where a mask codec fitted on annotations with this digest is cached."""
    from config import Config

    root = Path(cache_dir or Config.CACHE_DIR) / 'codecs'
    return root / f'{digest[:16]}_d{dim}_m{patch_size}.pt'


def format_duration(seconds):
    """Converts seconds to HH:MM:SS.mmm for logs and manifests."""
    millis = int((seconds - int(seconds)) * 1000)
    seconds = int(seconds)
    minutes, seconds = divmod(seconds, 60)
    hours, minutes = divmod(minutes, 60)
    return f"{hours:02}:{minutes:02}:{seconds:02}.{millis:03}"

