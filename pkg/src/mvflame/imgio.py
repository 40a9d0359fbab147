"""PNG image I/O.

Images travel through the pipeline as float64 arrays in [0, 1], linear light.
8-bit PNGs are decoded with gamma 2.2 on load and re-encoded on save.
"""

import numpy as np
from PIL import Image

GAMMA = 2.2


def load_png(path):
    """Load an 8-bit PNG as a linear H x W x 3 float array in [0, 1]."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb ** GAMMA


def save_png(path, image):
    """Gamma-encode a linear [0, 1] image and write an 8-bit PNG."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    encoded = np.clip(image, 0.0, 1.0) ** (1.0 / GAMMA)
    data = np.rint(encoded * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def save_mask_png(path, mask):
    """Write a boolean mask as a black/white PNG (no gamma)."""
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_mask_png(path):
    """Load a black/white PNG as a boolean mask (threshold at 50% gray)."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"))
    return data >= 128
