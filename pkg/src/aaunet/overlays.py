"""Prediction visualization: class-colored mask overlays and attention maps."""

from __future__ import annotations

import numpy as np
from PIL import Image

# fixed class -> RGB palette, stable for golden-image comparisons
PALETTE = {
    1: (255, 0, 0),      # ICH red
    2: (0, 0, 255),      # SDH blue
    3: (255, 255, 0),    # SAH yellow
    4: (0, 200, 0),      # EDH green
    5: (255, 0, 255),    # CSDH magenta
    6: (0, 255, 255),    # Pneumocranium cyan
    7: (255, 165, 0),    # IVH orange
}


def overlay_rgb(image, mask):
    """Grayscale image to RGB with lesion pixels replaced by palette colors."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat((gray * 255.0).round().astype(np.uint8)[:, :, None], 3, axis=2)
    mask = np.asarray(mask)
    for cls, color in PALETTE.items():
        rgb[mask == cls] = color
    return rgb


def save_overlay_png(path, image, mask):
    Image.fromarray(overlay_rgb(image, mask), mode="RGB").save(path)


def save_mask_png(path, mask):
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def save_alpha_png(path, alpha):
    """Attention coefficients in (0,1) as an 8-bit grayscale map."""
    a = np.clip(np.asarray(alpha, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((a * 255.0).round().astype(np.uint8), mode="L").save(path)
