"""8-bit grayscale PNG export of normalized maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_grayscale(path: str | Path, unit: np.ndarray) -> None:
    """Write values in [0,1] as an 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(unit), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)
