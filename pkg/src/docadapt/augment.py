"""Weak/strong photometric augmentation branches.

Teachers consume the weak view, the student the strong one.  Every transform
here is photometric: pixel grids keep their shape and no coordinates move, so
teacher boxes are valid student targets without any remapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Registry of the transforms make_views may apply. Anything added here must
# stay "photometric" or pseudo boxes would need coordinate remapping.
TRANSFORMS = (
    ("brightness", "photometric"),
    ("contrast", "photometric"),
    ("gaussian_noise", "photometric"),
    ("random_erase", "photometric"),
)


@dataclass(frozen=True)
class AugmentConfig:
    weak_brightness: float = 0.05
    strong_brightness: float = 0.3
    strong_contrast: float = 0.3
    noise_sigma: float = 0.03
    erase_count_max: int = 3
    erase_area_max: float = 0.05


@dataclass(frozen=True)
class AugmentedViews:
    weak: np.ndarray
    strong: np.ndarray


def make_views(image: np.ndarray, seed: int, config: AugmentConfig = AugmentConfig()) -> AugmentedViews:
    """Produce the (weak, strong) photometric views of one page, deterministically.

    Weak: brightness jitter only.  Strong: brightness/contrast jitter,
    additive Gaussian noise, and up to ``erase_count_max`` erased rectangles
    of at most ``erase_area_max`` page area each.  Outputs are clipped to
    [0,1] and keep the input's shape.
    """
    image = np.asarray(image, dtype=np.float32)
    rng = np.random.Generator(np.random.PCG64(int(seed)))

    weak = image + rng.uniform(-config.weak_brightness, config.weak_brightness)

    contrast = 1.0 + rng.uniform(-config.strong_contrast, config.strong_contrast)
    brightness = rng.uniform(-config.strong_brightness, config.strong_brightness)
    strong = (image - 0.5) * contrast + 0.5 + brightness
    strong = strong + rng.normal(0.0, config.noise_sigma, image.shape)
    h, w = image.shape[-2:]
    for _ in range(int(rng.integers(0, config.erase_count_max + 1))):
        area = rng.uniform(0.005, config.erase_area_max) * h * w
        aspect = rng.uniform(0.4, 2.5)
        eh = min(h, max(2, int(round(np.sqrt(area * aspect)))))
        ew = min(w, max(2, int(round(np.sqrt(area / aspect)))))
        y0 = int(rng.integers(0, h - eh + 1))
        x0 = int(rng.integers(0, w - ew + 1))
        strong[..., y0 : y0 + eh, x0 : x0 + ew] = rng.uniform(0.0, 1.0)

    return AugmentedViews(
        weak=np.clip(weak, 0.0, 1.0).astype(np.float32),
        strong=np.clip(strong, 0.0, 1.0).astype(np.float32),
    )
