"""
Toy data generators with labels: Gaussian ring, 2-D swiss roll, band-limited 16x16 textures.
"""
import logging
from typing import NamedTuple, Optional

import numpy as np
from scipy.fft import idctn

from .errors import ConfigError
from .models import DatasetSpec

logger = logging.getLogger(__name__)

LOW_FREQ = 4


class Dataset(NamedTuple):
    samples: np.ndarray
    labels: np.ndarray


def ring_centers(modes: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _low_frequency_image(coeffs: np.ndarray, size: int) -> np.ndarray:
    block = np.zeros((size, size))
    block[:LOW_FREQ, :LOW_FREQ] = coeffs
    return idctn(block, norm="ortho")


def grid_prototypes(spec: DatasetSpec) -> np.ndarray:
    """One texture per mode, fixed by prototype_seed, scaled to peak magnitude 0.8."""
    rng = np.random.default_rng(spec.prototype_seed)
    protos = []
    for _ in range(spec.modes):
        img = _low_frequency_image(rng.standard_normal((LOW_FREQ, LOW_FREQ)), spec.grid_size)
        protos.append(0.8 * img / np.max(np.abs(img)))
    return np.stack(protos).reshape(spec.modes, -1)


def mode_centers(spec: DatasetSpec) -> Optional[np.ndarray]:
    """Centres for nearest-centre coverage; only the ring has a centre geometry."""
    if spec.kind == "ring":
        return ring_centers(spec.modes, spec.radius)
    return None


def generate_dataset(spec: DatasetSpec, n: int, rng: np.random.Generator) -> Dataset:
    if n < 1:
        raise ConfigError(f"Dataset size must be positive, got {n}")

    if spec.kind == "ring":
        labels = rng.integers(0, spec.modes, size=n)
        samples = ring_centers(spec.modes, spec.radius)[labels] + spec.sigma * rng.standard_normal((n, 2))
        return Dataset(samples, labels)

    if spec.kind == "swiss-roll":
        u = rng.uniform(0.0, 1.0, size=n)
        t = 1.5 * np.pi * (1.0 + 2.0 * u)
        scale = spec.radius / (4.5 * np.pi)
        samples = scale * np.stack([t * np.cos(t), t * np.sin(t)], axis=1) + spec.sigma * rng.standard_normal((n, 2))
        labels = np.minimum((u * spec.modes).astype(np.int64), spec.modes - 1)
        return Dataset(samples, labels)

    if spec.kind == "grid16":
        protos = grid_prototypes(spec)
        labels = rng.integers(0, spec.modes, size=n)
        size = spec.grid_size
        # Ortho idctn spreads 16 coefficients over size^2 pixels; rescale to per-pixel std sigma.
        gain = spec.sigma * size / LOW_FREQ
        perturb = np.stack([
            _low_frequency_image(rng.standard_normal((LOW_FREQ, LOW_FREQ)), size).reshape(-1) for _ in range(n)
        ])
        return Dataset(np.clip(protos[labels] + gain * perturb, -1.0, 1.0), labels)

    raise ConfigError(f"Unknown dataset kind {spec.kind}")
