"""Feature-domain augmentation: SpecAugment masking and speed perturbation."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

SPEED_FACTORS = (0.9, 1.0, 1.1)


def spec_augment(features: np.ndarray, n_time_masks: int, max_time_width: int,
                 n_freq_masks: int, max_freq_width: int, seed) -> np.ndarray:
    """Fill random time and frequency stripes with the utterance mean.

    Widths are drawn uniformly from ``[0, max_width]`` and clamped to the axis.
    """
    if min(n_time_masks, max_time_width, n_freq_masks, max_freq_width) < 0:
        raise ConfigurationError("mask counts and widths must be >= 0")
    out = np.array(features, copy=True)
    t, f = out.shape
    rng = np.random.default_rng(seed)
    fill = out.mean(dtype=np.float64).astype(out.dtype)
    for _ in range(n_time_masks):
        w = min(int(rng.integers(0, max_time_width + 1)), t)
        start = int(rng.integers(0, t - w + 1))
        out[start:start + w, :] = fill
    for _ in range(n_freq_masks):
        w = min(int(rng.integers(0, max_freq_width + 1)), f)
        start = int(rng.integers(0, f - w + 1))
        out[:, start:start + w] = fill
    return out


def speed_perturb(features: np.ndarray, factor: float) -> np.ndarray:
    """Resample the frame axis by linear interpolation to ``round(T / factor)`` frames."""
    if not factor > 0:
        raise ConfigurationError(f"speed factor must be positive, got {factor}")
    x = np.asarray(features)
    if factor == 1.0:
        return x.copy()
    t = x.shape[0]
    t_new = max(1, int(round(t / factor)))
    pos = np.minimum(np.arange(t_new) * factor, t - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    w = (pos - lo).astype(x.dtype)[:, None]
    return x[lo] + w * (x[hi] - x[lo])
