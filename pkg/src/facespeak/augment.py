"""Stochastic face-image stylization used during training.

With probability 0.5 the image passes through unchanged; otherwise exactly one
of {stylize, grayscale, blur} is applied, each branch equally likely (1/6
overall). Stylization is statistical moment matching against a style image,
kept behind the ``Stylizer`` protocol so a neural backend can be swapped in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, InputError

LUMA = np.array([0.299, 0.587, 0.114])


class Stylizer(Protocol):
    def __call__(self, img: np.ndarray, style: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class AugmentConfig:
    p_augment: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        if not 0.0 <= self.p_augment <= 1.0:
            raise ConfigError("p_augment must be in [0, 1]")


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError("expected an H x W x 3 image")
    return img


def grayscale(img: np.ndarray) -> np.ndarray:
    img = _check_image(img)
    y = img @ LUMA
    return np.repeat(y[:, :, None], 3, axis=2)


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    img = _check_image(img)
    if sigma <= 0:
        raise InputError("blur sigma must be positive")
    out = np.stack(
        [gaussian_filter(img[:, :, c], sigma, mode="reflect") for c in range(3)], axis=2
    )
    return np.clip(out, 0.0, 1.0)


def toy_stylize(img: np.ndarray, style: np.ndarray) -> np.ndarray:
    """Per-channel mean/std transfer from the style image; deterministic.

    A zero-variance style channel degrades gracefully to a pure mean shift.
    """
    img = _check_image(img)
    style = _check_image(style)
    out = np.empty_like(img)
    for c in range(3):
        mu_i, sd_i = img[:, :, c].mean(), img[:, :, c].std()
        mu_s, sd_s = style[:, :, c].mean(), style[:, :, c].std()
        if sd_s < 1e-6 or sd_i < 1e-9:
            out[:, :, c] = img[:, :, c] - mu_i + mu_s
        else:
            out[:, :, c] = (img[:, :, c] - mu_i) * (sd_s / sd_i) + mu_s
    return np.clip(out, 0.0, 1.0)


BRANCHES = ("stylize", "grayscale", "blur")


def augment_face(
    img: np.ndarray,
    styles: Sequence[np.ndarray],
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> np.ndarray:
    """One augmentation draw. Shape and [0, 1] range are always preserved."""
    img = _check_image(img)
    if rng.random() >= cfg.p_augment:
        return img
    branch = BRANCHES[rng.integers(len(BRANCHES))]
    if branch == "stylize":
        if not styles:
            raise ConfigError("stylize branch enabled but the style pool is empty")
        style = styles[rng.integers(len(styles))]
        return toy_stylize(img, style)
    if branch == "grayscale":
        return grayscale(img)
    sigma = rng.uniform(*cfg.blur_sigma_range)
    return blur(img, sigma)
