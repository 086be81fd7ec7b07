"""Seeded synthetic hyperspectral scenes for desk-scale experiments.

A scene is a linear mixture of a few smooth material spectra with smooth
abundance maps, modulated by finer textures whose spectral signatures are
themselves smooth across bands (so neighbouring bands stay correlated, as
in real imagery).
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Cube, normalize


def _smooth_spectrum(rng, bands: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, bands)
    s = 0.3 + 0.4 * rng.random() * t
    for _ in range(3):
        centre, width = rng.random(), 0.05 + 0.2 * rng.random()
        s += rng.uniform(0.2, 0.8) * np.exp(-((t - centre) ** 2) / (2 * width ** 2))
    return s


def _texture(rng, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    # oriented grating with a slowly varying phase, plus band-pass noise
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.06, 0.2)
    phase = gaussian_filter(rng.standard_normal((height, width)), 6.0) * 20.0
    grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    noise = rng.standard_normal((height, width))
    bandpass = gaussian_filter(noise, 1.0) - gaussian_filter(noise, 3.0)
    bandpass /= bandpass.std() + 1e-12
    return 0.6 * grating + 0.4 * bandpass


def synthetic_scene(height: int, width: int, bands: int, seed: int = 0, materials: int = 4,
                    textures: int = 3, texture_strength: float = 0.25) -> np.ndarray:
    """Raw (un-normalized) ``[H, W, C]`` float64 scene."""
    rng = np.random.default_rng(seed)
    fields = np.stack([gaussian_filter(rng.standard_normal((height, width)), max(height, width) / 12)
                       for _ in range(materials)], axis=-1)
    fields /= fields.std() + 1e-12
    abund = np.exp(3.0 * fields)
    abund /= abund.sum(axis=-1, keepdims=True)
    spectra = np.stack([_smooth_spectrum(rng, bands) for _ in range(materials)])
    scene = abund @ spectra
    tex = np.zeros((height, width, bands))
    for _ in range(textures):
        sig = _smooth_spectrum(rng, bands)
        sig /= sig.max()
        tex += _texture(rng, height, width)[..., None] * sig
    return scene * (1.0 + texture_strength * tex / textures)


def synthetic_cube(height: int, width: int, bands: int, seed: int = 0, **kwargs) -> Cube:
    return normalize(synthetic_scene(height, width, bands, seed, **kwargs))
