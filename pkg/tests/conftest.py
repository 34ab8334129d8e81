"""Shared helpers: a small detector config and quick synthetic datasets."""

import numpy as np

from lensformer.detector import ConvSpec, ModelConfig
from lensformer.lenssim import Dataset, desk_sim_config, sample_stamps
from lensformer.transformer import AttentionConfig


def tiny_model_config(bands=2, size=12, num_encoders=1, towers=1):
    return ModelConfig(
        input_bands=bands, input_size=size,
        backbone=(ConvSpec(4, pool=2), ConvSpec(8, pool=2)),
        attention=AttentionConfig(2, 4), num_encoders=num_encoders,
        ffn_head=(8,), towers=towers)


def tiny_sim_config(bands=2, size=12):
    return desk_sim_config(
        bands=bands, size=size, pixel_scale=0.25,
        theta_e_range=(0.5, 1.0),
        lens_r_eff_range=(0.2, 0.4), lens_r_disc_range=(0.3, 0.5),
        source_amp_range=(0.5, 1.2), source_sigma_range=(0.1, 0.2),
        noise_sigma_range=(0.005, 0.012),
        psf_fwhm=tuple([0.5] * bands),
        lens_band_flux=tuple([1.0] * bands),
        source_band_flux=tuple([1.0] * bands),
    )


def tiny_dataset(n=40, bands=2, size=12, seed=0, lens_fraction=0.5):
    stamps = sample_stamps(n, lens_fraction, tiny_sim_config(bands, size), seed=seed)
    return Dataset.from_stamps(stamps)


def random_dataset(n=12, bands=2, size=12, seed=0):
    """Pure-noise stamps with alternating labels, for plumbing tests."""
    rng = np.random.default_rng(seed)
    pixels = rng.normal(size=(n, bands, size, size)).astype(np.float32)
    labels = (np.arange(n) % 2).astype(np.int64)
    meta = [{"id": i, "theta_e": 0.0, "flux_ratio": 0.0} for i in range(n)]
    return Dataset(pixels=pixels, labels=labels, meta=meta)
