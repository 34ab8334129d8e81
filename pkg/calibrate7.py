"""Scratch calibration for the distribution-shift fine-tuning trend."""
import sys
import time

import numpy as np

from lensformer.detector import build, desk_config
from lensformer.lenssim import Dataset, desk_sim_config, sample_stamps
from lensformer.metrics import roc_and_auroc, samples_from_arrays
from lensformer.training import TrainConfig, fine_tune, score_dataset, train, rescale_pixels

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

sim_a = desk_sim_config(source_amp_range=(0.12, 1.0), source_sigma_range=(0.14, 0.3),
                        noise_sigma_range=(0.007, 0.016))
sim_b = desk_sim_config(
    source_amp_range=(0.12, 1.0), source_sigma_range=(0.14, 0.3),
    noise_sigma_range=(0.015, 0.03),
    lens_band_flux=(1.1, 1.0, 0.8, 0.6),
    source_band_flux=(0.5, 0.8, 1.0, 1.2),
    psf_fwhm=(1.1, 1.0, 0.9, 1.0),
    theta_e_range=(0.5, 1.8),
)

t0 = time.time()
train_a = Dataset.from_stamps(sample_stamps(1200, 0.5, sim_a, seed=3000 + seed))
pool_b = Dataset.from_stamps(sample_stamps(600, 0.5, sim_b, seed=4000 + seed))
test_b = Dataset.from_stamps(sample_stamps(500, 0.5, sim_b, seed=5000 + seed))
print(f"sim: {time.time() - t0:.1f}s")


def auroc_on_b(model):
    scores = score_dataset(model, rescale_pixels(test_b.pixels))
    return roc_and_auroc(samples_from_arrays(scores, test_b.labels)).auroc


model = build(desk_config(), seed=seed)
cfg = TrainConfig(stages=((1e-4, 12),), batch_size=32, seed=seed,
                  augment_rotations=True, augment_rescale=True)
t0 = time.time()
train(model, train_a, cfg)
print(f"base train: {time.time() - t0:.1f}s")
base = auroc_on_b(model)
results = [base]
import io
buf = io.BytesIO()


class _Mem:
    def __init__(self, m):
        import tempfile, os
        self.path = tempfile.mktemp(suffix=".ckpt")
        m.save(self.path)


ck = _Mem(model)
for n in (200, 400, 600):
    sub = Dataset(pixels=pool_b.pixels[:n], labels=pool_b.labels[:n], meta=pool_b.meta[:n])
    t0 = time.time()
    tuned, _ = fine_tune(ck.path, sub, TrainConfig(stages=((1e-4, 10),), batch_size=32,
                                                   seed=seed, augment_rotations=True,
                                                   augment_rescale=True))
    results.append(auroc_on_b(tuned))
    print(f"tune n={n}: {time.time() - t0:.1f}s")

print(f"seed {seed}: AUROC on B 0->{results[0]:.4f} 200->{results[1]:.4f} "
      f"400->{results[2]:.4f} 600->{results[3]:.4f}")
