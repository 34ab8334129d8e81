"""Scratch calibration for the acceptance scenario (not part of the package)."""
import sys
import time

import numpy as np

from lensformer.detector import build, desk_config
from lensformer.lenssim import Dataset, desk_sim_config, sample_stamps
from lensformer.metrics import evaluate, samples_from_arrays, stratified_report
from lensformer.training import TrainConfig, score_dataset, train, rescale_pixels

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30
n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 2000
variant = sys.argv[4] if len(sys.argv) > 4 else "base"

overrides = {
    "base": {},
    "A": dict(source_amp_range=(0.12, 1.0), noise_sigma_range=(0.006, 0.015)),
    "B": dict(source_amp_range=(0.15, 1.0)),
    "C": dict(source_amp_range=(0.12, 1.0), source_sigma_range=(0.14, 0.3)),
    "D": dict(source_amp_range=(0.12, 1.0), source_sigma_range=(0.14, 0.3),
              noise_sigma_range=(0.007, 0.016)),
}[variant]
sim = desk_sim_config(**overrides)
t0 = time.time()
train_ds = Dataset.from_stamps(sample_stamps(n_train, 0.5, sim, seed=1000 + seed))
test_ds = Dataset.from_stamps(sample_stamps(400, 0.5, sim, seed=2000 + seed))
print(f"sim: {time.time() - t0:.1f}s")

fr = np.array([m["flux_ratio"] for m in train_ds.meta if m["label"] == 1])
print(f"flux_ratio positives: min {fr.min():.4f} q25 {np.quantile(fr, .25):.4f} "
      f"median {np.median(fr):.4f} q75 {np.quantile(fr, .75):.4f} max {fr.max():.4f}")

model = build(desk_config(num_encoders=0 if (len(sys.argv) > 6 and sys.argv[6] == "cnn") else 1), seed=seed)
print("params:", model.parameter_count)
cfg = TrainConfig(stages=((1e-4, epochs),), batch_size=32, seed=seed,
                  augment_rotations=(len(sys.argv) > 5 and sys.argv[5] == "aug"), augment_rescale=True)
t0 = time.time()
model, history = train(model, train_ds, cfg)
dt = time.time() - t0
print(f"train: {dt:.1f}s ({dt / epochs:.2f}s/epoch) final train_loss={history[-1]['train_loss']:.4f} "
      f"val_acc={history[-1]['val_accuracy']:.4f}")

scores = score_dataset(model, rescale_pixels(test_ds.pixels))
samples = samples_from_arrays(scores, test_ds.labels, test_ds.meta)
report = evaluate(samples)
print(f"seed {seed}: AUROC={report.auroc:.4f} acc={report.accuracy:.4f} "
      f"tpr0={report.tpr0:.3f} tpr10={report.tpr10:.3f}")

pos_fr = np.array([s.metadata["flux_ratio"] for s in samples if s.label == 1])
edges = [float(np.quantile(pos_fr, 1 / 3)), float(np.quantile(pos_fr, 2 / 3))]
strata = stratified_report(samples, "flux_ratio", bin_edges=edges, thresholds=(0.5,))
for s in strata:
    print(f"  flux_ratio [{s.lo:.4g},{s.hi:.4g}) n={s.count} pos={s.positives} fn_rate={s.fn_rate(0.5)}")
