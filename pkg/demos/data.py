"""Synthetic hand scenes, their class balance, and the photometric augmentations."""
import numpy as np

from msdb.datagen import SceneSpec, apply_plan, class_names, dataset_stats, generate_dataset, sample_plan

samples = generate_dataset(SceneSpec(seed=0, hands="random"), 20)
s = samples[0]
print("image", s.image.shape, s.image.dtype, "labels", s.parse_label.shape)

for name, frac in dataset_stats(samples, 7, class_names(3)).items():
    print(f"{name:14s} {frac:.4f}")

# text rendering of the first parse map, one character per 2x2 block
for row in s.parse_label[::4, ::2]:
    print("".join(".123456"[v] for v in row))

# each transform is drawn independently, so most plans apply none or one
rng = np.random.default_rng(1)
for _ in range(5):
    plan = sample_plan(rng)
    shift = float(np.abs(apply_plan(s, plan).image - s.image).mean())
    print(plan, f"mean pixel change {shift:.4f}")
