"""Cross-entropy, focal loss and the class-balanced focal loss on one toy label map."""
import numpy as np

from msdb.losses import LossConfig, class_ratios, segmentation_loss, weight_curve
from msdb.tensor import Tensor

rng = np.random.default_rng(0)
labels = np.zeros((1, 16, 16), dtype=np.int64)
labels[0, 4:8, 4:8] = 1  # a small foreground class
labels[0, 10:12, 3:13] = 2
logits = Tensor(rng.normal(size=(1, 3, 16, 16)))

print("class ratios", np.round(class_ratios(labels, 3), 3))
for kind in ("ce", "fl", "mcb-fl"):
    print(f"{kind:7s}", round(segmentation_loss(logits, labels, kind, LossConfig()).item(), 5))

# the per-class weight alpha**-r falls from 1 (absent class) to 1/alpha (whole image)
for alpha in (2, 6):
    print(f"alpha={alpha}:", [round(w, 3) for _, w in weight_curve(alpha, 5)])
