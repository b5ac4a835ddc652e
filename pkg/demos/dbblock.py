"""Pyramid pooling followed by DB-Block fusion back to a common grid."""
import numpy as np

from msdb.dbblock import fuse_multiscale, init_dbblock
from msdb.nn import pool2d
from msdb.tensor import Tensor

rng = np.random.default_rng(0)
feature = Tensor(rng.normal(size=(1, 4, 12, 12)))
grids = [(1, 1), (2, 2), (3, 3), (6, 6)]
pyramid = [pool2d(feature, "avg", g) for g in grids]
for g, f in zip(grids, pyramid):
    print("pooled", g, "->", f.shape)

for mode in ("b", "d", "db"):
    params = init_dbblock(grids, 4, 4, (8, 8), mode=mode)
    fused = fuse_multiscale(pyramid, params)
    print(f"mode {mode:2s} fused {fused.shape}  mean {fused.data.mean():+.4f}")
