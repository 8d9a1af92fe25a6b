"""The frozen-A adapter as the infinite-scaling limit of two-factor training.

Scale the product by alpha, shrink the learning rate to eta/alpha^2, and
start from the same effective weight (B scaled down by alpha): as alpha
grows, the two-factor trajectory converges to the frozen-A one at every
local step. Scaling therefore buys nothing that a learning-rate change does
not, once A is frozen.
"""

import numpy as np

from fedtune.analysis import alpha_limit_trajectory
from fedtune.tasks import SyntheticTaskSpec

TASK = SyntheticTaskSpec(dim=8, classes=4, samples=400, class_separation=2.0,
                         truth_rank=2, seed=13)
ETA1 = 0.5
STEPS = 10

rows = alpha_limit_trajectory(TASK, ETA1, STEPS, [1.0, 10.0, 100.0, 1000.0],
                              np.zeros((8, 2)))

print("Frobenius distance to the frozen-A trajectory after k full-batch steps")
print(f"(d=8, k=4, rank=2 softmax task, eta1={ETA1}):\n")
header = "alpha".rjust(8) + "".join(f"k={k}".rjust(11) for k in range(0, STEPS + 1, 2))
print(header)
for row in rows:
    cells = "".join(f"{row.gaps[k]:>11.2e}" for k in range(0, STEPS + 1, 2))
    print(f"{row.alpha:>8.0f}{cells}")

finals = {row.alpha: row.gaps[-1] for row in rows}
print(f"\ngap_K(1000) / gap_K(10) = {finals[1000.0] / finals[10.0]:.2e}")
print("each 10x in alpha shrinks the gap ~100x: the deviation terms enter at")
print("1/alpha^2 once the scale factor is chained into both factor gradients.")
