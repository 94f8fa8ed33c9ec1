"""Analytical contrastive gradients checked against central differences.

Run: python3 demos/gradient_check.py
"""

import numpy as np

from supconlab.grads import gradient_check, hardness_report
from supconlab.verify import hard_positive_batch, random_batch_w

rng = np.random.default_rng(1)
batch, W = random_batch_w(rng, 8, 6, classes=[0, 0, 1, 1])

for variant in ("SelfSup", "SupOut", "SupIn"):
    for on in ("z", "w"):
        report = gradient_check(batch, 0.1, variant, on=on, W=W if on == "w" else None)
        print(f"{variant:8s} {on}-space  max rel err {report.max_rel_err:.2e}")

# Very small temperatures need the arbitrary-precision oracle.
report = gradient_check(batch, 1e-3, "SupOut", h=1e-7, dtype="mp")
print(f"SupOut tau=1e-3 (mp oracle) max rel err {report.max_rel_err:.2e}")

# Hard positives (orthogonal to the anchor) get large weight and a full tangent.
b = hard_positive_batch(4)
h = hardness_report(b, 0.1, "SupOut")
first = h.pos_pairs[:, 0] == 0
print("anchor 0 positives:", h.pos_pairs[first][:, 1],
      "tangent", np.round(h.pos_tangent[first], 3),
      "weight", np.round(h.pos_weight[first], 3))
