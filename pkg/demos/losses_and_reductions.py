"""Supervised contrastive losses on a small batch, and the special cases they reduce to.

Run: python3 demos/losses_and_reductions.py
"""

import numpy as np

from supconlab import LossSpec, MultiviewBatch, compute_loss, normalize_rows
from supconlab.losses import (
    label_smoothing_bound,
    loss_npairs,
    loss_self,
    loss_sup_in,
    loss_sup_out,
    npairs_positive_batch,
    triplet_limit_check,
    xent_as_contrastive,
)

rng = np.random.default_rng(0)

# Six sources from two classes, two views each, interleaved (rows 2k, 2k+1).
labels = np.repeat([0, 0, 0, 1, 1, 1], 2)
z = normalize_rows(rng.normal(size=(12, 8)))
batch = MultiviewBatch.build(z, labels)
tau = 0.1

print("positives per anchor:", batch.positive_counts())
out = loss_sup_out(batch, tau)
inn = loss_sup_in(batch, tau)
print(f"L_out = {out.total:.4f}  L_in = {inn.total:.4f}  (L_in <= L_out: {inn.total <= out.total})")

# With all-distinct labels both supervised losses collapse to the self-supervised one.
distinct = MultiviewBatch.build(z, np.repeat(np.arange(6), 2))
print("distinct labels, L_out - L_self:",
      loss_sup_out(distinct, tau).total - loss_self(distinct, tau).total)

# N-pairs keeps one positive from another source of the same class, at tau = 1.
print("N-pairs - L_out(tau=1, one positive):",
      loss_npairs(batch).total - loss_sup_out(npairs_positive_batch(batch), 1.0).total)

# One positive and one negative: the loss approaches exp(delta / tau) as delta goes to -inf.
e = np.eye(3)
anchor, pos = e[0], e[0]
for angle in (1.0, 1.4, 1.5):
    neg = np.array([np.cos(angle), np.sin(angle), 0.0])
    exact, approx, bound = triplet_limit_check(anchor, pos, neg, tau)
    print(f"angle {angle}: exact {exact:.3e} approx {approx:.3e} |diff| {abs(exact - approx):.1e} <= {bound:.1e}")

# Cross-entropy is a contrastive loss against fixed one-hot class vectors.
logits = rng.normal(size=(5, 4))
y = rng.integers(0, 4, size=5)
contrastive, standard = xent_as_contrastive(logits, y, tau=0.5)
print(f"CE as contrastive {contrastive:.6f} vs softmax CE {standard:.6f}")

# Label-smoothed CE is bounded by a sum of contrastive terms at per-class temperatures.
lhs, rhs = label_smoothing_bound(logits, y, beta1=0.9, beta2=0.1 / 3, tau=0.5)
print(f"label smoothing: {lhs:.4f} <= {rhs:.4f}")

# compute_loss dispatches by name and can cap positives per anchor.
for spec in (LossSpec("SupOut", tau), LossSpec("SupOut", tau, max_positives=1), LossSpec("SupIn", tau)):
    print(spec.variant.value, spec.max_positives, round(compute_loss(batch, spec).total, 4))
