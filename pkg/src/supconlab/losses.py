"""The supervised contrastive loss family and its special cases.

All batch losses work on a :class:`MultiviewBatch`: ``2N`` unit embeddings
where rows ``2k`` and ``2k + 1`` are the two views of source sample ``k``
(any fixed-point-free involution is accepted through ``view_pair``).
Per-anchor terms are evaluated with a max-shifted log-sum-exp over the
anchor's active set, so temperatures down to ``1e-3`` stay finite.
"""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.special import log_softmax, logsumexp

from .embedding import as_real, pairwise_inner


class Variant(str, Enum):
    SELF_SUP = "SelfSup"
    SUP_OUT = "SupOut"
    SUP_IN = "SupIn"
    NPAIRS = "NPairs"
    TRIPLET = "Triplet"
    XENT_CONTRASTIVE = "XentContrastive"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for member in cls:
            if value == member.value or str(value).lower() == member.value.lower():
                return member
        raise ValueError(f"unknown loss variant {value!r}; choose from {[m.value for m in cls]}")


class MissingCrossPositiveError(ValueError):
    def __init__(self, anchor):
        self.anchor = int(anchor)
        super().__init__(f"anchor {self.anchor} has no same-label row from a different source")


class InvalidAlphaError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    variant: Variant = Variant.SUP_OUT
    tau: float = 0.1
    max_positives: int | None = None
    rescale_by_tau: bool = False
    triplet_margin: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.max_positives is not None and self.max_positives < 1:
            raise ValueError(f"max_positives must be >= 1, got {self.max_positives}")

    @property
    def margin(self):
        """Triplet margin; defaults to ``2 * tau``."""
        return 2.0 * self.tau if self.triplet_margin is None else self.triplet_margin


@dataclass(frozen=True)
class LossOutput:
    total: float
    per_anchor: np.ndarray
    skipped_anchors: list = field(default_factory=list)

    @property
    def mean(self):
        """Per-anchor mean over non-skipped anchors (unscaled)."""
        n = len(self.per_anchor) - len(self.skipped_anchors)
        return float(np.sum(self.per_anchor)) / n if n else 0.0


@dataclass(frozen=True)
class MultiviewBatch:
    z: np.ndarray
    labels: np.ndarray
    view_pair: np.ndarray
    positive_mask: np.ndarray
    active_mask: np.ndarray

    @classmethod
    def build(cls, z, labels, view_pair=None):
        """Batch with uncapped masks: ``A(i) = I \\ {i}``, ``P(i)`` = same label.

        ``view_pair`` defaults to the interleaved layout ``(0,1), (2,3), ...``.
        """
        z = as_real(z)
        labels = np.asarray(labels)
        n = z.shape[0]
        if view_pair is None:
            if n % 2:
                raise ValueError("interleaved layout needs an even number of rows")
            view_pair = np.arange(n) ^ 1
        view_pair = np.asarray(view_pair, dtype=np.intp)
        active = ~np.eye(n, dtype=bool)
        positive = (labels[:, None] == labels[None, :]) & active
        batch = cls(z, labels, view_pair, positive, active)
        batch.validate()
        return batch

    @property
    def size(self):
        return self.z.shape[0]

    def with_z(self, z):
        return replace(self, z=as_real(z))

    def with_positives(self, positive_mask):
        """Same batch with a different positive structure (active sets kept)."""
        b = replace(self, positive_mask=np.asarray(positive_mask, dtype=bool))
        b.validate()
        return b

    def view_pair_only(self):
        return self.with_positives(np.eye(self.size, dtype=bool)[self.view_pair])

    def positive_counts(self):
        return self.positive_mask.sum(axis=1)

    def negative_mask(self):
        return self.active_mask & ~self.positive_mask

    def validate(self):
        n = self.size
        vp = self.view_pair
        idx = np.arange(n)
        if self.labels.shape != (n,) or vp.shape != (n,):
            raise ValueError("labels and view_pair must have one entry per row")
        if self.positive_mask.shape != (n, n) or self.active_mask.shape != (n, n):
            raise ValueError("masks must be square over the batch")
        if np.any(vp < 0) or np.any(vp >= n) or np.any(vp == idx) or np.any(vp[vp] != idx):
            raise ValueError("view_pair must be a fixed-point-free involution")
        if np.any(self.labels != self.labels[vp]):
            raise ValueError("the two views of a source must share a label")
        if np.any(np.diag(self.active_mask)):
            raise ValueError("an anchor cannot be in its own active set")
        if np.any(self.positive_mask & ~self.active_mask):
            raise ValueError("positives must be a subset of the active set")
        same = self.labels[:, None] == self.labels[None, :]
        if np.any(self.positive_mask & ~same):
            raise ValueError("positives must share the anchor's label")


def _masked_log_prob(batch, tau):
    """``log P_ix`` over each anchor's active set (``-inf`` elsewhere) and the logits."""
    logits = pairwise_inner(batch.z) / tau
    masked = np.where(batch.active_mask, logits, -np.inf)
    lse = logsumexp(masked, axis=1, keepdims=True)
    return masked - lse, logits


def _finish(per_anchor, skipped):
    per_anchor = as_real(per_anchor)
    total = per_anchor.dtype.type(0)
    for v in per_anchor:  # fixed anchor order keeps totals bit-reproducible
        total += v
    if total.dtype == np.float64:
        total = float(total)
    return LossOutput(total, per_anchor, [int(s) for s in skipped])


def loss_self(batch, tau):
    """Self-supervised loss: the only positive of anchor ``i`` is its other view."""
    log_prob, _ = _masked_log_prob(batch, tau)
    idx = np.arange(batch.size)
    return _finish(-log_prob[idx, batch.view_pair], [])


def loss_sup_out(batch, tau):
    """Mean over positives taken outside the log."""
    log_prob, _ = _masked_log_prob(batch, tau)
    counts = batch.positive_counts()
    pos_sum = np.where(batch.positive_mask, log_prob, 0.0).sum(axis=1)
    skipped = np.flatnonzero(counts == 0)
    per_anchor = np.zeros(batch.size, dtype=log_prob.dtype)
    ok = counts > 0
    per_anchor[ok] = -pos_sum[ok] / counts[ok]
    return _finish(per_anchor, skipped)


def loss_sup_in(batch, tau):
    """Mean over positives taken inside the log."""
    logits = pairwise_inner(batch.z) / tau
    counts = batch.positive_counts()
    skipped = np.flatnonzero(counts == 0)
    per_anchor = np.zeros(batch.size, dtype=logits.dtype)
    ok = counts > 0
    # when P(i) = A(i) both sums see identical inputs and cancel exactly
    act_lse = logsumexp(np.where(batch.active_mask[ok], logits[ok], -np.inf), axis=1)
    pos_lse = logsumexp(np.where(batch.positive_mask[ok], logits[ok], -np.inf), axis=1)
    per_anchor[ok] = np.log(counts[ok]) + (act_lse - pos_lse)
    return _finish(per_anchor, skipped)


def cross_positive_index(batch):
    """Lowest-index same-label row from a different source, per anchor."""
    n = batch.size
    idx = np.arange(n)
    same = batch.labels[:, None] == batch.labels[None, :]
    cand = same & (idx[None, :] != idx[:, None]) & (idx[None, :] != batch.view_pair[:, None])
    k = np.empty(n, dtype=np.intp)
    for i in range(n):
        hits = np.flatnonzero(cand[i])
        if hits.size == 0:
            raise MissingCrossPositiveError(i)
        k[i] = hits[0]
    return k


def npairs_positive_batch(batch):
    """The batch with ``P(i) = {k(i)}``; pairs with ``loss_sup_out(.., 1.0)``."""
    k = cross_positive_index(batch)
    return batch.with_positives(np.eye(batch.size, dtype=bool)[k])


def loss_npairs(batch):
    """N-pairs loss: one cross-sample positive per anchor, no temperature."""
    k = cross_positive_index(batch)
    log_prob, _ = _masked_log_prob(batch, 1.0)
    return _finish(-log_prob[np.arange(batch.size), k], [])


def loss_triplet(z_a, z_p, z_n, margin):
    z_a, z_p, z_n = (np.asarray(v, dtype=np.float64) for v in (z_a, z_p, z_n))
    d_pos = np.sum((z_a - z_p) ** 2)
    d_neg = np.sum((z_a - z_n) ** 2)
    return float(max(0.0, d_pos - d_neg + margin))


def contrastive_term(anchor, positive, negatives, tau):
    """``-log(e^{a.p/t} / (e^{a.p/t} + sum_n e^{a.n/t}))`` for one anchor."""
    anchor = np.asarray(anchor, dtype=np.float64)
    cands = np.vstack([np.asarray(positive, dtype=np.float64)[None, :],
                       np.atleast_2d(np.asarray(negatives, dtype=np.float64))])
    s = cands @ anchor / tau
    return float(logsumexp(s) - s[0])


def triplet_limit_check(z_a, z_p, z_n, tau):
    """Single-positive, single-negative contrastive loss and its first-order expansion.

    Returns ``(exact, approx, bound)`` where ``exact`` is the contrastive
    loss of the triple, ``approx = exp(delta / tau)`` and
    ``bound = exp(2 delta / tau) / 2`` caps ``|exact - approx|`` when
    ``delta = z_a.z_n - z_a.z_p <= 0``.
    """
    exact = contrastive_term(z_a, z_p, z_n, tau)
    x = (np.dot(z_a, z_n) - np.dot(z_a, z_p)) / tau
    return exact, float(np.exp(x)), float(np.exp(2.0 * x) / 2.0)


def cap_positives(batch, k, rng_seed):
    """Keep at most ``k`` positives per anchor; drop the rest from the denominator too.

    The other view is always kept; the remaining ``k - 1`` slots are drawn
    uniformly without replacement from the anchor's same-class rows.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(rng_seed)))
    pos = batch.positive_mask.copy()
    active = batch.active_mask.copy()
    for i in range(batch.size):
        current = np.flatnonzero(pos[i])
        if current.size <= k:
            continue
        j = batch.view_pair[i]
        others = current[current != j]
        keep = rng.choice(others, size=k - 1, replace=False) if k > 1 else others[:0]
        drop = np.setdiff1d(others, keep)
        pos[i, drop] = False
        active[i, drop] = False
    capped = replace(batch, positive_mask=pos, active_mask=active)
    capped.validate()
    return capped


def xent_as_contrastive(logits, labels, tau):
    """Cross-entropy computed twice: as a contrastive loss against fixed one-hot
    class vectors, and as plain temperature-scaled softmax cross-entropy.

    Returns ``(contrastive_form, standard_ce)``, both summed over samples.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if c < 2:
        raise ValueError("need at least two classes")
    onehots = np.eye(c)
    contrastive = 0.0
    for i in range(n):
        positive = onehots[labels[i]]
        negatives = np.delete(onehots, labels[i], axis=0)
        contrastive += contrastive_term(logits[i], positive, negatives, tau)
    standard = -log_softmax(logits / tau, axis=1)[np.arange(n), labels].sum()
    return float(contrastive), float(standard)


def smoothing_weights(labels, num_classes, beta1, beta2):
    """Per-sample class weights: ``beta1`` on the true class, ``beta2`` elsewhere."""
    if num_classes < 2:
        raise ValueError("label smoothing needs at least two classes")
    for name, b in (("beta1", beta1), ("beta2", beta2)):
        if not 0 < b <= 1:
            raise InvalidAlphaError(f"{name} = {b} outside (0, 1]")
    alpha = np.full((len(labels), num_classes), float(beta2))
    alpha[np.arange(len(labels)), labels] = beta1
    return alpha


def label_smoothing_bound(logits, labels, beta1, beta2, tau):
    """Label-smoothed cross-entropy and its contrastive upper bound.

    ``lhs = sum_i sum_c alpha_ic * (-log softmax(z_i / tau)_c)``.
    ``rhs`` moves each ``alpha_ic`` inside the log: the term for class ``c``
    is a contrastive loss with positive ``e_c`` at temperature
    ``tau / alpha_ic``, applied to the whole term.  ``lhs <= rhs`` follows
    from ``(sum a)^alpha <= sum a^alpha`` for ``alpha <= 1``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    alpha = smoothing_weights(labels, c, beta1, beta2)
    lhs = float(np.sum(alpha * -log_softmax(logits / tau, axis=1)))
    rhs = 0.0
    for i in range(n):
        for cls in range(c):
            t = tau / alpha[i, cls]
            rhs += -log_softmax(logits[i] / t)[cls]
    return lhs, float(rhs)


def compute_loss(batch, spec, cap_seed=0):
    """Dispatch a batch loss by ``spec.variant``, applying the positive cap and
    tau-rescaling if set.  ``cap_seed`` keys the cap's random subset; capping an
    already-capped batch is a no-op."""
    spec = spec if isinstance(spec, LossSpec) else LossSpec(**spec)
    v = spec.variant
    if spec.max_positives is not None:
        batch = cap_positives(batch, spec.max_positives, cap_seed)
    if v is Variant.SELF_SUP:
        out = loss_self(batch, spec.tau)
    elif v is Variant.SUP_OUT:
        out = loss_sup_out(batch, spec.tau)
    elif v is Variant.SUP_IN:
        out = loss_sup_in(batch, spec.tau)
    elif v is Variant.NPAIRS:
        out = loss_npairs(batch)
    else:
        raise ValueError(f"{v.value} is not a multiview batch loss")
    if spec.rescale_by_tau:
        out = replace(out, total=spec.tau * out.total)
    return out
