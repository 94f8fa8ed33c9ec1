"""Analytical gradients of the contrastive losses, a central-difference
oracle, and diagnostics for the implicit hard positive/negative mining.

For every multiview loss the per-anchor term depends on the batch only
through the scaled similarities ``s_ia = z_i . z_a / tau`` over the active
set, and ``d loss_i / d s_ia = P_ia - X_ia [a in P(i)]``.  Collecting these
coefficients in a matrix ``G`` gives the anchor-role gradient ``G Z / tau``
and the full gradient ``(G + G^T) Z / tau``.
"""

from dataclasses import dataclass

import mpmath
import numpy as np
from scipy.special import softmax

from .embedding import DEFAULT_EPS, normalization_jacobian_apply, normalize_rows
from .losses import (
    Variant,
    cross_positive_index,
    loss_npairs,
    loss_self,
    loss_sup_in,
    loss_sup_out,
)

REL_ERR_FLOOR = 1e-8


@dataclass(frozen=True)
class SoftmaxWeights:
    P: np.ndarray  # P_ix over active columns, zero elsewhere
    X_in: np.ndarray  # positives-only softmax, zero off P(i)
    X_out: np.ndarray  # 1/|P(i)| per anchor, zero for skipped anchors
    positive_mask: np.ndarray

    def X(self, variant):
        """``X_ip`` as a dense matrix (zero outside ``P(i)``) for one variant."""
        variant = Variant.parse(variant)
        if variant is Variant.SUP_IN:
            return self.X_in
        if variant in (Variant.SUP_OUT, Variant.SELF_SUP, Variant.NPAIRS):
            # the mask, not X_in > 0: X_in underflows to 0 at small tau
            return np.where(self.positive_mask, self.X_out[:, None], 0.0)
        raise ValueError(f"no X_ip for variant {variant.value}")


@dataclass(frozen=True)
class GradientReport:
    analytical: np.ndarray
    numerical: np.ndarray
    max_abs_err: float
    max_rel_err: float
    fd_step: float


@dataclass(frozen=True)
class HardnessReport:
    pos_pairs: np.ndarray  # (M, 2) anchor/positive indices
    pos_tangent: np.ndarray
    pos_weight: np.ndarray
    neg_pairs: np.ndarray
    neg_tangent: np.ndarray
    neg_weight: np.ndarray

    def weight_of(self, i, p):
        hit = np.flatnonzero((self.pos_pairs[:, 0] == i) & (self.pos_pairs[:, 1] == p))
        if hit.size:
            return float(self.pos_weight[hit[0]])
        hit = np.flatnonzero((self.neg_pairs[:, 0] == i) & (self.neg_pairs[:, 1] == p))
        if hit.size:
            return float(self.neg_weight[hit[0]])
        raise KeyError((i, p))


def softmax_weights(batch, tau):
    sims = batch.z @ batch.z.T / tau
    P = softmax(np.where(batch.active_mask, sims, -np.inf), axis=1)
    P = np.where(batch.active_mask, P, 0.0)
    pos = batch.positive_mask
    counts = pos.sum(axis=1)
    X_in = np.zeros_like(P)
    ok = counts > 0
    if np.any(ok):
        X_in[ok] = np.where(pos[ok], softmax(np.where(pos[ok], sims[ok], -np.inf), axis=1), 0.0)
    X_out = np.where(ok, 1.0 / np.maximum(counts, 1), 0.0)
    return SoftmaxWeights(P, X_in, X_out, pos)


def _effective(batch, tau, variant):
    """Rewrite NPairs/SelfSup onto the SupOut form they reduce to."""
    variant = Variant.parse(variant)
    if variant is Variant.SELF_SUP:
        return batch.view_pair_only(), tau, Variant.SUP_OUT
    if variant is Variant.NPAIRS:
        k = cross_positive_index(batch)
        return batch.with_positives(np.eye(batch.size, dtype=bool)[k]), 1.0, Variant.SUP_OUT
    if variant in (Variant.SUP_OUT, Variant.SUP_IN):
        return batch, tau, variant
    raise ValueError(f"no batch gradient for variant {variant.value}")


def similarity_coefficients(batch, tau, variant):
    """``G[i, a] = d loss_i / d s_ia``; zero rows for anchors with empty ``P(i)``."""
    batch, tau, variant = _effective(batch, tau, variant)
    w = softmax_weights(batch, tau)
    G = w.P - w.X(variant)
    pos = batch.positive_mask
    # cancellation-free forms of P - X on the positives; at small tau the
    # direct difference loses everything below eps / tau
    if variant is Variant.SUP_IN:
        neg_mass = np.where(pos, 0.0, w.P).sum(axis=1)
        G = np.where(pos, -w.X_in * neg_mass[:, None], G)
    else:
        single = pos.sum(axis=1) == 1
        if np.any(single):
            rest = np.where(pos, 0.0, w.P).sum(axis=1)
            G = np.where(pos & single[:, None], -rest[:, None], G)
    G[batch.positive_counts() == 0] = 0.0
    return G, tau


def grad_anchor_z(batch, tau, variant):
    """Row ``i``: gradient of anchor ``i``'s own term with respect to ``z_i``.

    ``(1/tau) [sum_p z_p (P_ip - X_ip) + sum_n z_n P_in]``.
    """
    G, tau = similarity_coefficients(batch, tau, variant)
    return G @ batch.z / tau


def grad_total_z(batch, tau, variant, rescale_by_tau=False):
    """Gradient of the summed loss with respect to every embedding row."""
    G, tau_eff = similarity_coefficients(batch, tau, variant)
    g = (G + G.T) @ batch.z / tau_eff
    return tau * g if rescale_by_tau else g


def grad_total_w(W, batch, tau, variant, rescale_by_tau=False, eps=DEFAULT_EPS):
    """Gradient with respect to the pre-normalization rows ``W``.

    ``batch`` supplies labels and masks; its ``z`` is replaced by the
    normalized rows of ``W``.
    """
    W = np.asarray(W, dtype=np.float64)
    b = batch.with_z(normalize_rows(W, eps))
    g_z = grad_total_z(b, tau, variant, rescale_by_tau=rescale_by_tau)
    return normalization_jacobian_apply(W, g_z, eps)


def loss_fn_for(batch, tau, variant, on="z", rescale_by_tau=False):
    """Scalar loss of a free matrix, for the FD oracle.

    ``on="z"`` feeds the matrix straight in as embeddings (off-sphere
    perturbations included); ``on="w"`` normalizes it first.
    """
    variant = Variant.parse(variant)
    fn = {
        Variant.SELF_SUP: lambda b: loss_self(b, tau),
        Variant.SUP_OUT: lambda b: loss_sup_out(b, tau),
        Variant.SUP_IN: lambda b: loss_sup_in(b, tau),
        Variant.NPAIRS: loss_npairs,
    }[variant]
    scale = tau if rescale_by_tau else 1.0

    def f(M):
        Z = normalize_rows(M) if on == "w" else M
        return scale * fn(batch.with_z(Z)).total

    return f


def finite_diff_grad(loss_fn, W, h=1e-6, dtype=np.float64):
    """Central differences ``(f(x + h) - f(x - h)) / 2h`` in every coordinate.

    ``dtype`` is the working precision of the perturbed copy of ``W``;
    the result is returned as float64.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    W = np.array(W, dtype=dtype)
    grad = np.zeros_like(W)
    flat = W.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        x0 = flat[j]
        flat[j] = x0 + h
        f_plus = loss_fn(W)
        flat[j] = x0 - h
        f_minus = loss_fn(W)
        flat[j] = x0
        g[j] = (f_plus - f_minus) / (2 * h)
    return grad.astype(np.float64)


def reference_loss_mp(batch, tau, variant, on="z"):
    """Naive arbitrary-precision loss of a matrix of ``mpf`` rows.

    Written from the per-anchor definitions with plain loops, sharing no
    code with the vectorized losses; used as the oracle when long-double
    differences would be swamped by roundoff (very small ``tau``).
    """
    variant = Variant.parse(variant)
    if variant not in (Variant.SELF_SUP, Variant.SUP_OUT, Variant.SUP_IN):
        raise ValueError(f"no reference loss for variant {variant.value}")
    n = batch.size
    active = batch.active_mask
    if variant is Variant.SELF_SUP:
        pos = np.eye(n, dtype=bool)[batch.view_pair] & active
    else:
        pos = batch.positive_mask

    def f(M):
        rows = M
        if on == "w":
            rows = [[x / mpmath.sqrt(mpmath.fsum(y * y for y in r)) for x in r] for r in M]
        total = mpmath.mpf(0)
        for i in range(n):
            P = [p for p in range(n) if pos[i, p]]
            if not P:
                continue
            s = {a: mpmath.fdot(rows[i], rows[a]) / tau for a in range(n) if active[i, a]}
            lse = mpmath.log(mpmath.fsum(mpmath.exp(v) for v in s.values()))
            if variant is Variant.SUP_IN:
                inner = mpmath.fsum(mpmath.exp(s[p]) for p in P) / len(P)
                total += lse - mpmath.log(inner)
            else:
                total += mpmath.fsum(lse - s[p] for p in P) / len(P)
        return total

    return f


def finite_diff_grad_mp(loss_fn, W, h=1e-6, dps=50):
    """Central differences evaluated in ``dps``-digit arithmetic."""
    if not h > 0:
        raise ValueError("h must be positive")
    W = np.asarray(W, dtype=np.float64)
    with mpmath.workdps(dps):
        M = [[mpmath.mpf(float(x)) for x in row] for row in W]
        hh = mpmath.mpf(h)
        grad = np.zeros_like(W)
        for i in range(W.shape[0]):
            for k in range(W.shape[1]):
                x0 = M[i][k]
                M[i][k] = x0 + hh
                f_plus = loss_fn(M)
                M[i][k] = x0 - hh
                f_minus = loss_fn(M)
                M[i][k] = x0
                grad[i, k] = float((f_plus - f_minus) / (2 * hh))
    return grad


def fd_roundoff_estimate(batch, tau, variant, h, dtype=np.longdouble):
    """Rough size of the central-difference roundoff ``eps |L| / h`` at ``dtype``."""
    f = loss_fn_for(batch, tau, variant)
    return float(np.finfo(dtype).eps * abs(f(batch.z.astype(dtype))) / h)


def compare_gradients(analytical, numerical, fd_step):
    a = np.asarray(analytical, dtype=np.float64)
    b = np.asarray(numerical, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
    return GradientReport(a, b, float(diff.max(initial=0.0)),
                          float((diff / denom).max(initial=0.0)), float(fd_step))


def gradient_check(batch, tau, variant, on="z", W=None, h=1e-6, dtype=np.longdouble):
    """Analytical total gradient against the FD oracle, in z- or w-space.

    The oracle runs at long-double precision by default: in float64 the
    central-difference roundoff (about ``eps |f| / h``) would swamp a
    ``1e-6`` relative tolerance on small gradient components.  ``dtype="mp"``
    switches to the arbitrary-precision reference loss.
    """
    if on == "z":
        M = batch.z
        analytical = grad_total_z(batch, tau, variant)
    else:
        M = batch.z if W is None else np.asarray(W, dtype=np.float64)
        analytical = grad_total_w(M, batch, tau, variant)
    if isinstance(dtype, str) and dtype == "mp":
        numerical = finite_diff_grad_mp(reference_loss_mp(batch, tau, variant, on=on), M, h)
    else:
        numerical = finite_diff_grad(loss_fn_for(batch, tau, variant, on=on), M, h, dtype=dtype)
    return compare_gradients(analytical, numerical, h)


def hardness_report(batch, tau, variant):
    """Tangent norms and softmax weights for every positive and negative pair.

    A pair's contribution to anchor ``i``'s gradient with respect to ``w_i``
    is ``(z_x - (z_i . z_x) z_i) * weight / (tau ||w_i||)`` whose norm is
    ``tangent * weight / (tau ||w_i||)``.
    """
    batch_eff, _, _ = _effective(batch, tau, variant)
    G, _ = similarity_coefficients(batch, tau, variant)
    sims = np.clip(batch.z @ batch.z.T, -1.0, 1.0)
    tangent = np.sqrt(np.clip(1.0 - sims**2, 0.0, None))
    pos = batch_eff.positive_mask
    neg = batch_eff.negative_mask()
    pos_pairs = np.argwhere(pos)
    neg_pairs = np.argwhere(neg)
    pi, pj = pos_pairs.T
    ni, nj = neg_pairs.T
    return HardnessReport(
        pos_pairs, tangent[pi, pj], np.abs(G[pi, pj]),
        neg_pairs, tangent[ni, nj], G[ni, nj],
    )


def pair_contribution_w(batch, tau, variant, i, x, w_norm=1.0):
    """Vector contribution of pair ``(i, x)`` to anchor ``i``'s ``w_i`` gradient."""
    G, tau_eff = similarity_coefficients(batch, tau, variant)
    coef = G[i, x]
    zi, zx = batch.z[i], batch.z[x]
    return (zx - np.dot(zi, zx) * zi) * coef / (tau_eff * w_norm)


def tangent_norm(z_i, z_x):
    """``||z_x - (z_i . z_x) z_i||``, equal to ``sqrt(1 - (z_i . z_x)^2)`` on the sphere."""
    z_i = np.asarray(z_i, dtype=np.float64)
    z_x = np.asarray(z_x, dtype=np.float64)
    return float(np.linalg.norm(z_x - np.dot(z_i, z_x) * z_i))


# -- cross-entropy as a contrastive loss -------------------------------------

def softmax_ce_grad(logits, labels, tau):
    """Gradient of summed softmax cross-entropy on ``logits / tau``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    p = softmax(logits / tau, axis=1)
    p[np.arange(len(labels)), labels] -= 1.0
    return p / tau


def xent_contrastive_grad(logits, labels, tau):
    """Same gradient via the anchor formula with one-hot class vectors as
    the positive and negatives: ``(1/tau)[y_p (P_ip - 1) + sum_n y_n P_in]``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    onehots = np.eye(c)
    out = np.zeros_like(logits)
    for i in range(n):
        s = onehots @ logits[i] / tau
        P = np.exp(s - s.max())
        P /= P.sum()
        g = np.zeros(c)
        for k in range(c):
            coef = P[k] - 1.0 if k == labels[i] else P[k]
            g += onehots[k] * coef
        out[i] = g / tau
    return out


