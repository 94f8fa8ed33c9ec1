"""Seeded property suite over the loss family and its gradients.

Each check returns a :class:`CheckResult` with the worst error observed and
the tolerance it is held to; :func:`run_suite` runs them all in a fixed
order so the report is reproducible for a given seed.
"""

from dataclasses import dataclass

import numpy as np

from .embedding import normalize_rows
from .grads import (
    grad_anchor_z,
    grad_total_w,
    gradient_check,
    hardness_report,
    pair_contribution_w,
    softmax_ce_grad,
    tangent_norm,
    xent_contrastive_grad,
)
from .losses import (
    MultiviewBatch,
    cap_positives,
    label_smoothing_bound,
    loss_npairs,
    loss_self,
    loss_sup_in,
    loss_sup_out,
    npairs_positive_batch,
    triplet_limit_check,
    xent_as_contrastive,
)

GRAD_TOL = 1e-6


# -- batch generators ---------------------------------------------------------

def random_batch(rng, n2, dim, classes=3):
    """Random unit embeddings in the interleaved two-view layout.

    ``classes`` is the number of classes to draw source labels from, ``None``
    for all-distinct labels, or an explicit per-source label list.
    """
    n = n2 // 2
    if classes is None:
        src = np.arange(n)
    elif np.ndim(classes):
        src = np.asarray(classes)
    else:
        src = rng.integers(0, classes, size=n)
    z = normalize_rows(rng.normal(size=(n2, dim)))
    return MultiviewBatch.build(z, np.repeat(src, 2))


def random_batch_w(rng, n2, dim, classes=3):
    """A random batch together with its raw, unnormalized rows."""
    W = rng.normal(size=(n2, dim)) * rng.uniform(0.5, 2.0, size=(n2, 1))
    b = random_batch(rng, n2, dim, classes)
    return b.with_z(normalize_rows(W)), W


def equal_similarity_batch(rng, n_sources, dim, classes=2):
    """Every row equals its class direction, so each anchor's positive
    similarities are all equal (to 1)."""
    src = np.arange(n_sources) % classes
    centers = normalize_rows(rng.normal(size=(classes, dim)))
    labels = np.repeat(src, 2)
    return MultiviewBatch.build(centers[labels], labels)


def hard_positive_batch(n_negatives, dim=4):
    """Anchor ``e1`` with its other view at ``e2`` (a hard positive) and
    ``n_negatives`` rows (an even number) at ``e3``, orthogonal to the anchor."""
    if n_negatives % 2:
        raise ValueError("negatives come in view pairs")
    e = np.eye(dim)
    z = np.vstack([e[0], e[1], np.tile(e[2], (n_negatives, 1))])
    labels = np.concatenate([[0, 0], np.repeat(np.arange(1, n_negatives // 2 + 1), 2)])
    return MultiviewBatch.build(z, labels)


def gradient_suite_cases(seed, count=100):
    """``count`` (batch, W, tau) cases over 2N in {4,8,16}, D_P in {3,8},
    tau in {0.07, 0.1, 0.5, 1}."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        n2 = int(rng.choice([4, 8, 16]))
        dim = int(rng.choice([3, 8]))
        tau = float(rng.choice([0.07, 0.1, 0.5, 1.0]))
        b, W = random_batch_w(rng, n2, dim, int(rng.integers(1, 4)))
        cases.append((b, W, tau))
    return cases


# -- checks -------------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} worst={self.worst:.3e}  tol={self.tolerance:.1e}  {self.detail}"


def _result(name, worst, tol, detail=""):
    return CheckResult(name, bool(worst <= tol), float(worst), tol, detail)


def check_gradients(seed, count=100, variants=("SelfSup", "SupOut", "SupIn"), fd_step=1e-6):
    worst = 0.0
    for b, W, tau in gradient_suite_cases(seed, count):
        for v in variants:
            for on in ("z", "w"):
                r = gradient_check(b, tau, v, on=on, W=W, h=fd_step)
                worst = max(worst, r.max_rel_err)
    return _result("gradient FD agreement (z and w)", worst, GRAD_TOL,
                   f"{count} batches x {len(variants)} variants")


def check_jensen(seed, count=10_000):
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(count):
        b = random_batch(rng, int(rng.choice([4, 8, 16])), int(rng.choice([3, 8])), int(rng.integers(1, 4)))
        tau = float(rng.choice([0.07, 0.1, 0.5, 1.0]))
        worst = max(worst, loss_sup_in(b, tau).total - loss_sup_out(b, tau).total)
    return _result("Jensen L_in <= L_out", max(worst, 0.0), 1e-12, f"max(L_in - L_out)={worst:.2e}")


def check_jensen_equality(seed, count=200):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        b = equal_similarity_batch(rng, int(rng.integers(2, 9)), 4, int(rng.integers(1, 4)))
        tau = float(rng.choice([0.07, 0.1, 0.5, 1.0]))
        worst = max(worst, abs(loss_sup_in(b, tau).total - loss_sup_out(b, tau).total))
    return _result("Jensen equality case", worst, 1e-9)


def check_hierarchy(seed, count=200):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        n2 = int(rng.choice([4, 8, 16]))
        tau = float(rng.choice([0.07, 0.1, 0.5, 1.0]))
        distinct = random_batch(rng, n2, 5, None)
        worst = max(worst, abs(loss_sup_out(distinct, tau).total - loss_self(distinct, tau).total))
        # two sources per class guarantees a cross positive for every anchor
        paired = random_batch(rng, 2 * n2, 5, np.repeat(np.arange(n2 // 2), 2))
        worst = max(worst, abs(loss_npairs(paired).total
                               - loss_sup_out(npairs_positive_batch(paired), 1.0).total))
        capped = cap_positives(random_batch(rng, n2, 5, 2), 1, int(rng.integers(2**31)))
        if not np.array_equal(capped.positive_mask, np.eye(n2, dtype=bool)[capped.view_pair]):
            worst = np.inf
        worst = max(worst, abs(loss_sup_out(capped, tau).total - loss_self(capped, tau).total))
    return _result("hierarchy reductions", worst, 1e-14, "SelfSup, N-pairs, k=1 cap")


def check_triplet(seed, count=1000):
    rng = np.random.default_rng(seed)
    worst_identity = 0.0
    worst_bound = -np.inf
    for _ in range(count):
        a, p, n = normalize_rows(rng.normal(size=(3, 6)))
        tau = float(rng.uniform(0.05, 1.0))
        exact, _, _ = triplet_limit_check(a, p, n, tau)
        delta = a @ n - a @ p
        worst_identity = max(worst_identity, abs(exact - np.log1p(np.exp(delta / tau))))
        # sweep delta / tau over [-10, -1] by choosing tau for this triple
        if delta < 0:
            for ratio in np.linspace(-10.0, -1.0, 10):
                exact, approx, bound = triplet_limit_check(a, p, n, delta / ratio)
                worst_bound = max(worst_bound, abs(exact - approx) - bound)
    # the exact loss is a difference of O(1/tau) logits, so it carries
    # roundoff at the identity tolerance; the bound is held to the same slack
    ok_bound = worst_bound <= 1e-12
    res = _result("triplet limit", worst_identity, 1e-12,
                  f"max(|exact-approx| - bound)={worst_bound:.2e}")
    return CheckResult(res.name, res.passed and ok_bound, res.worst, res.tolerance, res.detail)


def check_xent(seed, count=1000):
    rng = np.random.default_rng(seed)
    worst_loss = worst_grad = 0.0
    for k in range(count):
        c = 2 if k % 4 == 0 else int(rng.integers(2, 9))
        n = int(rng.integers(1, 8))
        if c == 2:
            labels = np.arange(n) % 2  # data (0) vs noise (1)
        else:
            labels = rng.integers(0, c, n)
        logits = 3 * rng.normal(size=(n, c))
        tau = float(rng.uniform(0.1, 2.0))
        con, ce = xent_as_contrastive(logits, labels, tau)
        worst_loss = max(worst_loss, abs(con - ce))
        worst_grad = max(worst_grad, np.abs(xent_contrastive_grad(logits, labels, tau)
                                            - softmax_ce_grad(logits, labels, tau)).max())
    res = _result("cross-entropy equivalence", worst_loss, 1e-12, f"grad diff={worst_grad:.2e}")
    return CheckResult(res.name, res.passed and worst_grad <= 1e-10, res.worst, res.tolerance, res.detail)


def check_label_smoothing(seed, count=1000):
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(count):
        c = int(rng.integers(2, 9))
        n = int(rng.integers(1, 8))
        lhs, rhs = label_smoothing_bound(3 * rng.normal(size=(n, c)), rng.integers(0, c, n),
                                         0.9, 0.1 / (c - 1), float(rng.uniform(0.05, 2.0)))
        worst = max(worst, lhs - rhs)
    return _result("label smoothing <= contrastive", max(worst, 0.0), 1e-10, f"max(lhs-rhs)={worst:.2e}")


def check_tangency(seed, count=1000):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        b, W = random_batch_w(rng, int(rng.choice([4, 8, 16])), int(rng.choice([3, 8])))
        g = grad_total_w(W, b, float(rng.choice([0.07, 0.1, 0.5, 1.0])), "SupOut")
        worst = max(worst, np.abs(np.einsum("ij,ij->i", g, W)).max())
    return _result("w-gradient tangency", worst, 1e-10)


def check_hardness(seed, count=200):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        u, v = normalize_rows(rng.normal(size=(2, 5)))
        s = u @ v
        worst = max(worst, abs(np.sqrt(1 - s * s) - tangent_norm(u, v)))
    b = random_batch(rng, 8, 4, 2)
    easy = b.with_z(np.vstack([b.z[0], b.z[0], b.z[2:]]))
    easy_contrib = np.linalg.norm(pair_contribution_w(easy, 0.1, "SupOut", 0, 1))
    weights = [hardness_report(hard_positive_batch(m), 0.1, "SupOut").weight_of(0, 1)
               for m in range(2, 66, 2)]
    increasing = bool(np.all(np.diff(weights) > 0))
    ok = worst <= 1e-12 and easy_contrib <= 1e-12 and increasing
    return CheckResult("hard-mining properties", ok, worst, 1e-12,
                       f"easy contrib={easy_contrib:.1e} weights increasing={increasing}")


def check_anchor_gap(seed, count=200):
    """SupIn and SupOut anchor gradients coincide when all positives are one vector."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        b = equal_similarity_batch(rng, int(rng.integers(2, 9)), 4, int(rng.integers(1, 4)))
        worst = max(worst, np.abs(grad_anchor_z(b, 0.2, "SupIn") - grad_anchor_z(b, 0.2, "SupOut")).max())
    return _result("SupIn/SupOut anchor-gradient gap", worst, 1e-10)


def run_suite(seed=0, gradient_batches=100):
    checks = [
        lambda: check_gradients(seed, gradient_batches),
        lambda: check_jensen(seed + 1),
        lambda: check_jensen_equality(seed + 2),
        lambda: check_hierarchy(seed + 3),
        lambda: check_triplet(seed + 4),
        lambda: check_xent(seed + 5),
        lambda: check_label_smoothing(seed + 6),
        lambda: check_tangency(seed + 7),
        lambda: check_hardness(seed + 8),
        lambda: check_anchor_gap(seed + 9),
    ]
    return [check() for check in checks]
