"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines are printed even without
``-s``) or directly with ``python3 tests/test_acceptance.py``.
"""

import functools
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from supconlab import cli
from supconlab import experiments as ex
from supconlab.data import nearest_centroid_accuracy
from supconlab.model import expected_calibration_error
from supconlab.verify import (
    check_gradients,
    check_hardness,
    check_hierarchy,
    check_jensen,
    check_jensen_equality,
    check_label_smoothing,
    check_triplet,
    check_xent,
)

SEEDS = (0, 1, 2)


@functools.lru_cache(maxsize=None)
def probe_top1(loss, dataset, seed, max_positives=None):
    cfg = ex.RunConfig(loss=loss, dataset=dataset, seed=seed, max_positives=max_positives,
                       severities=(0,))
    return ex.run_train(cfg)["probe_top1"]


def mean_top1(loss, max_positives=None):
    return float(np.mean([probe_top1(loss, "overlap", s, max_positives) for s in SEEDS]))


def c1_gradients():
    t0 = time.perf_counter()
    r = check_gradients(seed=0, count=100)
    dt = time.perf_counter() - t0
    return r.passed and dt < 60, f"max rel err {r.worst:.2e} <= 1e-6, {dt:.1f}s < 60s"


def c2_jensen():
    a, b = check_jensen(1), check_jensen_equality(2)
    return a.passed and b.passed, f"{a.detail} (10^4 batches, tol 1e-12); equality gap {b.worst:.1e} <= 1e-9"


def c3_hierarchy():
    r = check_hierarchy(3)
    return r.passed, f"worst {r.worst:.1e} <= 1e-14 over SelfSup, N-pairs, k=1 reductions"


def c4_triplet():
    r = check_triplet(4)
    return r.passed, f"identity err {r.worst:.1e} <= 1e-12; {r.detail} over delta/tau in [-10,-1]"


def c5_xent():
    r = check_xent(5)
    return r.passed, f"loss diff {r.worst:.1e} <= 1e-12, {r.detail} <= 1e-10 (10^3 cases incl. C=2)"


def c6_label_smoothing():
    r = check_label_smoothing(6)
    return r.passed, f"{r.detail} <= 1e-10 (10^3 instances, beta1=0.9, beta2=0.1/(C-1))"


def c7_hardness():
    r = check_hardness(8)
    return r.passed, f"tangent identity {r.worst:.1e} <= 1e-12; {r.detail}"


def c8_two_stage():
    t0 = time.perf_counter()
    blobs = ex.load_dataset("blobs")
    oracle = nearest_centroid_accuracy(blobs)
    top1 = probe_top1("SupOut", "blobs", 0)
    out, inn = mean_top1("SupOut"), mean_top1("SupIn")
    dt = time.perf_counter() - t0
    ok = oracle >= 0.99 and top1 >= 0.95 and out >= inn - 0.01 and dt < 300
    return ok, (f"centroid {oracle:.4f} >= 0.99, probe {top1:.4f} >= 0.95; overlap SupOut "
                f"{out:.4f} >= SupIn {inn:.4f} - 0.01; {dt:.0f}s < 300s")


def c9_positives():
    full, k1 = mean_top1("SupOut"), mean_top1("SupOut", 1)
    return full >= k1 - 0.02, f"uncapped {full:.4f} >= k=1 {k1:.4f} - 0.02 (3 seeds, overlap)"


def c10_robustness():
    base = ex.RunConfig(loss="SupOut", dataset="blobs")
    rows = ex.robustness(base, "xent")
    acc = np.array([[r[1], r[2]] for r in rows])
    ece = np.array([[r[3], r[4]] for r in rows])
    steps_ok = bool(np.all(np.diff(acc, axis=0) <= 0.03))
    ece_ok = bool(np.all(np.isfinite(ece)) and np.all((ece >= 0) & (ece <= 1)))
    # 10-sample fixture with hand-computed bins
    probs = np.zeros((10, 3))
    conf = np.array([0.95] * 4 + [0.5] * 3)
    probs[:7, 0], probs[:7, 1] = conf, 1 - conf
    probs[7:] = [0.3, 0.6, 0.1]
    labels = np.array([0, 0, 0, 1, 0, 1, 1, 1, 0, 0])
    hand = 0.4 * abs(0.75 - 0.95) + 0.3 * abs(1 / 3 - 0.6) + 0.3 * abs(1 / 3 - 0.5)
    fixture_ok = abs(expected_calibration_error(probs, labels) - hand) <= 1e-15
    table = " ".join(f"s{r[0]}:{r[1]:.3f}/{r[2]:.3f}" for r in rows)
    return steps_ok and ece_ok and fixture_ok, (
        f"supcon/xent top1 {table}; max step increase {np.diff(acc, axis=0).max():+.3f} <= 0.03; "
        f"ECE fixture {'exact' if fixture_ok else 'MISMATCH'}")


def c11_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        paths = []
        for args in (["--loss", "SupOut"], ["--loss", "two-stage-xent", "--epochs", "20"]):
            pair = [Path(tmp) / f"{args[1]}-{k}.json" for k in range(2)]
            for p in pair:
                code = cli.main(["train", *args, "--seed", "7", "--out", str(p)])
                if code != 0:
                    return False, f"train exited {code}"
            paths.append(pair)
        same = all(a.read_bytes() == b.read_bytes() for a, b in paths)
    return same, "repeated cmd_train runs (SupOut, two-stage-xent) byte-identical"


CRITERIA = [
    ("1 gradient suite", c1_gradients),
    ("2 Jensen ordering", c2_jensen),
    ("3 hierarchy reductions", c3_hierarchy),
    ("4 triplet correspondence", c4_triplet),
    ("5 cross-entropy equivalence", c5_xent),
    ("6 label-smoothing bound", c6_label_smoothing),
    ("7 hard-mining properties", c7_hardness),
    ("8 two-stage desk experiment", c8_two_stage),
    ("9 positives sweep", c9_positives),
    ("10 robustness sweep", c10_robustness),
    ("11 determinism", c11_determinism),
]


def evaluate_criterion(fn):
    with threadpool_limits(limits=1):
        return fn()


def line(name, ok, detail):
    return f"{'PASS' if ok else 'FAIL'}  criterion {name}: {detail}"


@pytest.mark.parametrize("name,fn", CRITERIA, ids=[c[0].split()[0] for c in CRITERIA])
def test_criterion(name, fn, capsys):
    ok, detail = evaluate_criterion(fn)
    with capsys.disabled():
        print("\n" + line(name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for name, fn in CRITERIA:
        ok, detail = evaluate_criterion(fn)
        failed += not ok
        print(line(name, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
