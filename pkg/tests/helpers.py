"""Shared test utilities: an independent central-difference gradient oracle
and an exact-rational detection-metric oracle.

Deliberately separate from the package's own implementations so the two
routes can vouch for each other.
"""

from fractions import Fraction

import numpy as np

FD_EPS = 1e-5
FD_THRESHOLD = 1e-4
# Central differences cannot resolve loss changes below ~ulp(loss)/2eps; an
# absolute disagreement under this floor counts as agreement at zero.
FD_ATOL = 1e-9


def numeric_grad(fn, array, eps=FD_EPS):
    """Elementwise central differences of the scalar fn() w.r.t. array,
    perturbing the array in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return grad


def assert_grads_close(analytic, numeric, threshold=FD_THRESHOLD, atol=FD_ATOL, what=""):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    assert a.shape == n.shape, f"{what}: shape {a.shape} vs {n.shape}"
    for i in range(a.size):
        if abs(a[i] - n[i]) < atol:
            continue
        rel = abs(a[i] - n[i]) / max(abs(a[i]), abs(n[i]), 1e-8)
        assert rel < threshold, (
            f"{what} element {i}: analytic {a[i]!r}, numeric {n[i]!r}, rel err {rel:.3e}")


# -- detection-metric oracle (exact rational arithmetic) -----------------------


def oracle_points(scores, labels):
    """Every achievable (P_miss, P_fa) operating point, exact fractions,
    sweeping accept-all -> reject-all."""
    tar = [s for s, l in zip(scores, labels) if l == 1]
    non = [s for s, l in zip(scores, labels) if l == 0]
    pts = []
    for thr in sorted(set(scores)):
        pm = Fraction(sum(1 for s in tar if s < thr), len(tar))
        pf = Fraction(sum(1 for s in non if s >= thr), len(non))
        pts.append((pm, pf))
    pts.append((Fraction(1), Fraction(0)))
    return pts


def oracle_eer(scores, labels):
    pts = oracle_points(scores, labels)
    prev = None
    for pm, pf in pts:
        d = pm - pf
        if d == 0:
            return float(pm)
        if d > 0:
            pm1, pf1 = prev
            t = (pf1 - pm1) / ((pm - pm1) - (pf - pf1))
            return float(pm1 + t * (pm - pm1))
        prev = (pm, pf)
    raise AssertionError("no crossing found")


def oracle_min_dcf(scores, labels, p_target, c_miss, c_fa):
    p = Fraction(p_target)
    cm = Fraction(c_miss)
    cf = Fraction(c_fa)
    pts = oracle_points(scores, labels)
    best = min(cm * p * pm + cf * (1 - p) * pf for pm, pf in pts)
    return float(best / min(cm * p, cf * (1 - p)))


def random_score_set(rng, max_side=25):
    """Scores rounded to 3 decimals so ties across classes actually happen."""
    n_tar = int(rng.integers(1, max_side + 1))
    n_non = int(rng.integers(1, max_side + 1))
    scores = np.round(rng.normal(0, 1, n_tar + n_non), 3)
    labels = np.concatenate([np.ones(n_tar, dtype=int), np.zeros(n_non, dtype=int)])
    return scores, labels
