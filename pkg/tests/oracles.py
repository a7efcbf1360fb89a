"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np


def qp_projection(raw, lo, hi, budget, tol=1e-9):
    """Euclidean projection onto {sum x = budget, lo <= x <= hi} by active-set enumeration.

    Every coordinate is tried at its lower bound, upper bound or free. For a
    given assignment the free coordinates share one multiplier, so the
    candidate is closed form; the KKT sign conditions pick the optimum.
    Nothing here shares code with the bisection solver.
    """
    raw, lo, hi = (np.asarray(v, dtype=float) for v in (raw, lo, hi))
    n = len(raw)
    best, best_d = None, np.inf
    for state in itertools.product((0, 1, 2), repeat=n):
        state = np.array(state)
        x = np.where(state == 0, lo, np.where(state == 1, hi, 0.0))
        free = state == 2
        if free.any():
            nu = (budget - x[~free].sum() - raw[free].sum()) / free.sum()
            x[free] = raw[free] + nu
            if np.any(x[free] < lo[free] - tol) or np.any(x[free] > hi[free] + tol):
                continue
        else:
            if abs(x.sum() - budget) > tol:
                continue
            # any multiplier in the KKT interval will do
            nu_lo = np.max(np.where(state == 1, hi - raw, -np.inf), initial=-np.inf)
            nu_hi = np.min(np.where(state == 0, lo - raw, np.inf), initial=np.inf)
            if nu_lo > nu_hi + tol:
                continue
            nu = None
        if nu is not None:
            # at lower bound: raw + nu <= lo; at upper bound: raw + nu >= hi
            if np.any((state == 0) & (raw + nu > lo + tol)) or np.any((state == 1) & (raw + nu < hi - tol)):
                continue
        d = float(np.sum((x - raw) ** 2))
        if d < best_d:
            best, best_d = x, d
    return best


def random_instance(rng, n):
    """Random feasible intersection with integer bounds and budget, plus flows."""
    from trafficloop.core import ApproachSpec, IntersectionSpec

    cycle = int(rng.integers(40, 121))
    lost = int(rng.integers(0, 4 * n + 1))
    budget = cycle - lost
    while True:
        lo = rng.integers(3, 16, n)
        hi = lo + rng.integers(5, budget, n)
        hi = np.minimum(hi, budget)
        if lo.sum() <= budget <= hi.sum():
            break
    sat = rng.uniform(0.3, 2.0, n)
    spec = IntersectionSpec(
        "r", tuple(ApproachSpec(f"a{i}", float(s)) for i, s in enumerate(sat)),
        float(cycle), float(lost), tuple(float(v) for v in lo), tuple(float(v) for v in hi),
    )
    # per-approach degree of saturation at an even split, mostly below 1
    load = rng.uniform(0.1, 1.1, n)
    flows = load * sat * (budget / n / cycle) * 300
    return spec, flows.tolist()
