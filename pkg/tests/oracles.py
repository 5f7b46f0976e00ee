"""Independent reference implementations used as test oracles.

Written with plain loops over the definitions, sharing no code with the
package.
"""
import itertools
import math


def norm2(a, b):
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2)


def ade_fde_oracle(preds, gt):
    """Per-mode ADE and FDE lists from nested Python sequences."""
    ades, fdes = [], []
    for mode in preds:
        errs = [norm2(p, g) for p, g in zip(mode, gt)]
        ades.append(sum(errs) / len(errs))
        fdes.append(errs[-1])
    return ades, fdes


def metrics_oracle(cases):
    """cases: list of (preds K x N x 2, pi K, gt N x 2). Returns dict of batch metrics."""
    ade_sum = fde_sum = brier_sum = 0.0
    misses = 0
    for preds, pi, gt in cases:
        ades, fdes = ade_fde_oracle(preds, gt)
        best_f = min(fdes)
        k = fdes.index(best_f)
        ade_sum += min(ades)
        fde_sum += best_f
        brier_sum += best_f + (1.0 - pi[k]) ** 2
        if best_f > 2.0:
            misses += 1
    n = len(cases)
    return {"min_ade": ade_sum / n, "min_fde": fde_sum / n, "miss_rate": misses / n, "brier_min_fde": brier_sum / n}


def hyperedge_oracle(a, size):
    """Exhaustive enumeration: for each vertex, every size-subset containing it.

    Scores use exact rational arithmetic on the float entries; ties go to the
    lexicographically smallest sorted tuple. Duplicates keep first occurrence.
    """
    from fractions import Fraction

    m = len(a)
    absa = [[Fraction(abs(float(a[i][j]))) for j in range(m)] for i in range(m)]
    edges = []
    for v in range(m):
        best, best_s = None, None
        for subset in itertools.combinations(range(m), size):
            if v not in subset:
                continue
            s = sum(absa[i][j] for i in subset for j in subset)
            if best_s is None or s > best_s or (s == best_s and subset < best):
                best, best_s = subset, s
        if best not in edges:
            edges.append(best)
    return edges


def laplace_nll_oracle(mu, b, gt):
    """Mean over steps of -log prod_c (1/(2b)) exp(-|y-mu|/b) for one trajectory."""
    total = 0.0
    for m_t, b_t, y_t in zip(mu, b, gt):
        dens = 1.0
        for c in range(2):
            dens *= math.exp(-abs(y_t[c] - m_t[c]) / b_t[c]) / (2.0 * b_t[c])
        total += -math.log(dens)
    return total / len(mu)


def cross_entropy_oracle(pi, k):
    return -math.log(pi[k])


def best_mode_oracle(preds, gt):
    sums = [sum(norm2(p, g) for p, g in zip(mode, gt)) for mode in preds]
    best = min(sums)
    return sums.index(best)


def smooth_l1_oracle(x):
    return 0.5 * x * x if abs(x) < 1.0 else abs(x) - 0.5


def bicycle_rollout_oracle(x, y, psi, v, controls, dt=0.1, wheelbase=2.8):
    out = []
    for a, delta in controls:
        v = max(0.0, v + a * dt)
        psi += v * math.tan(delta) / wheelbase * dt
        x += v * math.cos(psi) * dt
        y += v * math.sin(psi) * dt
        out.append((x, y))
    return out
