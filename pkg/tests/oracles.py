"""Brute-force reference implementations shared by the unit and acceptance tests."""

import math
from fractions import Fraction


def scalar_gabor(x, y, lam, sigma, theta, gamma):
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    return math.exp(-(xr ** 2 + gamma ** 2 * yr ** 2) / (2 * sigma ** 2)) * math.cos(2 * math.pi * xr / lam)


def rates(gen, imp, t):
    far = Fraction(sum(1 for v in imp if v < t), len(imp))
    frr = Fraction(sum(1 for v in gen if v >= t), len(gen))
    return far, frr


def eer(gen, imp):
    vals = sorted(set(gen) | set(imp))
    cands = set(vals)
    for a, b in zip(vals, vals[1:]):
        cands.add((a + b) / 2)
    pad = max(1.0, vals[-1] - vals[0])
    cands |= {vals[0] - pad, vals[-1] + pad}
    prev = None
    for t in sorted(cands):
        far, frr = rates(gen, imp, t)
        if far == frr:
            return float(far)
        if far > frr:
            pf, pr = prev
            a = (pr - pf) / ((far - frr) - (pf - pr))
            return float(pf + a * (far - pf))
        prev = (far, frr)
    raise AssertionError("no crossing")


def gar(gen, imp, target):
    best = -math.inf
    for t in list(imp) + [math.inf]:
        if sum(1 for v in imp if v < t) <= target * len(imp) + 1e-9:
            best = max(best, t)
    return sum(1 for v in gen if v < best) / len(gen)


def rank1(d, probe_ids, gallery_ids):
    hits = 0
    for i, row in enumerate(d):
        best_j = 0
        for j, v in enumerate(row):
            if v < row[best_j]:
                best_j = j
        hits += gallery_ids[best_j] == probe_ids[i]
    return hits / len(d)
