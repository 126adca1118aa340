"""Verification protocol, error-rate metrics, score densities and the ROI-bias sweep.

Scores are distances: smaller means more alike, and a claim is accepted
when its distance falls strictly below the threshold.
"""

from __future__ import annotations

import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .roi import BiasSpec, bias_transform, normalize_image

log = logging.getLogger(__name__)

FAR_TARGETS = (1e-1, 1e-2, 1e-3, 1e-4)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise ValueError("scores must be finite")

    def require_both(self) -> None:
        if not len(self.genuine) or not len(self.impostor):
            raise ValueError("need at least one genuine and one impostor score")


# ----------------------------------------------------------------- protocol
@dataclass
class ProtocolResult:
    scores: ScoreSet
    claims: np.ndarray  # (probes, palms) min-rule distances
    palms: np.ndarray
    probe_ids: np.ndarray


def run_protocol(distances: np.ndarray, probe_ids: Sequence[int], gallery_ids: Sequence[int]) -> ProtocolResult:
    """Min-over-enrollments claims from a (probes, gallery templates) distance matrix.

    Every probe claims every enrolled palm. The claim distance is the minimum
    over that palm's templates. Probes of palms without enrollment are
    dropped with a warning.
    """
    d = np.asarray(distances, dtype=np.float64)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if d.shape != (len(probe_ids), len(gallery_ids)):
        raise ValueError(f"distance matrix {d.shape} does not match {len(probe_ids)} probes x "
                         f"{len(gallery_ids)} templates")
    palms = np.unique(gallery_ids)
    keep = np.isin(probe_ids, palms)
    if not keep.all():
        missing = sorted(set(probe_ids[~keep].tolist()))
        log.warning("dropping %d probes of palms without enrollment: %s", int((~keep).sum()), missing)
    d, probe_ids = d[keep], probe_ids[keep]
    claims = np.stack([d[:, gallery_ids == p].min(axis=1) for p in palms], axis=1) if len(palms) else \
        np.zeros((len(probe_ids), 0))
    same = probe_ids[:, None] == palms[None, :]
    return ProtocolResult(ScoreSet(claims[same], claims[~same]), claims, palms, probe_ids)


def rank1(distances: np.ndarray, probe_ids: Sequence[int], gallery_ids: Sequence[int]) -> float:
    """Fraction of probes whose nearest enrolled template has their identity (first index wins ties)."""
    d = np.asarray(distances)
    if d.shape[0] == 0:
        raise ValueError("no probes")
    nearest = np.asarray(gallery_ids)[np.argmin(d, axis=1)]
    return float(np.mean(nearest == np.asarray(probe_ids)))


# ------------------------------------------------------------------ metrics
def _rates(scores: ScoreSet, thresholds: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(FAR, FRR) at each threshold."""
    imp = np.sort(scores.impostor)
    gen = np.sort(scores.genuine)
    far = np.searchsorted(imp, thresholds, side="left") / len(imp)
    frr = 1.0 - np.searchsorted(gen, thresholds, side="left") / len(gen)
    return far, frr


def candidate_thresholds(scores: ScoreSet) -> np.ndarray:
    """Every score, every midpoint between neighbouring scores, and one value past each end."""
    u = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    mids = (u[:-1] + u[1:]) / 2
    pad = max(1.0, float(u[-1] - u[0]))
    return np.unique(np.concatenate([u, mids, [u[0] - pad, u[-1] + pad]]))


def compute_eer(scores: ScoreSet) -> Tuple[float, float]:
    """(EER, threshold), interpolating linearly between the thresholds that bracket FAR = FRR.

    The rates are ratios of counts, so the interpolated EER is computed as an
    exact fraction and rounded once.
    """
    scores.require_both()
    t = candidate_thresholds(scores)
    far, frr = _rates(scores, t)
    gap = far - frr  # non-decreasing in t
    tie = np.flatnonzero(gap == 0)
    if len(tie):
        i = tie[0]
        return float(far[i]), float(t[i])
    i = int(np.searchsorted(gap, 0.0)) - 1  # last index with gap < 0
    ni, ng = len(scores.impostor), len(scores.genuine)
    fa = [Fraction(int(round(v * ni)), ni) for v in far[i:i + 2]]
    fr = [Fraction(int(round(v * ng)), ng) for v in frr[i:i + 2]]
    ga, gb = fa[0] - fr[0], fa[1] - fr[1]
    a = -ga / (gb - ga)
    eer = fa[0] + a * (fa[1] - fa[0])
    return float(eer), float(t[i] + float(a) * (t[i + 1] - t[i]))


@dataclass(frozen=True)
class GarPoint:
    far_target: float
    gar: float
    threshold: float
    reachable: bool  # False: too few impostors to resolve the target, GAR is a lower bound


def gar_at_far(scores: ScoreSet, targets: Sequence[float] = FAR_TARGETS) -> List[GarPoint]:
    """GAR at the largest threshold whose FAR does not exceed each target."""
    scores.require_both()
    imp = np.sort(scores.impostor)
    n = len(imp)
    out = []
    for target in targets:
        if not 0 < target <= 1:
            raise ValueError(f"FAR target must lie in (0, 1], got {target}")
        k = int(math.floor(target * n + 1e-9))
        thr = float(imp[k]) if k < n else math.inf
        gar = float(np.mean(scores.genuine < thr))
        out.append(GarPoint(float(target), gar, thr, n * target >= 1 - 1e-9))
    return out


def roc_points(scores: ScoreSet) -> np.ndarray:
    """(FAR, GAR) rows over all candidate thresholds, from (0, 0) to (1, 1)."""
    scores.require_both()
    t = np.concatenate([[-math.inf], candidate_thresholds(scores), [math.inf]])
    far, frr = _rates(scores, t)
    return np.unique(np.stack([far, 1.0 - frr], axis=1), axis=0)


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    std = x.std(ddof=1) if len(x) > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34) if q75 > q25 else std
    h = 0.9 * spread * len(x) ** (-0.2)
    return float(h) if h > 0 else 1e-3


def score_density(x: Sequence[float], grid: Optional[np.ndarray] = None, bandwidth: Optional[float] = None,
                  n_points: int = 200) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian kernel density of ``x`` on ``grid``, scaled so its peak is 1."""
    x = np.asarray(x, dtype=np.float64)
    if not len(x):
        raise ValueError("no scores")
    h = bandwidth if bandwidth is not None else silverman_bandwidth(x)
    if grid is None:
        grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_points)
    dens = np.exp(-0.5 * ((grid[:, None] - x[None, :]) / h) ** 2).sum(axis=1)
    peak = dens.max()
    return grid, dens / peak if peak > 0 else dens


@dataclass
class EvalReport:
    rank1: Optional[float]
    eer: float
    eer_threshold: float
    roc: np.ndarray
    gar: List[GarPoint]
    density_grid: np.ndarray
    density_genuine: np.ndarray
    density_impostor: np.ndarray
    n_genuine: int
    n_impostor: int

    def summary_row(self) -> Dict[str, object]:
        row: Dict[str, object] = {"rank1": "" if self.rank1 is None else self.rank1, "eer": self.eer,
                                  "eer_threshold": self.eer_threshold,
                                  "n_genuine": self.n_genuine, "n_impostor": self.n_impostor}
        for g in self.gar:
            key = f"gar@{g.far_target:g}"
            row[key] = g.gar
            row[key + "_reachable"] = int(g.reachable)
        return row


def evaluate_scores(scores: ScoreSet, rank1_value: Optional[float] = None, bandwidth: Optional[float] = None,
                    n_points: int = 200) -> EvalReport:
    eer, thr = compute_eer(scores)
    allv = np.concatenate([scores.genuine, scores.impostor])
    h = bandwidth if bandwidth is not None else silverman_bandwidth(allv)
    grid = np.linspace(allv.min() - 3 * h, allv.max() + 3 * h, n_points)
    _, dg = score_density(scores.genuine, grid, bandwidth)
    _, di = score_density(scores.impostor, grid, bandwidth)
    return EvalReport(rank1_value, eer, thr, roc_points(scores), gar_at_far(scores), grid, dg, di,
                      len(scores.genuine), len(scores.impostor))


# ----------------------------------------------------------------- matchers
def cosine_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return np.clip(1.0 - an @ bn.T, 0.0, 2.0)


class DescriptorMatcher:
    """Cosine distance between network descriptors."""

    name = "3dcpn"

    def __init__(self, model, batch_size: int = 32):
        self.model = model
        self.batch_size = batch_size

    def encode_many(self, images: Sequence[np.ndarray]) -> np.ndarray:
        batch = np.stack([normalize_image(i) for i in images])[:, None]
        return self.model.embed(batch.astype(self.model.dtype), self.batch_size)

    def distance_matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return cosine_distance_matrix(a, b)


def match(matcher, probes: Sequence[np.ndarray], gallery: Sequence[np.ndarray]) -> np.ndarray:
    return matcher.distance_matrix(matcher.encode_many(probes), matcher.encode_many(gallery))


def evaluate_matcher(matcher, gallery: Sequence[np.ndarray], gallery_ids: Sequence[int],
                     probes: Sequence[np.ndarray], probe_ids: Sequence[int]) -> EvalReport:
    d = match(matcher, probes, gallery)
    res = run_protocol(d, probe_ids, gallery_ids)
    keep = np.isin(np.asarray(probe_ids), res.palms)
    r1 = rank1(d[keep], np.asarray(probe_ids)[keep], gallery_ids)
    return evaluate_scores(res.scores, r1)


# --------------------------------------------------------------- bias sweep
@dataclass(frozen=True)
class SweepRow:
    matcher: str
    r: int
    eer: float
    mean_translation: float


def bias_probes(probes: Sequence[np.ndarray], r: int, seed: int) -> Tuple[List[np.ndarray], float]:
    """Perturb each probe with its own seeded draw; returns images and the mean per-axis translation."""
    out, shifts = [], []
    for i, img in enumerate(probes):
        moved, (tx, ty) = bias_transform(np.asarray(img, dtype=np.float64), BiasSpec(r, seed * 100003 + i))
        out.append(moved)
        shifts += [tx, ty]
    return out, float(np.mean(shifts)) if shifts else 0.0


def bias_sweep(matchers: Sequence, gallery: Sequence[np.ndarray], gallery_ids: Sequence[int],
               probes: Sequence[np.ndarray], probe_ids: Sequence[int], r_values: Sequence[int],
               seed: int = 0) -> List[SweepRow]:
    """EER per matcher and bias degree; only the probes are perturbed."""
    rows = []
    encoded_gallery = {id(m): m.encode_many(gallery) for m in matchers}
    for r in r_values:
        moved, mean_t = bias_probes(probes, r, seed)
        for m in matchers:
            d = m.distance_matrix(m.encode_many(moved), encoded_gallery[id(m)])
            eer, _ = compute_eer(run_protocol(d, probe_ids, gallery_ids).scores)
            rows.append(SweepRow(m.name, int(r), eer, mean_t))
    return rows
