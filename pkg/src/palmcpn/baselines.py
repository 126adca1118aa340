"""Hand-crafted coding matchers: competitive orientation code and region histograms."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .gabor import orientation_bank

CHI_EPS = 1e-12


@dataclass(frozen=True)
class CodeConfig:
    n_orientations: int = 6
    lam: float = 10.0
    sigma: float = 3.0
    size: int = 17
    gamma: float = 0.5
    curved: bool = False
    tie_tol: float = 1e-9

    def __post_init__(self):
        if self.n_orientations < 2:
            raise ValueError("need at least two coding orientations")

    def bank(self) -> np.ndarray:
        return orientation_bank(self.n_orientations, self.lam, self.sigma, self.size, self.gamma, curved=self.curved)


@dataclass
class OrientationCodeMap:
    codes: np.ndarray
    n_orientations: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.n_orientations):
            raise ValueError("codes must lie in [0, K)")


def filter_responses(roi: np.ndarray, bank: np.ndarray) -> np.ndarray:
    roi = np.asarray(roi, dtype=np.float64)
    return np.stack([ndimage.correlate(roi, k, mode="reflect") for k in bank])


def compcode_encode(roi: np.ndarray, bank: np.ndarray, tie_tol: float = 1e-9) -> OrientationCodeMap:
    """Winner-take-all code: the orientation with the most negative response.

    Responses within ``tie_tol`` (relative to the largest magnitude) of the
    minimum count as tied, and the lowest index wins.
    """
    resp = filter_responses(roi, bank)
    scale = max(float(np.abs(resp).max()), 1.0)
    low = resp.min(axis=0)
    tied = resp <= low + tie_tol * scale
    return OrientationCodeMap(np.argmax(tied, axis=0), len(bank))


def _check_pair(a: OrientationCodeMap, b: OrientationCodeMap) -> None:
    if a.codes.shape != b.codes.shape:
        raise ValueError(f"code maps differ in shape: {a.codes.shape} vs {b.codes.shape}")
    if a.n_orientations != b.n_orientations:
        raise ValueError("code maps use different orientation counts")


def compcode_distance(a: OrientationCodeMap, b: OrientationCodeMap) -> float:
    """Mean angular code distance, scaled to [0, 1]."""
    _check_pair(a, b)
    k = a.n_orientations
    diff = np.abs(a.codes - b.codes)
    return float(np.minimum(diff, k - diff).mean() / (k // 2))


def _cell_edges(n: int, parts: int) -> np.ndarray:
    return np.linspace(0, n, parts + 1).round().astype(int)


def region_histograms(m: OrientationCodeMap, grid: Tuple[int, int] = (3, 3)) -> np.ndarray:
    """Per-cell L1-normalized code histograms, shape (rows, cols, K); empty cells are uniform."""
    rows, cols = grid
    k = m.n_orientations
    re, ce = _cell_edges(m.codes.shape[0], rows), _cell_edges(m.codes.shape[1], cols)
    out = np.full((rows, cols, k), 1.0 / k)
    for i in range(rows):
        for j in range(cols):
            cell = m.codes[re[i]:re[i + 1], ce[j]:ce[j + 1]]
            if cell.size:
                out[i, j] = np.bincount(cell.ravel(), minlength=k) / cell.size
    return out


def chi_square(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * ((p - q) ** 2 / (p + q + CHI_EPS)).sum(axis=-1)


def region_hist_distance(a: OrientationCodeMap, b: OrientationCodeMap, grid: Tuple[int, int] = (3, 3)) -> float:
    _check_pair(a, b)
    return float(chi_square(region_histograms(a, grid), region_histograms(b, grid)).mean())


# ----------------------------------------------------------------- matchers
class CodeMatcher:
    """Encodes ROIs with one orientation bank and compares codes pixel-wise or by region."""

    kinds = ("compcode", "region-hist")

    def __init__(self, kind: str = "compcode", config: CodeConfig = CodeConfig(), grid: Tuple[int, int] = (3, 3)):
        if kind not in self.kinds:
            raise ValueError(f"unknown matcher {kind!r}; choose from {self.kinds}")
        self.kind = kind
        self.config = config
        self.grid = grid
        self._bank = config.bank()

    @property
    def name(self) -> str:
        return f"{self.kind}-{'curved' if self.config.curved else 'straight'}"

    def encode(self, roi: np.ndarray) -> OrientationCodeMap:
        return compcode_encode(roi, self._bank, self.config.tie_tol)

    def distance(self, a: OrientationCodeMap, b: OrientationCodeMap) -> float:
        if self.kind == "compcode":
            return compcode_distance(a, b)
        return region_hist_distance(a, b, self.grid)

    def encode_many(self, rois) -> List[OrientationCodeMap]:
        return [self.encode(r) for r in rois]

    def distance_matrix(self, a: Sequence[OrientationCodeMap], b: Sequence[OrientationCodeMap]) -> np.ndarray:
        """All pairwise distances, vectorized; equal to calling `distance` on every pair."""
        if not len(a) or not len(b):
            return np.zeros((len(a), len(b)))
        k = self.config.n_orientations
        if self.kind == "compcode":
            ca = np.stack([m.codes.ravel() for m in a])
            cb = np.stack([m.codes.ravel() for m in b])
            if ca.shape[1] != cb.shape[1]:
                raise ValueError("code maps differ in shape")
            out = np.empty((len(a), len(b)))
            for i, row in enumerate(ca):
                diff = np.abs(row[None, :] - cb)
                out[i] = np.minimum(diff, k - diff).mean(axis=1) / (k // 2)
            return out
        ha = np.stack([region_histograms(m, self.grid) for m in a]).reshape(len(a), 1, -1, k)
        hb = np.stack([region_histograms(m, self.grid) for m in b]).reshape(1, len(b), -1, k)
        return chi_square(ha, hb).mean(axis=-1)


def combined_distance(d_straight: float, d_curved: float) -> float:
    return 0.5 * (d_straight + d_curved)


class CombinedMatcher:
    """Averages the distances of a straight-bank and a curved-bank matcher."""

    def __init__(self, straight: CodeMatcher, curved: CodeMatcher):
        self.straight, self.curved = straight, curved

    @property
    def name(self) -> str:
        return f"{self.straight.kind}-combined"

    def encode(self, roi: np.ndarray):
        return self.straight.encode(roi), self.curved.encode(roi)

    def distance(self, a, b) -> float:
        return combined_distance(self.straight.distance(a[0], b[0]), self.curved.distance(a[1], b[1]))

    def encode_many(self, rois):
        return [self.encode(r) for r in rois]

    def distance_matrix(self, a, b) -> np.ndarray:
        return combined_distance(self.straight.distance_matrix([x[0] for x in a], [y[0] for y in b]),
                                 self.curved.distance_matrix([x[1] for x in a], [y[1] for y in b]))


def make_matcher(kind: str, bank: str = "straight", config: CodeConfig = CodeConfig(), grid=(3, 3)):
    """``bank`` is straight, curved or combined."""
    if bank == "combined":
        return CombinedMatcher(CodeMatcher(kind, replace(config, curved=False), grid),
                               CodeMatcher(kind, replace(config, curved=True), grid))
    if bank not in ("straight", "curved"):
        raise ValueError(f"bank must be straight, curved or combined, got {bank!r}")
    return CodeMatcher(kind, replace(config, curved=(bank == "curved")), grid)
