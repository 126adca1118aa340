"""Real-valued Gabor templates, curved Gabor templates and the frozen filter bank.

Kernels are indexed ``[row, col]`` with row = y (growing downward) and
col = x on a centered integer grid, so the center pixel is (0, 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy import ndimage

DEFAULT_GAMMA = 0.5


@dataclass(frozen=True)
class GaborParams:
    lam: float
    sigma: float
    theta: float = 0.0
    gamma: float = DEFAULT_GAMMA
    size: int = 35

    def __post_init__(self):
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 3, got {self.size}")
        if self.lam <= 0 or self.sigma <= 0:
            raise ValueError("wavelength and sigma must be positive")
        if not 0 <= self.theta < math.pi:
            raise ValueError(f"theta must lie in [0, pi), got {self.theta}")


@dataclass(frozen=True)
class BankConfig:
    lambdas: Tuple[float, ...] = (5.0, 10.0, 15.0)
    sigmas: Tuple[float, ...] = (1.0, 3.0, 5.0)
    n_directions: int = 12
    size: int = 35
    include_curved: bool = True
    gamma: float = DEFAULT_GAMMA
    bend: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "sigmas", tuple(float(v) for v in self.sigmas))
        if not self.lambdas or not self.sigmas:
            raise ValueError("the wavelength and sigma sets must be non-empty")
        if self.n_directions < 1:
            raise ValueError("need at least one direction")
        if self.bend not in (1, -1):
            raise ValueError("bend must be +1 or -1")
        GaborParams(self.lambdas[0], self.sigmas[0], 0.0, self.gamma, self.size)

    @property
    def n_groups(self) -> int:
        """Number of depth-K templates (2 * n1 * n2 with curved filters on)."""
        return len(self.lambdas) * len(self.sigmas) * (2 if self.include_curved else 1)

    @property
    def n_kernels(self) -> int:
        return self.n_groups * self.n_directions


@dataclass(frozen=True)
class KernelInfo:
    index: int
    curved: bool
    lam: float
    sigma: float
    theta: float

    @property
    def kind(self) -> str:
        return "curved" if self.curved else "straight"


@dataclass
class GaborBank:
    kernels: np.ndarray  # (n_groups * K, size, size)
    info: List[KernelInfo]
    config: BankConfig = field(default_factory=BankConfig)

    def __len__(self) -> int:
        return len(self.kernels)

    def grouped(self) -> np.ndarray:
        """View of the kernels as (n_groups, K, size, size)."""
        c = self.config
        return self.kernels.reshape(c.n_groups, c.n_directions, c.size, c.size)

    def listing(self) -> str:
        lines = ["index\ttype\tlambda\tsigma\ttheta"]
        for k in self.info:
            lines.append(f"{k.index}\t{k.kind}\t{k.lam:g}\t{k.sigma:g}\t{k.theta:.6f}")
        return "\n".join(lines) + "\n"


def directions(n: int) -> np.ndarray:
    return np.arange(n) * (math.pi / n)


def grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Centered integer coordinates (x, y), each shaped (size, size)."""
    half = (size - 1) // 2
    r = np.arange(-half, half + 1, dtype=np.float64)
    y, x = np.meshgrid(r, r, indexing="ij")
    return x, y


def eval_gabor(x, y, lam: float, sigma: float, theta: float = 0.0, gamma: float = DEFAULT_GAMMA):
    """Real Gabor function: Gaussian envelope times a cosine carrier along the rotated x axis."""
    c, s = math.cos(theta), math.sin(theta)
    xr = x * c + y * s
    yr = -x * s + y * c
    return np.exp(-(xr * xr + gamma * gamma * yr * yr) / (2.0 * sigma * sigma)) * np.cos(2.0 * math.pi * xr / lam)


def build_template(lam: float, sigma: float, n_directions: int, size: int,
                   gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Straight Gabor template, shape (K, size, size), sampled analytically per direction."""
    GaborParams(lam, sigma, 0.0, gamma, size)
    x, y = grid(size)
    return np.stack([eval_gabor(x, y, lam, sigma, t, gamma) for t in directions(n_directions)])


def arc_shift(offset, size: int) -> np.ndarray:
    """Sagitta of a circle of radius size/3 at signed distance ``offset`` from the anchor.

    Beyond the radius the shift saturates at the radius.
    """
    radius = size / 3.0
    c = np.minimum(np.abs(np.asarray(offset, dtype=np.float64)), radius)
    return radius - np.sqrt(radius * radius - c * c)


def curved_base(lam: float, sigma: float, size: int, gamma: float = DEFAULT_GAMMA, bend: int = 1) -> np.ndarray:
    """The theta = 0 curved filter.

    At theta = 0 the ridge of the straight filter is the vertical line x = 0.
    Each row is displaced along x by the rounded sagitta of its y offset, so
    the ridge follows a circular arc through the kernel center.
    """
    x, y = grid(size)
    shift = bend * np.rint(arc_shift(y, size))
    return eval_gabor(x - shift, y, lam, sigma, 0.0, gamma)


def rotate_kernel(kernel: np.ndarray, theta: float) -> np.ndarray:
    """Rotate about the center with bilinear interpolation, zero outside.

    Uses the same coordinate convention as `eval_gabor`, so rotating the
    theta = 0 straight filter by theta approximates the analytic theta filter.
    """
    size = kernel.shape[0]
    half = (size - 1) / 2.0
    x, y = grid(size)
    c, s = math.cos(theta), math.sin(theta)
    src_x = x * c + y * s
    src_y = -x * s + y * c
    coords = np.stack([src_y + half, src_x + half])
    return ndimage.map_coordinates(kernel, coords, order=1, mode="constant", cval=0.0)


def build_curved_template(lam: float, sigma: float, n_directions: int, size: int,
                          gamma: float = DEFAULT_GAMMA, bend: int = 1) -> np.ndarray:
    GaborParams(lam, sigma, 0.0, gamma, size)
    base = curved_base(lam, sigma, size, gamma, bend)
    slices = [base if k == 0 else rotate_kernel(base, t) for k, t in enumerate(directions(n_directions))]
    return np.stack(slices)


def build_bank(config: BankConfig) -> GaborBank:
    """All straight templates over wavelength x sigma first, then the curved ones."""
    kinds = [False, True] if config.include_curved else [False]
    kernels, info = [], []
    thetas = directions(config.n_directions)
    for curved in kinds:
        for lam in config.lambdas:
            for sigma in config.sigmas:
                if curved:
                    tpl = build_curved_template(lam, sigma, config.n_directions, config.size, config.gamma, config.bend)
                else:
                    tpl = build_template(lam, sigma, config.n_directions, config.size, config.gamma)
                for k, theta in enumerate(thetas):
                    info.append(KernelInfo(len(info), curved, lam, sigma, float(theta)))
                kernels.append(tpl)
    return GaborBank(np.concatenate(kernels).astype(np.float64), info, config)


def orientation_bank(n_orientations: int, lam: float, sigma: float, size: int,
                     gamma: float = DEFAULT_GAMMA, curved: bool = False, zero_mean: bool = True) -> np.ndarray:
    """K_c orientation-indexed filters for the coding baselines, DC removed by default."""
    if curved:
        bank = build_curved_template(lam, sigma, n_orientations, size, gamma)
    else:
        bank = build_template(lam, sigma, n_orientations, size, gamma)
    if zero_mean:
        bank = bank - bank.mean(axis=(1, 2), keepdims=True)
    return bank


def parse_floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def describe(config: BankConfig) -> dict:
    return {
        "lambdas": list(config.lambdas), "sigmas": list(config.sigmas), "n_directions": config.n_directions,
        "size": config.size, "include_curved": config.include_curved, "gamma": config.gamma, "bend": config.bend,
    }


def config_from_dict(d: dict) -> BankConfig:
    return BankConfig(
        lambdas=tuple(d["lambdas"]), sigmas=tuple(d["sigmas"]), n_directions=int(d["n_directions"]),
        size=int(d["size"]), include_curved=bool(d["include_curved"]), gamma=float(d.get("gamma", DEFAULT_GAMMA)),
        bend=int(d.get("bend", 1)),
    )
