"""Palm samples, JSON-lines manifests, identity-disjoint splits and a seeded synthetic palm generator."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .roi import BOX_SCALE, CENTER_OFFSET, Keypoints, normalize_image

log = logging.getLogger(__name__)

STAGES = ("enrollment", "probe")
SIDES = ("left", "right")


@dataclass
class PalmSample:
    identity: int
    stage: str = "enrollment"
    side: str = "left"
    path: Optional[str] = None
    image: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    keypoints: Optional[Keypoints] = None
    subject: Optional[int] = None

    def __post_init__(self):
        if int(self.identity) < 0:
            raise ValueError("identity must be non-negative")
        self.identity = int(self.identity)
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")

    @property
    def group(self) -> int:
        """Split unit: the subject when known, otherwise the palm."""
        return self.identity if self.subject is None else self.subject

    def load(self, root: Optional[Path] = None) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.path is None:
            raise ValueError("sample has neither an in-memory image nor a path")
        p = Path(self.path)
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        return load_raster(p)

    def to_row(self) -> dict:
        row = {"path": self.path, "identity": self.identity, "stage": self.stage, "side": self.side}
        if self.subject is not None:
            row["subject"] = self.subject
        if self.keypoints is not None:
            row["keypoints"] = self.keypoints.to_list()
            if self.keypoints.mirrored:
                row["mirrored"] = True
        return row

    @classmethod
    def from_row(cls, row: dict) -> "PalmSample":
        unknown = set(row) - {"path", "identity", "stage", "side", "subject", "keypoints", "mirrored"}
        if unknown:
            raise ValueError(f"unknown manifest fields {sorted(unknown)}")
        kp = row.get("keypoints")
        keypoints = Keypoints.from_list(kp, mirrored=bool(row.get("mirrored", False))) if kp is not None else None
        return cls(identity=row["identity"], stage=row.get("stage", "enrollment"), side=row.get("side", "left"),
                   path=row.get("path"), keypoints=keypoints, subject=row.get("subject"))


# ---------------------------------------------------------------- manifests
def format_row(sample: PalmSample) -> str:
    return json.dumps(sample.to_row(), separators=(", ", ": "))


def parse_row(line: str) -> PalmSample:
    return PalmSample.from_row(json.loads(line))


def write_manifest(path, samples: Iterable[PalmSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(format_row(s) + "\n")


def read_manifest(path) -> List[PalmSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(parse_row(line))
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


def load_raster(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L") if im.mode not in ("L", "RGB", "RGBA") else im)


def save_raster(path, image: np.ndarray) -> None:
    """Write an 8-bit grayscale PNG; float input is min-max scaled to [0, 255]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    Image.fromarray(img, mode="L").save(path, format="PNG")


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros(img.shape, np.uint8)
    return np.rint((img - lo) / (hi - lo) * 255).astype(np.uint8)


def stack_normalized(images: Sequence[np.ndarray]) -> np.ndarray:
    """(N, 1, H, W) float32 batch of per-image normalized rasters."""
    return np.stack([normalize_image(i) for i in images])[:, None].astype(np.float32)


# ------------------------------------------------------------------ splits
@dataclass(frozen=True)
class SplitPolicy:
    """How to divide identities (or subjects) between train and test.

    kind "fraction": ``fraction`` or ``count`` of the groups, drawn with ``seed``.
    kind "first-n": the first ``count`` palm identities in sorted order.
    kind "explicit": the given identity lists.
    """

    kind: str = "fraction"
    fraction: Optional[float] = None
    count: Optional[int] = None
    seed: int = 0
    train_ids: Tuple[int, ...] = ()
    test_ids: Tuple[int, ...] = ()


def split_dataset(samples: Sequence[PalmSample], policy: SplitPolicy) -> Tuple[List[PalmSample], List[PalmSample]]:
    if policy.kind == "explicit":
        overlap = set(policy.train_ids) & set(policy.test_ids)
        if overlap:
            raise ValueError(f"identities in both train and test: {sorted(overlap)}")
        train_ids, test_ids = set(policy.train_ids), set(policy.test_ids)
        train = [s for s in samples if s.identity in train_ids]
        test = [s for s in samples if s.identity in test_ids]
    elif policy.kind == "first-n":
        ids = sorted({s.identity for s in samples})
        if policy.count is None or not 0 < policy.count <= len(ids):
            raise ValueError(f"first-n needs 0 < count <= {len(ids)}")
        keep = set(ids[:policy.count])
        train = [s for s in samples if s.identity in keep]
        test = [s for s in samples if s.identity not in keep]
    elif policy.kind == "fraction":
        groups = sorted({s.group for s in samples})
        if policy.count is not None:
            n_train = policy.count
        elif policy.fraction is not None:
            n_train = int(round(policy.fraction * len(groups)))
        else:
            raise ValueError("fraction policy needs a fraction or a count")
        if not 0 <= n_train <= len(groups):
            raise ValueError(f"cannot take {n_train} of {len(groups)} groups")
        order = np.random.default_rng(policy.seed).permutation(len(groups))
        chosen = {groups[i] for i in order[:n_train]}
        train = [s for s in samples if s.group in chosen]
        test = [s for s in samples if s.group not in chosen]
    else:
        raise ValueError(f"unknown split policy {policy.kind!r}")
    if not test:
        raise ValueError("split leaves the test set empty")
    if {s.identity for s in train} & {s.identity for s in test}:
        raise ValueError("train and test share palm identities")
    return train, test


def relabel(samples: Sequence[PalmSample]) -> Tuple[np.ndarray, Dict[int, int]]:
    """Contiguous class indices for the identities present, in sorted identity order."""
    ids = sorted({s.identity for s in samples})
    mapping = {k: i for i, k in enumerate(ids)}
    return np.array([mapping[s.identity] for s in samples], dtype=np.int64), mapping


# --------------------------------------------------------------- generator
@dataclass(frozen=True)
class SyntheticPalmSpec:
    """Parameters of the synthetic palm corpus.

    Every identity owns three principal curves (circular arcs, or straight
    segments for the ``line_fraction`` share). Identity parameters are drawn
    so that any two identities differ by at least ``min_separation`` in
    some curve parameter, and every jitter magnitude is kept below it.
    """

    n_identities: int = 20
    images_per_identity: int = 6
    image_size: int = 64
    n_enroll: int = 3
    seed: int = 0
    jitter_translation: float = 1.0
    jitter_rotation: float = 0.03
    jitter_contrast: float = 0.1
    noise: float = 0.04
    line_depth: float = 0.5
    line_width: float = 1.6
    wrinkles: int = 6
    wrinkle_depth: float = 0.08
    line_fraction: float = 0.0
    min_separation: float = 4.0

    def __post_init__(self):
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise ValueError("need at least one identity and one image")
        if not 0 <= self.n_enroll <= self.images_per_identity:
            raise ValueError("n_enroll must lie in [0, images_per_identity]")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        jitter = max(self.jitter_translation, self.jitter_rotation * self.image_size / 2)
        if jitter >= self.min_separation:
            raise ValueError("jitter must stay below the identity separation")
        if not 0 <= self.line_fraction <= 1:
            raise ValueError("line_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class Curve:
    """A principal line: circle of ``radius`` around ``center`` over angles [start, start + span],
    or the chord between those endpoints when ``straight``."""

    center: Tuple[float, float]
    radius: float
    start: float
    span: float
    straight: bool = False

    def endpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        t0, t1 = self.start, self.start + self.span
        return (c + self.radius * np.array([math.cos(t0), math.sin(t0)]),
                c + self.radius * np.array([math.cos(t1), math.sin(t1)]))

    def signature(self, n: int = 5) -> np.ndarray:
        """Sample points used to measure how far apart two identities are."""
        if self.straight:
            a, b = self.endpoints()
            return a + np.linspace(0, 1, n)[:, None] * (b - a)
        t = self.start + np.linspace(0.0, self.span, n)
        return np.stack([self.center[0] + self.radius * np.cos(t), self.center[1] + self.radius * np.sin(t)], 1)

    def moved(self, rot: float, shift: Tuple[float, float], pivot: float) -> "Curve":
        """Rotate by ``rot`` about (pivot, pivot), then translate."""
        c, s = math.cos(rot), math.sin(rot)
        x, y = self.center[0] - pivot, self.center[1] - pivot
        center = (c * x - s * y + pivot + shift[0], s * x + c * y + pivot + shift[1])
        return replace(self, center=center, start=self.start + rot)

    def distance(self, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
        a, b = self.endpoints()
        if self.straight:
            return segment_distance(a, b, xx, yy)
        dx, dy = xx - self.center[0], yy - self.center[1]
        on_arc = np.mod(np.arctan2(dy, dx) - self.start, 2 * math.pi) <= self.span
        radial = np.abs(np.hypot(dx, dy) - self.radius)
        ends = np.minimum(np.hypot(xx - a[0], yy - a[1]), np.hypot(xx - b[0], yy - b[1]))
        return np.where(on_arc, radial, ends)


def segment_distance(a: np.ndarray, b: np.ndarray, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / max(float(ab @ ab), 1e-12), 0, 1)
    return np.hypot(xx - a[0] - t * ab[0], yy - a[1] - t * ab[1])


# principal curve templates in units of the image side: (cx, cy, radius, start, span)
_TEMPLATES = (
    (0.10, 1.30, 0.95, -1.35, 0.75),  # heart-line-like arc across the top
    (0.95, 1.10, 0.75, -2.55, 0.85),  # head line
    (1.10, 0.25, 0.85, 2.0, 0.95),    # life line
)


def _identity_curves(spec: SyntheticPalmSpec, rng: np.random.Generator) -> List[Curve]:
    n = spec.image_size
    curves = []
    for cx, cy, r, start, span in _TEMPLATES:
        straight = bool(rng.random() < spec.line_fraction)
        curves.append(Curve(
            center=((cx + rng.uniform(-0.12, 0.12)) * n, (cy + rng.uniform(-0.12, 0.12)) * n),
            radius=(r + rng.uniform(-0.1, 0.1)) * n,
            start=start + rng.uniform(-0.15, 0.15),
            span=span * rng.uniform(0.8, 1.15),
            straight=straight,
        ))
    return curves


def _separation(a: List[Curve], b: List[Curve]) -> float:
    """Largest endpoint-path displacement over the three curves (pixels)."""
    return max(float(np.abs(ca.signature() - cb.signature()).max()) for ca, cb in zip(a, b))


def identity_curves(spec: SyntheticPalmSpec) -> List[List[Curve]]:
    """Curve sets for every identity, redrawn until all pairs are separated."""
    rng = np.random.default_rng([spec.seed, 0xC0DE])
    out: List[List[Curve]] = []
    attempts = 0
    while len(out) < spec.n_identities:
        cand = _identity_curves(spec, rng)
        attempts += 1
        if attempts > 1000 * spec.n_identities:
            raise RuntimeError("could not place identities at the requested separation")
        if all(_separation(cand, o) >= spec.min_separation for o in out):
            out.append(cand)
    return out


def _wrinkle_field(spec: SyntheticPalmSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    field_ = np.zeros((n, n))
    for _ in range(spec.wrinkles):
        c = rng.uniform(0, n, size=2)
        ang = rng.uniform(0, math.pi)
        half = rng.uniform(0.05, 0.15) * n
        d = np.array([math.cos(ang), math.sin(ang)]) * half
        field_ += np.exp(-(segment_distance(c - d, c + d, xx, yy) / 0.8) ** 2)
    return field_


def render_palm(curves: Sequence[Curve], spec: SyntheticPalmSpec, rng: np.random.Generator,
                wrinkles: Optional[np.ndarray] = None, jitter: bool = True) -> np.ndarray:
    """One grayscale palm in [0, 1]: bright skin, dark principal curves, faint wrinkles, noise."""
    n = spec.image_size
    c0 = (n - 1) / 2
    if jitter:
        dx, dy = rng.uniform(-spec.jitter_translation, spec.jitter_translation, size=2)
        rot = rng.uniform(-spec.jitter_rotation, spec.jitter_rotation)
        contrast = 1 + rng.uniform(-spec.jitter_contrast, spec.jitter_contrast)
    else:
        dx = dy = rot = 0.0
        contrast = 1.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.full((n, n), 0.75)
    for curve in curves:
        dist = curve.moved(rot, (dx, dy), c0).distance(xx, yy)
        img -= contrast * spec.line_depth * np.exp(-(dist / spec.line_width) ** 2)
    if wrinkles is not None:
        img -= spec.wrinkle_depth * wrinkles
    if spec.noise > 0:
        img += ndimage.gaussian_filter(rng.normal(0, spec.noise, size=(n, n)), 0.7) * 2
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticPalmSpec) -> List[PalmSample]:
    """In-memory 8-bit samples; the first ``n_enroll`` images per identity are enrollment."""
    all_curves = identity_curves(spec)
    jitter = spec.jitter_translation > 0 or spec.jitter_rotation > 0 or spec.jitter_contrast > 0
    samples = []
    for ident, curves in enumerate(all_curves):
        wrinkles = _wrinkle_field(spec, np.random.default_rng([spec.seed, ident, 7]))
        for k in range(spec.images_per_identity):
            rng = np.random.default_rng([spec.seed, ident, k])
            img = render_palm(curves, replace(spec, noise=spec.noise if jitter else 0.0), rng, wrinkles, jitter)
            stage = "enrollment" if k < spec.n_enroll else "probe"
            samples.append(PalmSample(ident, stage, "left" if ident % 2 == 0 else "right",
                                      image=np.rint(img * 255).astype(np.uint8), subject=ident // 2))
    return samples


def embed_in_hand(roi: np.ndarray, rng: np.random.Generator, angle_range: float = 0.4,
                  canvas_scale: float = 2.6) -> Tuple[np.ndarray, Keypoints]:
    """Place an ROI raster inside a larger rotated canvas and return keypoints that recover it."""
    roi = np.asarray(roi, dtype=np.float64)
    side = roi.shape[0]
    n = int(round(canvas_scale * side))
    phi = rng.uniform(-angle_range, angle_range)
    x_axis = np.array([math.cos(phi), math.sin(phi)])
    y_axis = np.array([-x_axis[1], x_axis[0]])
    length = side / BOX_SCALE
    center = np.array([(n - 1) / 2, (n - 1) / 2 + CENTER_OFFSET * length / 2])
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    rel = np.stack([xx - center[0], yy - center[1]], -1)
    u = rel @ x_axis + side / 2 - 0.5
    v = rel @ y_axis + side / 2 - 0.5
    background = float(np.median(roi))
    canvas = ndimage.map_coordinates(roi, [v, u], order=1, mode="constant", cval=background)
    o1 = center - CENTER_OFFSET * length * y_axis
    k1, k2 = o1 - length / 2 * x_axis, o1 + length / 2 * x_axis
    gap = 0.05 * length
    kp = Keypoints(tuple(k1 - gap * x_axis), tuple(k1 + gap * x_axis), tuple(k2 - gap * x_axis),
                   tuple(k2 + gap * x_axis))
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8), kp


def write_corpus(samples: Sequence[PalmSample], out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write every in-memory sample as PNG and a manifest with relative paths."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    written = []
    counters: Dict[int, int] = {}
    for s in samples:
        k = counters.get(s.identity, 0)
        counters[s.identity] = k + 1
        rel = f"images/id{s.identity:05d}_{k:02d}.png"
        save_raster(out_dir / rel, s.load())
        written.append(replace(s, path=rel, image=None))
    manifest = out_dir / manifest_name
    write_manifest(manifest, written)
    return manifest
