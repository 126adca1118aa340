"""Desk-scale experiment drivers shared by the CLI and the acceptance checks."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import CodeConfig, make_matcher
from .data import PalmSample, SyntheticPalmSpec, generate_synthetic, relabel, stack_normalized
from .evaluation import (DescriptorMatcher, EvalReport, SweepRow, bias_sweep, compute_eer, evaluate_matcher, match,
                         run_protocol)
from .model import ArcMarginConfig, TrainConfig, TrainResult, tiny_config, train

log = logging.getLogger(__name__)

DESK_TRAIN_IDS = 20
DESK_VERIFY_IDS = 10
DESK_EPOCHS = 50
DESK_BATCH = 16

# (loss, s, m); softmax rows carry no s or m
ARC_GRID: Tuple[Tuple[str, Optional[float], Optional[float]], ...] = (
    ("softmax", None, None), ("arc-margin", 64, 0.5), ("arc-margin", 32, 0.5), ("arc-margin", 16, 0.5),
    ("arc-margin", 64, 0.3), ("arc-margin", 64, 0.7),
)
MU_GRID = (0.1, 0.3, 0.5, 1.0, 2.0)


@dataclass
class Gallery:
    images: List[np.ndarray]
    ids: List[int]
    probes: List[np.ndarray]
    probe_ids: List[int]

    @classmethod
    def from_samples(cls, samples: Sequence[PalmSample], root=None) -> "Gallery":
        enr = [s for s in samples if s.stage == "enrollment"]
        prb = [s for s in samples if s.stage == "probe"]
        return cls([s.load(root) for s in enr], [s.identity for s in enr],
                   [s.load(root) for s in prb], [s.identity for s in prb])


@dataclass
class DeskSplit:
    """Closed-set part (train identities) and identity-disjoint verification part of one corpus."""

    train_images: np.ndarray
    train_labels: np.ndarray
    closed: Gallery
    verify: Gallery


def desk_spec(seed: int = 0, **overrides) -> SyntheticPalmSpec:
    base = dict(n_identities=DESK_TRAIN_IDS + DESK_VERIFY_IDS, images_per_identity=6, image_size=64, seed=seed)
    base.update(overrides)
    return SyntheticPalmSpec(**base)


def desk_split(samples: Sequence[PalmSample], n_train_ids: int = DESK_TRAIN_IDS) -> DeskSplit:
    """Train on the enrollment images of the first ``n_train_ids`` palms; the rest are unseen."""
    ids = sorted({s.identity for s in samples})
    train_ids = set(ids[:n_train_ids])
    seen = [s for s in samples if s.identity in train_ids]
    unseen = [s for s in samples if s.identity not in train_ids]
    enrolled = [s for s in seen if s.stage == "enrollment"]
    labels, _ = relabel(enrolled)
    return DeskSplit(stack_normalized([s.load() for s in enrolled]), labels,
                     Gallery.from_samples(seen), Gallery.from_samples(unseen))


@dataclass
class DeskResult:
    rank1: float
    eer: float
    closed: EvalReport
    verify: EvalReport
    training: TrainResult


def run_desk(seed: int = 0, epochs: int = DESK_EPOCHS, batch_size: int = DESK_BATCH, lr_max: float = 1e-2,
             samples: Optional[Sequence[PalmSample]] = None, progress=None, **config_overrides) -> DeskResult:
    """Train the tiny network and score it: Rank-1 on seen palms, EER on unseen palms."""
    samples = samples if samples is not None else generate_synthetic(desk_spec(seed))
    split = desk_split(samples)
    n_classes = int(split.train_labels.max()) + 1
    cfg = tiny_config(n_classes=n_classes, **config_overrides)
    tr = train(split.train_images, split.train_labels, cfg,
               TrainConfig(epochs=epochs, batch_size=batch_size, lr_max=lr_max, seed=seed), progress=progress)
    matcher = DescriptorMatcher(tr.model)
    c, v = split.closed, split.verify
    closed = evaluate_matcher(matcher, c.images, c.ids, c.probes, c.probe_ids)
    verify = evaluate_matcher(matcher, v.images, v.ids, v.probes, v.probe_ids)
    return DeskResult(closed.rank1, verify.eer, closed, verify, tr)


# ------------------------------------------------------------------ ablation
def ablation_spec(seed: int = 0) -> SyntheticPalmSpec:
    """Arc-and-line corpus: each principal curve is straight with probability one half."""
    return SyntheticPalmSpec(n_identities=20, images_per_identity=6, image_size=64, line_fraction=0.5, seed=seed)


@dataclass
class AblationResult:
    bank_eer: Dict[str, float]
    sweep: List[SweepRow]

    def eer_increase(self, matcher: str, r_from: int, r_to: int) -> float:
        e = {r.r: r.eer for r in self.sweep if r.matcher == matcher}
        return e[r_to] - e[r_from]


def run_ablation(seed: int = 0, r_values: Sequence[int] = (2, 6, 10), config: CodeConfig = CodeConfig(),
                 samples: Optional[Sequence[PalmSample]] = None) -> AblationResult:
    samples = samples if samples is not None else generate_synthetic(ablation_spec(seed))
    g = Gallery.from_samples(samples)
    bank_eer = {}
    for bank in ("straight", "curved", "combined"):
        m = make_matcher("compcode", bank, config)
        bank_eer[bank] = compute_eer(run_protocol(match(m, g.probes, g.images), g.probe_ids, g.ids).scores)[0]
    matchers = [make_matcher("compcode", "straight", config), make_matcher("region-hist", "straight", config)]
    rows = bias_sweep(matchers, g.images, g.ids, g.probes, g.probe_ids, r_values, seed=seed)
    return AblationResult(bank_eer, rows)


# ---------------------------------------------------------------- hparams
ARC_HEADER = ("loss_function", "s", "m", "rank1_pct", "eer_pct")
MU_HEADER = ("mu", "rank1_pct", "eer_pct")


def arc_sweep(grid=ARC_GRID, seed: int = 0, epochs: int = DESK_EPOCHS, progress=None, **kw) -> List[tuple]:
    samples = generate_synthetic(desk_spec(seed))
    rows = []
    for loss, s, m in grid:
        if loss == "softmax":
            res = run_desk(seed, epochs, samples=samples, classifier="softmax", **kw)
        else:
            res = run_desk(seed, epochs, samples=samples, arc=ArcMarginConfig(s=float(s), m=float(m)), **kw)
        row = (loss, "-" if s is None else f"{s:g}", "-" if m is None else f"{m:g}",
               round(100 * res.rank1, 2), round(100 * res.eer, 2))
        rows.append(row)
        if progress:
            progress(row)
    return rows


def mu_sweep(mus: Sequence[float] = MU_GRID, seed: int = 0, epochs: int = DESK_EPOCHS, progress=None,
             **kw) -> List[tuple]:
    samples = generate_synthetic(desk_spec(seed))
    rows = []
    for mu in mus:
        res = run_desk(seed, epochs, samples=samples, mu=float(mu), **kw)
        row = (float(mu), round(100 * res.rank1, 2), round(100 * res.eer, 2))
        rows.append(row)
        if progress:
            progress(row)
    return rows


# --------------------------------------------------------------------- csv
def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="") as fh:
        r = list(csv.reader(fh))
    return r[0], r[1:]


def write_report(report: EvalReport, out_dir, label: str = "model") -> Dict[str, Path]:
    """roc.csv, summary.csv and density.csv plus the matching figures."""
    from .plotting import plot_density, plot_roc
    out = Path(out_dir)
    paths = {
        "roc": write_csv(out / "roc.csv", ("FAR", "GAR"), report.roc.tolist()),
        "summary": write_csv(out / "summary.csv", list(report.summary_row()), [list(report.summary_row().values())]),
        "density": write_csv(out / "density.csv", ("distance", "genuine", "impostor"),
                             np.stack([report.density_grid, report.density_genuine, report.density_impostor],
                                      1).tolist()),
    }
    paths["roc_png"] = plot_roc({label: report.roc}, out / "roc.png")
    paths["density_png"] = plot_density(report.density_grid, report.density_genuine, report.density_impostor,
                                        out / "density.png", label)
    return paths

