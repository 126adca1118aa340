"""Command-line entry point: ``palmcpn <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__

log = logging.getLogger("palmcpn")

TRAIN_KEYS = {
    "preset": str, "lambdas": str, "sigmas": str, "directions": int, "kernel_size": int, "curved": "bool",
    "input_size": int, "descriptor_dim": int, "classifier": str, "s": float, "m": float, "mu": float,
    "lr_max": float, "lr_min": float, "momentum": float, "weight_decay": float, "epochs": int, "batch": int,
    "seed": int, "manifest": str,
}


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def parse_config_file(path) -> Dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, object] = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in TRAIN_KEYS:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        kind = TRAIN_KEYS[key]
        if kind == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{path}:{n}: {key} must be a boolean")
            out[key] = value.lower() in ("true", "1", "yes")
        else:
            try:
                out[key] = kind(value)
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: bad value for {key}: {value!r}") from exc
    return out


def build_configs(opts: Dict[str, object], n_classes: int):
    from .gabor import BankConfig
    from .model import ArcMarginConfig, TrainConfig, full_config, tiny_config

    preset = opts.get("preset", "tiny")
    if preset not in ("tiny", "full"):
        raise ValueError("preset must be tiny or full")
    cfg = (tiny_config if preset == "tiny" else full_config)(n_classes=n_classes)
    b = cfg.bank
    bank = BankConfig(lambdas=tuple(_floats(opts["lambdas"])) if "lambdas" in opts else b.lambdas,
                      sigmas=tuple(_floats(opts["sigmas"])) if "sigmas" in opts else b.sigmas,
                      n_directions=int(opts.get("directions", b.n_directions)),
                      size=int(opts.get("kernel_size", b.size)),
                      include_curved=bool(opts.get("curved", b.include_curved)))
    cfg = replace(cfg, bank=bank, input_size=int(opts.get("input_size", cfg.input_size)),
                  descriptor_dim=int(opts.get("descriptor_dim", cfg.descriptor_dim)),
                  classifier=str(opts.get("classifier", cfg.classifier)), mu=float(opts.get("mu", cfg.mu)),
                  arc=ArcMarginConfig(float(opts.get("s", cfg.arc.s)), float(opts.get("m", cfg.arc.m))))
    tc = TrainConfig()
    tc = replace(tc, epochs=int(opts.get("epochs", tc.epochs)), batch_size=int(opts.get("batch", tc.batch_size)),
                 lr_max=float(opts.get("lr_max", tc.lr_max)), lr_min=float(opts.get("lr_min", tc.lr_min)),
                 momentum=float(opts.get("momentum", tc.momentum)),
                 weight_decay=float(opts.get("weight_decay", tc.weight_decay)), seed=int(opts.get("seed", tc.seed)))
    return cfg, tc


def _load_samples(manifest):
    from .data import read_manifest
    return read_manifest(manifest), Path(manifest).resolve().parent


def _sample_key(sample, index: int) -> str:
    return sample.path if sample.path else f"row{index}"


# ------------------------------------------------------------- subcommands
def cmd_gen_bank(args) -> int:
    from .gabor import BankConfig, build_bank
    from .plotting import plot_bank

    cfg = BankConfig(lambdas=tuple(_floats(args.lambdas)), sigmas=tuple(_floats(args.sigmas)),
                     n_directions=args.directions, size=args.size, include_curved=not args.no_curved)
    bank = build_bank(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bank.tsv").write_text(bank.listing())
    np.save(out / "bank.npy", bank.kernels)
    plot_bank(bank.kernels, out / "bank.png", columns=cfg.n_directions)
    print(f"{len(bank)} kernels ({cfg.n_groups} templates x {cfg.n_directions} directions) -> {out}")
    return 0


def cmd_gen_data(args) -> int:
    from .data import SyntheticPalmSpec, embed_in_hand, generate_synthetic, write_corpus

    spec = SyntheticPalmSpec(n_identities=args.identities, images_per_identity=args.images, image_size=args.size,
                             n_enroll=args.enroll, seed=args.seed, line_fraction=args.line_fraction)
    samples = generate_synthetic(spec)
    if args.hands:
        rng = np.random.default_rng([args.seed, 0x4A4D])
        placed = []
        for s in samples:
            canvas, kp = embed_in_hand(s.image, rng)
            placed.append(replace(s, image=canvas, keypoints=kp))
        samples = placed
    manifest = write_corpus(samples, args.out)
    print(f"{len(samples)} images of {spec.n_identities} palms -> {manifest}")
    return 0


def cmd_extract_roi(args) -> int:
    from .data import save_raster, write_manifest
    from .roi import extract_roi, locate_roi, to_gray

    samples, root = _load_samples(args.manifest)
    out = Path(args.out)
    (out / "rois").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        if s.keypoints is None:
            raise SystemExit(f"row {i + 1} has no keypoints")
        img = to_gray(s.load(root))
        s.keypoints.check_inside(img.shape)
        roi = extract_roi(img, locate_roi(s.keypoints), args.size, normalize=False)
        rel = f"rois/roi{i:06d}.png"
        save_raster(out / rel, np.clip(np.rint(roi), 0, 255).astype(np.uint8))
        rows.append(replace(s, path=rel, image=None, keypoints=None))
    write_manifest(out / "manifest.jsonl", rows)
    print(f"{len(rows)} ROIs -> {out / 'manifest.jsonl'}")
    return 0


def cmd_bias(args) -> int:
    from .data import save_raster, to_uint8, write_manifest
    from .roi import BiasSpec, bias_transform

    samples, root = _load_samples(args.manifest)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    shifts = []
    for i, s in enumerate(samples):
        img = s.load(root).astype(np.float64)
        if s.stage == "probe" or args.all:
            img, t = bias_transform(img, BiasSpec(args.r, args.seed * 100003 + i))
            shifts += list(t)
        rel = f"images/img{i:06d}.png"
        save_raster(out / rel, np.clip(np.rint(img), 0, 255).astype(np.uint8) if img.max() <= 255 else to_uint8(img))
        rows.append(replace(s, path=rel, image=None))
    write_manifest(out / "manifest.jsonl", rows)
    mean = float(np.mean(shifts)) if shifts else 0.0
    print(f"biased {len(shifts) // 2} images, mean translation {mean:.2f} px -> {out / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    from .data import relabel, stack_normalized
    from .experiments import write_csv
    from .model import save_model, train
    from .plotting import plot_loss

    opts = parse_config_file(args.config)
    manifest = args.manifest or opts.get("manifest")
    if not manifest:
        raise SystemExit("no training manifest given (config key 'manifest' or --manifest)")
    mpath = Path(manifest)
    if not mpath.is_absolute() and args.manifest is None:
        mpath = Path(args.config).resolve().parent / mpath
    samples, root = _load_samples(mpath)
    labels, mapping = relabel(samples)
    cfg, tc = build_configs(opts, n_classes=len(mapping))
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    images = stack_normalized([s.load(root) for s in samples])
    if images.shape[-1] != cfg.input_size:
        raise SystemExit(f"images are {images.shape[-1]}px but the model expects {cfg.input_size}px")
    res = train(images, labels, cfg, tc, progress=lambda e, p: print(f"epoch {e + 1}/{tc.epochs} loss {p['total']:.4f}"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.ckpt", res.model, {"identities": sorted(mapping)})
    write_csv(out / "loss.csv", ("epoch", "lr", "total", "descriptor", "block"),
              [(i + 1, lr, p["total"], p["descriptor"], p["block"])
               for i, (lr, p) in enumerate(zip(res.epoch_lr, res.epoch_parts))])
    plot_loss(res.epoch_loss, out / "loss.png", res.epoch_lr)
    print(f"checkpoint -> {out / 'model.ckpt'}")
    return 0


def cmd_embed(args) -> int:
    from .descriptors import write_descriptors
    from .evaluation import DescriptorMatcher
    from .model import load_model

    model = load_model(args.checkpoint)
    samples, root = _load_samples(args.manifest)
    desc = DescriptorMatcher(model, args.batch).encode_many([s.load(root) for s in samples])
    write_descriptors(args.out, desc)
    print(f"{desc.shape[0]} descriptors of dimension {desc.shape[1]} -> {args.out}")
    return 0


def _make_matcher(name: str, args):
    from .baselines import CodeConfig, make_matcher
    from .evaluation import DescriptorMatcher
    from .model import load_model

    if name == "3dcpn":
        if not getattr(args, "checkpoint", None):
            raise SystemExit("matcher 3dcpn needs --checkpoint")
        return DescriptorMatcher(load_model(args.checkpoint))
    cfg = CodeConfig(n_orientations=args.orientations, lam=args.lam, sigma=args.sigma, size=args.kernel_size)
    return make_matcher(name, args.bank, cfg, grid=(args.grid, args.grid))


def _split_gallery(samples, root):
    enr = [(i, s) for i, s in enumerate(samples) if s.stage == "enrollment"]
    prb = [(i, s) for i, s in enumerate(samples) if s.stage == "probe"]
    if not enr or not prb:
        raise SystemExit("manifest needs both enrollment and probe rows")
    return enr, prb


def cmd_baseline_match(args) -> int:
    from .evaluation import match
    from .experiments import write_csv

    samples, root = _load_samples(args.manifest)
    enr, prb = _split_gallery(samples, root)
    m = _make_matcher(args.matcher, args)
    d = match(m, [s.load(root) for _, s in prb], [s.load(root) for _, s in enr])
    rows = [(_sample_key(ps, pi), _sample_key(gs, gi), float(d[a, b]))
            for a, (pi, ps) in enumerate(prb) for b, (gi, gs) in enumerate(enr)]
    write_csv(args.out, ("probe_id", "gallery_id", "distance"), rows)
    print(f"{len(rows)} scores -> {args.out}")
    return 0


def _distances_from_csv(path, samples, enr, prb) -> np.ndarray:
    from .experiments import read_csv

    header, rows = read_csv(path)
    if header[:3] != ["probe_id", "gallery_id", "distance"]:
        raise SystemExit(f"{path}: expected columns probe_id, gallery_id, distance")
    pidx = {_sample_key(s, i): a for a, (i, s) in enumerate(prb)}
    gidx = {_sample_key(s, i): b for b, (i, s) in enumerate(enr)}
    d = np.full((len(prb), len(enr)), np.nan)
    for p, g, v in (r[:3] for r in rows):
        if p in pidx and g in gidx:
            d[pidx[p], gidx[g]] = float(v)
    if np.isnan(d).any():
        raise SystemExit(f"{path} does not cover every probe/enrollment pair of the manifest")
    return d


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_scores, match, rank1, run_protocol
    from .experiments import write_report

    samples, root = _load_samples(args.manifest)
    enr, prb = _split_gallery(samples, root)
    if args.scores:
        d = _distances_from_csv(args.scores, samples, enr, prb)
        label = Path(args.scores).stem
    else:
        m = _make_matcher(args.matcher, args)
        d = match(m, [s.load(root) for _, s in prb], [s.load(root) for _, s in enr])
        label = m.name
    pids = np.array([s.identity for _, s in prb])
    gids = np.array([s.identity for _, s in enr])
    res = run_protocol(d, pids, gids)
    keep = np.isin(pids, res.palms)
    report = evaluate_scores(res.scores, rank1(d[keep], pids[keep], gids), bandwidth=args.bandwidth)
    write_report(report, args.out, label)
    print(f"Rank-1 {100 * report.rank1:.2f}%  EER {100 * report.eer:.2f}%  "
          f"({report.n_genuine} genuine / {report.n_impostor} impostor) -> {args.out}")
    for g in report.gar:
        flag = "" if g.reachable else " (lower bound: too few impostors)"
        print(f"  GAR@FAR={g.far_target:g}: {100 * g.gar:.2f}%{flag}")
    return 0


def cmd_bias_sweep(args) -> int:
    from .evaluation import bias_sweep
    from .experiments import write_csv
    from .plotting import plot_bias_sweep

    samples, root = _load_samples(args.manifest)
    enr, prb = _split_gallery(samples, root)
    matchers = [_make_matcher(n.strip(), args) for n in args.matchers.split(",") if n.strip()]
    rows = bias_sweep(matchers, [s.load(root) for _, s in enr], [s.identity for _, s in enr],
                      [s.load(root) for _, s in prb], [s.identity for _, s in prb], _ints(args.r), args.seed)
    out = Path(args.out)
    write_csv(out / "sweep.csv", ("matcher", "r", "mean_translation", "eer"),
              [(r.matcher, r.r, r.mean_translation, r.eer) for r in rows])
    plot_bias_sweep(rows, out / "sweep.png")
    for r in rows:
        print(f"{r.matcher:24s} r={r.r:<3d} t={r.mean_translation:5.2f}  EER {100 * r.eer:.2f}%")
    return 0


def cmd_hparam_sweep(args) -> int:
    from .experiments import ARC_GRID, ARC_HEADER, MU_GRID, MU_HEADER, arc_sweep, mu_sweep, write_csv
    from .plotting import plot_mu_sweep, plot_table

    out = Path(args.out)
    show = lambda row: print("  ".join(str(v) for v in row))  # noqa: E731
    if args.kind in ("arc", "both"):
        rows = arc_sweep(ARC_GRID, seed=args.seed, epochs=args.epochs, progress=show)
        write_csv(out / "arc_sweep.csv", ARC_HEADER, rows)
        plot_table(ARC_HEADER, rows, out / "arc_sweep.png")
    if args.kind in ("mu", "both"):
        mus = _floats(args.mus) if args.mus else MU_GRID
        rows = mu_sweep(mus, seed=args.seed, epochs=args.epochs, progress=show)
        write_csv(out / "mu_sweep.csv", MU_HEADER, rows)
        plot_mu_sweep([r[0] for r in rows], [r[1] / 100 for r in rows], [r[2] / 100 for r in rows],
                      out / "mu_sweep.png")
    print(f"tables and figures -> {out}")
    return 0


# ------------------------------------------------------------------ parser
def _matcher_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bank", choices=("straight", "curved", "combined"), default="straight")
    p.add_argument("--orientations", type=int, default=6)
    p.add_argument("--lam", type=float, default=10.0)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--kernel-size", type=int, default=17)
    p.add_argument("--grid", type=int, default=3, help="region-histogram grid side")
    p.add_argument("--checkpoint", help="model checkpoint for the 3dcpn matcher")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="palmcpn", description="Touchless palmprint recognition toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bank", help="build the Gabor bank; writes bank.tsv, bank.npy and bank.png")
    p.add_argument("--lambdas", default="5,10,15")
    p.add_argument("--sigmas", default="1,3,5")
    p.add_argument("--directions", type=int, default=12)
    p.add_argument("--size", type=int, default=35)
    p.add_argument("--no-curved", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_bank)

    p = sub.add_parser("gen-data", help="write a synthetic palm corpus and its manifest")
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--images", type=int, default=6)
    p.add_argument("--enroll", type=int, default=3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--line-fraction", type=float, default=0.0, help="share of straight principal lines")
    p.add_argument("--hands", action="store_true", help="embed each palm in a rotated canvas with keypoints")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract-roi", help="crop keypoint-defined ROIs from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_roi)

    p = sub.add_parser("bias", help="translate-and-resize probe ROIs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--all", action="store_true", help="also perturb enrollment images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("train", help="train the network from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", help="overrides the config's manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write descriptors for every manifest row")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("baseline-match", help="score every probe against every enrollment with a coding matcher")
    p.add_argument("--matcher", choices=("compcode", "region-hist"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _matcher_flags(p)
    p.set_defaults(func=cmd_baseline_match)

    p = sub.add_parser("evaluate", help="verification report: summary, ROC and density CSVs with figures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--matcher", choices=("3dcpn", "compcode", "region-hist"), default="3dcpn")
    p.add_argument("--scores", help="score CSV from baseline-match instead of computing distances")
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--out", required=True)
    _matcher_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bias-sweep", help="EER against ROI bias for several matchers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--matchers", default="compcode,region-hist")
    p.add_argument("--r", default="2,6,10")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _matcher_flags(p)
    p.set_defaults(func=cmd_bias_sweep)

    p = sub.add_parser("hparam-sweep", help="arc-margin s/m table and loss-weight sweep on the synthetic corpus")
    p.add_argument("--kind", choices=("arc", "mu", "both"), default="both")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mus", help="comma-separated loss weights")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hparam_sweep)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
