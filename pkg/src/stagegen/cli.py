"""``stagegen`` command line: one subcommand per workflow step.

Exit status is 0 on success, 2 on usage or configuration errors, 1 when the
work itself fails. Reports go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import imageops
from .checkpoint import CheckpointError, load_checkpoint
from .dataset import DatasetError, build_dataset, load_split, read_manifest, synth_faces
from .metrics import Embedder, contraction_probe, fid_score, fit_embedder
from .training import LossLog, TrainConfig, generate, generator_from_checkpoint, train_stage1, train_stage2

logger = logging.getLogger("stagegen")


class UsageError(Exception):
    """Bad flags or configuration; maps to exit status 2."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

RUN_KEYS = ("manifest", "out_dir", "stage1_ckpt")
TRAIN_FLAGS = {
    "epochs": int, "steps": int, "batch_size": int, "lr": float, "beta1": float, "beta2": float,
    "lambda_l1": float, "seed": int, "checkpoint_every": int, "log_every": int,
}


def resolve_run_config(file_values: dict, overrides: dict) -> dict:
    """Merge a JSON run config with flag overrides and validate every key.

    The document holds TrainConfig fields (``model`` nested) plus ``manifest``,
    ``out_dir`` and ``stage1_ckpt``. Unknown keys are errors at every level.
    """
    if not isinstance(file_values, dict):
        raise UsageError("config file must hold a JSON object")
    merged = dict(file_values)
    model = dict(merged.get("model") or {})
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "image_side":
            model["image_side"] = value
        else:
            merged[key] = value
    merged["model"] = model
    run = {k: merged.pop(k, None) for k in RUN_KEYS}
    try:
        train = TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid run config: {exc}") from exc
    if not run["manifest"]:
        raise UsageError("a manifest is required (--manifest or \"manifest\" in the config)")
    if not run["out_dir"]:
        raise UsageError("an output directory is required (--out or \"out_dir\" in the config)")
    return {**run, **train.to_dict()}


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc


def _emit(report: dict, out: Optional[Path]) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    m = synth_faces(args.n, args.side, args.seed, args.out, split_ratio=args.split)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), "records": len(m.records),
                      "train": len(m.split("train")), "eval": len(m.split("eval"))}, sort_keys=True))
    return 0


def cmd_preprocess(args) -> int:
    m = build_dataset(args.src, args.out, args.side, args.split, args.subset, args.seed)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), "records": len(m.records),
                      "skipped": m.skipped, "source_fingerprint": m.source_fingerprint}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    file_values = _load_json(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS}
    overrides.update(stage=args.stage, manifest=args.manifest, out_dir=args.out, image_side=args.image_side)
    source = args.edge_source or file_values.get("edge_source")
    if source == "ckpt":
        source = args.stage1 or file_values.get("stage1_ckpt")
        if not source:
            raise UsageError("--edge-source ckpt needs a stage-1 checkpoint (--stage1 PATH)")
    overrides["edge_source"] = source
    if args.stage1:
        overrides["stage1_ckpt"] = args.stage1
    resolved = resolve_run_config(file_values, overrides)
    config = TrainConfig.from_dict({k: v for k, v in resolved.items() if k not in RUN_KEYS})

    # validate everything cheap before touching data or parameters
    stage1_ckpt = None
    if config.stage == 2 and config.edge_source != "real":
        try:
            stage1_ckpt = load_checkpoint(config.edge_source)
            _, spec1, stage = generator_from_checkpoint(stage1_ckpt)
        except CheckpointError as exc:
            raise UsageError(f"edge source {config.edge_source}: {exc}") from exc
        if stage != 1:
            raise UsageError(f"edge source {config.edge_source} is not a stage-1 checkpoint")
    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except CheckpointError as exc:
            raise UsageError(f"--resume: {exc}") from exc
    manifest = read_manifest(resolved["manifest"])

    out_dir = Path(resolved["out_dir"])
    echo = {k: resolved[k] for k in RUN_KEYS}
    if config.stage == 1:
        ckpt, log = train_stage1(config, manifest, out_dir, resume=resume, echo=echo)
    else:
        ckpt, log = train_stage2(config, manifest, stage1_ckpt, out_dir, resume=resume, echo=echo)
    last = log.rows[-1] if log.rows else {}
    print(json.dumps({"out_dir": str(out_dir), "final_checkpoint": str(out_dir / "checkpoints" / "final.sgck"),
                      "steps": ckpt.meta["step"], "last_losses": last}, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    files = generate(args.stage1, args.stage2, args.n, args.seed, args.out)
    print(json.dumps({"out_dir": str(args.out), "files": [p.name for p in files]}, sort_keys=True))
    return 0


def _load_png_dir(directory: Path, pattern: str, side: int) -> np.ndarray:
    paths = sorted(directory.glob(pattern)) or sorted(directory.glob("*.png"))
    if not paths:
        raise DatasetError(f"no PNG images found in {directory}")
    out = np.empty((len(paths), 1, side, side), np.float32)
    for i, p in enumerate(paths):
        img = imageops.decode_image(str(p))
        if img.channels != 1:
            img = imageops.to_grayscale(img)
        if (img.width, img.height) != (side, side):
            raise DatasetError(f"{p.name} is {img.width}x{img.height}, expected {side}x{side}")
        out[i, 0] = imageops.array_to_model_range(img.plane)
    return out


def cmd_evaluate(args) -> int:
    manifest = read_manifest(args.real)
    real_data = load_split(manifest, args.split)
    real = real_data.edges if args.modality == "edge" else real_data.grays
    emb_path = Path(args.embedder)
    if args.fit_embedder:
        embedder = fit_embedder(manifest, dim=args.dim, seed=args.seed, modality=args.modality,
                                steps=args.embedder_steps)
        embedder.save(emb_path)
    else:
        try:
            embedder = Embedder.from_checkpoint(str(emb_path))
        except CheckpointError as exc:
            raise UsageError(f"--embedder: {exc} (use --fit-embedder to create one)") from exc
    fake = _load_png_dir(Path(args.fake), f"{args.modality}_*.png", manifest.image_side)
    report = fid_score(embedder, real, fake, args.eps_reg).to_dict()
    report["modality"] = args.modality
    out = Path(args.out) if args.out else Path(args.fake) / f"fid_{args.modality}.json"
    _emit(report, out)
    return 0


def cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.stage2)
    edges = load_split(read_manifest(args.manifest), args.split).edges
    reports = [contraction_probe(ckpt, edges, s, args.pairs, args.seed) for s in args.sigma]
    _emit({"stage2": str(args.stage2), "reports": reports}, Path(args.out) if args.out else None)
    return 0


def render_loss_svg(log: LossLog, width: int = 640, height: int = 360) -> str:
    """Line chart of d_loss and the generator's adversarial loss against step."""
    if not log.rows:
        raise ValueError("loss CSV has no rows")
    steps = log.column("step")
    series = [("d_loss", log.column("d_loss"), "#1f77b4"), ("g_loss", log.column("g_loss_adv"), "#d62728")]
    margin = 48
    lo = min(float(v.min()) for _, v, _ in series)
    hi = max(float(v.max()) for _, v, _ in series)
    if hi == lo:
        hi = lo + 1.0
    s0, s1 = float(steps.min()), float(steps.max())
    span = (s1 - s0) or 1.0

    def xy(step, value):
        x = margin + (step - s0) / span * (width - 2 * margin)
        y = height - margin - (value - lo) / (hi - lo) * (height - 2 * margin)
        return f"{x:.2f},{y:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">step</text>',
        f'<text x="{margin - 4}" y="{margin}" text-anchor="end" font-size="10">{hi:.3g}</text>',
        f'<text x="{margin - 4}" y="{height - margin}" text-anchor="end" font-size="10">{lo:.3g}</text>',
    ]
    for i, (name, values, colour) in enumerate(series):
        points = " ".join(xy(s, v) for s, v in zip(steps, values))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{points}"/>')
        parts.append(f'<text x="{width - margin}" y="{margin + 14 * i}" text-anchor="end" font-size="12" '
                     f'fill="{colour}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot_losses(args) -> int:
    try:
        log = LossLog.from_csv(args.csv)
    except OSError as exc:
        raise UsageError(f"cannot read {args.csv}: {exc}") from exc
    svg = render_loss_svg(log)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(svg, encoding="utf-8")
    print(json.dumps({"out": str(args.out), "rows": len(log.rows)}))
    return 0


def cmd_subset(args) -> int:
    from .pipeline import subset_experiment

    manifest = read_manifest(args.manifest)
    base = {}
    if args.config:
        base = _load_json(args.config)
        for key in RUN_KEYS:
            base.pop(key, None)
    try:
        config = TrainConfig.from_dict({**base, "stage": 1})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid run config: {exc}") from exc
    embedder = Embedder.from_checkpoint(args.embedder) if args.embedder else None
    report = subset_experiment(manifest, args.fractions, args.steps, args.seeds, config=config,
                               embedder=embedder, n_fake=args.n_fake, out_dir=args.out)
    report["rows"] = [{k: r[k] for k in ("fraction", "n_train", "fid", "seed", "steps")} for r in report["rows"]]
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _unit_fraction(text: str) -> float:
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagegen", description="Two-stage edge and grayscale face GAN toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", help="draw a synthetic face corpus and preprocess it")
    p.add_argument("--n", type=int, required=True, help="number of faces")
    p.add_argument("--side", type=int, default=64, help="output image side in pixels")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--split", type=_unit_fraction, default=0.95, help="train fraction")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("preprocess", help="convert a folder of RGB images into paired gray/edge images")
    p.add_argument("--src", required=True, help="folder of PNG/JPEG images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--side", type=int, default=64, help="output image side in pixels")
    p.add_argument("--subset", type=_unit_fraction, default=1.0, help="fraction of source images to keep")
    p.add_argument("--split", type=_unit_fraction, default=0.95, help="train fraction")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train stage 1 (noise to edges) or stage 2 (edges to grayscale)")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--manifest", help="dataset manifest (directory or manifest.jsonl)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--edge-source", help="stage 2 conditioning: 'real', 'ckpt' (with --stage1) or a checkpoint path")
    p.add_argument("--stage1", help="stage-1 checkpoint used when --edge-source ckpt")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--image-side", type=int, help="model image side")
    for name, kind in TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), type=kind, help=f"override {name}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample edges and grayscale images through both stages")
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    p.add_argument("--stage2", required=True, help="stage-2 checkpoint")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="Frechet distance between a manifest and a folder of generated PNGs")
    p.add_argument("--real", required=True, help="real dataset manifest")
    p.add_argument("--fake", required=True, help="folder of generated PNGs")
    p.add_argument("--embedder", required=True, help="embedder checkpoint (written with --fit-embedder)")
    p.add_argument("--fit-embedder", action="store_true", help="fit a new embedder on --real first")
    p.add_argument("--modality", choices=("edge", "gray"), default="edge", help="which images to compare")
    p.add_argument("--split", choices=("train", "eval"), default=None, help="real split (default: all)")
    p.add_argument("--dim", type=int, default=64, help="embedding dimension when fitting")
    p.add_argument("--embedder-steps", type=int, default=600, help="embedder training steps when fitting")
    p.add_argument("--seed", type=int, default=0, help="embedder seed when fitting")
    p.add_argument("--eps-reg", type=float, default=1e-6, help="covariance diagonal regularizer")
    p.add_argument("--out", help="report path (default: FAKE/fid_MODALITY.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("probe", help="measure how stage 2 responds to small edge perturbations")
    p.add_argument("--stage2", required=True, help="stage-2 checkpoint")
    p.add_argument("--manifest", required=True, help="dataset manifest supplying edges")
    p.add_argument("--sigma", type=float, nargs="+", default=[0.01, 0.1], help="perturbation scales")
    p.add_argument("--pairs", type=int, default=64, help="pairs per scale")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--split", choices=("train", "eval"), default="eval", help="edge split")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("plot-losses", help="SVG line chart of discriminator and generator loss")
    p.add_argument("--csv", required=True, help="losses_stage{1,2}.csv")
    p.add_argument("--out", required=True, help="SVG path")
    p.set_defaults(func=cmd_plot_losses)

    p = sub.add_parser("subset-experiment", help="compare stage-1 FID across training-set fractions")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--fractions", type=_unit_fraction, nargs="+", default=[0.25, 1.0])
    p.add_argument("--steps", type=int, required=True, help="step budget per run")
    p.add_argument("--seeds", type=int, nargs="+", default=[0], help="one run per seed and fraction")
    p.add_argument("--config", help="JSON run config for the stage-1 runs")
    p.add_argument("--embedder", help="edge embedder checkpoint (fitted on the manifest if absent)")
    p.add_argument("--n-fake", type=int, default=512, help="generated samples per FID")
    p.add_argument("--out", required=True, help="output directory for subset_report.json")
    p.set_defaults(func=cmd_subset)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stagegen {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure of the work itself is exit 1
        logger.debug("failure", exc_info=True)
        print(f"stagegen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
