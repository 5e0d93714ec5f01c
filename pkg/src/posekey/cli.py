"""``posekey`` command line: synth-data, train, sample, eval and report.

Every subcommand writes its outputs (and a ``resolved_config.json``) under
``--out-dir``. Failures print one line ``error: <category>: <message>`` on
stderr; usage problems exit with 2, everything else with 1.
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from posekey.config import MODEL_KINDS, resolve_config, resolve_out_dir, write_snapshot
from posekey.errors import CheckpointError, ConfigError, PosekeyError
from posekey.run_logging import configure_logging, logged_command

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEFAULT_CLASSES = 20
DEFAULT_PER_CLASS = 200
DEFAULT_JITTER = 0.05
DEFAULT_EVAL_SAMPLES = 100
DEFAULT_GRID_SAMPLES = 4


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose errors follow the one-line ``error: usage: ...`` format."""

    def error(self, message: str):
        self.exit(EXIT_USAGE, f"error: usage: {message}\n")


def _existing(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def run_synth_data(args: argparse.Namespace) -> Path:
    """Render a synthetic dataset, or normalize a user folder with ``--ingest``."""
    from posekey.dataset import MANIFEST_FILE, generate_dataset, ingest_folder
    from posekey.synth import make_posture_bank

    out_dir = resolve_out_dir(args.out_dir, "dataset")
    if args.ingest:
        manifest = ingest_folder(_existing(args.ingest, "ingest folder"), out_dir,
                                 seed=args.seed)
    else:
        dims = (args.image_size, args.image_size)
        bank = make_posture_bank(args.classes, args.seed)
        manifest = generate_dataset(bank, args.per_class, args.jitter, dims, out_dir,
                                    args.seed, workers=args.workers)
    write_snapshot(out_dir, "synth-data", {
        "classes": manifest.num_classes,
        "per_class": None if args.ingest else args.per_class,
        "image_size": args.image_size,
        "jitter": args.jitter,
        "seed": args.seed,
        "ingest": args.ingest,
        "dataset_hash": manifest.hash(),
    })
    path = out_dir / MANIFEST_FILE
    print(path)
    return path


def run_train(args: argparse.Namespace) -> Path:
    from posekey.training import train

    config = resolve_config(args.config, {
        "model_kind": args.model,
        "seed": args.seed,
        "image_size": args.image_size,
        "lambda_kp": args.lambda_kp,
        "lambda_pose": args.lambda_pose,
        "epochs": args.epochs,
        "manifest": args.manifest,
    })
    if config.manifest:
        _existing(config.manifest, "manifest")
    resume = _existing(args.checkpoint, "checkpoint") if args.checkpoint else None
    out_dir = resolve_out_dir(args.out_dir, f"{config.model_kind}-seed{config.seed}")
    write_snapshot(out_dir, "train", config.to_dict())
    result = train(config, out_dir, resume_from=resume)
    print(result.checkpoint)
    return result.checkpoint


def _grid(images: torch.Tensor, rows: int, cols: int) -> np.ndarray:
    """Tile (rows*cols, 3, H, W) images class-major into a rows x cols grid."""
    from posekey.synth import tensor_to_pixels

    _, _, h, w = images.shape
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for idx, image in enumerate(images):
        col, row = divmod(idx, rows)
        canvas[row * h:(row + 1) * h, col * w:(col + 1) * w] = tensor_to_pixels(image)
    return canvas


def run_sample(args: argparse.Namespace) -> Path:
    """Write an n x C grid (one column per class) plus the individual PNGs."""
    from posekey.synth import tensor_to_pixels
    from posekey.training import load_trained

    model = load_trained(_existing(args.checkpoint, "checkpoint"))
    n = args.n_samples
    if n < 1:
        raise ConfigError(f"--n-samples must be >= 1, got {n}")
    out_dir = resolve_out_dir(args.out_dir, "samples")
    labels = torch.arange(model.num_classes).repeat_interleave(n)
    images = model.sample(labels, args.seed, guidance_scale=args.guidance_scale)

    out_dir.mkdir(parents=True, exist_ok=True)
    for idx, (image, label) in enumerate(zip(images, labels.tolist())):
        class_dir = out_dir / f"{label:02d}"
        class_dir.mkdir(exist_ok=True)
        Image.fromarray(tensor_to_pixels(image)).save(class_dir / f"{idx % n:03d}.png")
    grid_path = out_dir / "grid.png"
    Image.fromarray(_grid(images, n, model.num_classes)).save(grid_path)
    write_snapshot(out_dir, "sample", {
        "checkpoint": args.checkpoint,
        "n_samples": n,
        "seed": args.seed,
        "guidance_scale": args.guidance_scale,
        "model_kind": model.model_kind,
    })
    print(grid_path)
    return grid_path


def _pose_extractor(args: argparse.Namespace):
    from posekey.detector import AdapterConfig, ExternalPoseExtractor
    from posekey.pose_extract import ColorCodedExtractor
    from posekey.skeleton import DEFAULT_TOPOLOGY

    if not args.adapter_cmd:
        return ColorCodedExtractor()
    joints = args.adapter_joints or DEFAULT_TOPOLOGY.num_joints
    return ExternalPoseExtractor(AdapterConfig.from_command(args.adapter_cmd, joints))


def _run_label(args: argparse.Namespace, index: int, model_kind: str) -> str:
    if not args.label:
        return model_kind
    if len(args.checkpoint) == 1:
        return args.label
    return f"{args.label}-{index}"


def run_eval(args: argparse.Namespace) -> Path:
    """Evaluate each checkpoint into ``<out>/<label>/`` and combine them in ``<out>``."""
    from posekey.dataset import DatasetManifest
    from posekey.evaluation import evaluate_reference, evaluate_run
    from posekey.features import resolve_feature_extractor
    from posekey.reporting import emit_report
    from posekey.training import load_trained

    if not args.checkpoint and not args.reference:
        raise ConfigError("eval needs --checkpoint PATH... and/or --reference")
    manifest = DatasetManifest.load(_existing(args.manifest, "manifest"))
    models = [load_trained(_existing(p, "checkpoint")) for p in args.checkpoint]
    sizes = sorted({m.image_size for m in models} | (
        {args.image_size} if args.image_size else set()))
    if len(sizes) > 1:
        raise CheckpointError(f"checkpoints disagree on image size: {sizes}")
    image_size = sizes[0] if sizes else int(manifest.metadata.get("dims", [128])[0])
    labels = [_run_label(args, i, m.model_kind) for i, m in enumerate(models)]
    if len(set(labels)) < len(labels):
        raise ConfigError(f"report labels collide: {labels}; pass distinct --label values")

    out_dir = resolve_out_dir(args.out_dir, "eval")
    extractor = _pose_extractor(args)
    features = resolve_feature_extractor(args.feature_extractor, manifest, image_size,
                                         out_dir / "feature_extractor", args.seed)
    reports = []
    for model, label in zip(models, labels):
        report = evaluate_run(model, manifest, extractor, args.n_samples, features,
                              seed=args.seed, label=label)
        report.write(out_dir / label)
        reports.append(report)
        logger.info("%s: fid %.4f ms-ssim %.4f kp-err %.3f px",
                    label, report.fid, report.ms_ssim, report.mean_kp_err)
    if args.reference:
        report = evaluate_reference(manifest, extractor, features, image_size)
        report.write(out_dir / report.label)
        reports.append(report)

    emit_report(reports, out_dir)
    write_snapshot(out_dir, "eval", {
        "checkpoints": args.checkpoint,
        "manifest": args.manifest,
        "n_samples": args.n_samples,
        "seed": args.seed,
        "feature_extractor": features.identity,
        "adapter_cmd": args.adapter_cmd,
        "reference": args.reference,
    })
    print(out_dir)
    return out_dir


def run_report(args: argparse.Namespace) -> Path:
    """Combine previously written ``metric_report.json`` files."""
    from posekey.evaluation import MetricReport
    from posekey.reporting import emit_report

    reports = [MetricReport.load(_existing(p, "metric report")) for p in args.reports]
    out_dir = resolve_out_dir(args.out_dir, "report")
    emit_report(reports, out_dir)
    write_snapshot(out_dir, "report", {"reports": args.reports})
    print(out_dir)
    return out_dir


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser, seed_help: str = "random seed") -> None:
    parser.add_argument("--out-dir", help="output directory (default: $POSEKEY_OUT_DIR/<name> "
                                          "or ./runs/<name>)")
    parser.add_argument("--seed", type=int, default=0, help=seed_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posekey",
                     description="Pose-aware conditional image generation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="render a synthetic keyposture dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=DEFAULT_CLASSES, help="number of classes")
    p.add_argument("--per-class", type=int, default=DEFAULT_PER_CLASS,
                   help="images per class")
    p.add_argument("--image-size", type=int, default=128, help="square image side in pixels")
    p.add_argument("--jitter", type=float, default=DEFAULT_JITTER,
                   help="per-joint angle jitter std in radians")
    p.add_argument("--workers", type=int, default=1, help="render threads")
    p.add_argument("--ingest", help="normalize an annotated image folder instead of rendering")
    p.set_defaults(handler=run_synth_data)

    p = sub.add_parser("train", help="train one model configuration")
    _common(p)
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--model", choices=MODEL_KINDS, help="model kind")
    p.add_argument("--manifest", help="dataset manifest.csv or its directory")
    p.add_argument("--image-size", type=int, help="square image side in pixels")
    p.add_argument("--lambda-kp", type=float, help="keypoint alignment loss weight")
    p.add_argument("--lambda-pose", type=float, help="pose consistency loss weight")
    p.add_argument("--epochs", type=int, help="total epochs")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    # --seed on train overrides the config file only when given explicitly
    p.set_defaults(handler=run_train, seed=None)

    p = sub.add_parser("sample", help="write an n x C grid of generated images")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--n-samples", type=int, default=DEFAULT_GRID_SAMPLES,
                   help="images per class")
    p.add_argument("--guidance-scale", type=float,
                   help="classifier-free guidance scale (diffusion only)")
    p.set_defaults(handler=run_sample)

    p = sub.add_parser("eval", help="compute FID, MS-SSIM and keypoint error")
    _common(p)
    p.add_argument("--checkpoint", nargs="+", default=[], help="checkpoint(s) to evaluate")
    p.add_argument("--manifest", required=True, help="dataset manifest.csv or its directory")
    p.add_argument("--n-samples", type=int, default=DEFAULT_EVAL_SAMPLES,
                   help="generated images per class")
    p.add_argument("--image-size", type=int,
                   help="image size for --reference without checkpoints")
    p.add_argument("--adapter-cmd", help="external pose detector command")
    p.add_argument("--adapter-joints", type=int, help="joints reported by the external detector")
    p.add_argument("--feature-extractor", default="synthetic",
                   help="'synthetic' or module:factory")
    p.add_argument("--label", help="report label (default: model kind)")
    p.add_argument("--reference", action="store_true",
                   help="also score the real eval split against itself")
    p.set_defaults(handler=run_eval)

    p = sub.add_parser("report", help="combine metric reports into tables and plots")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--reports", nargs="+", required=True,
                   help="metric_report.json files or run directories")
    p.set_defaults(handler=run_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        configure_logging()
    except ValueError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE

    params = {k: v for k, v in vars(args).items() if k not in ("handler", "command")}
    try:
        with logged_command(args.command, params):
            args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PosekeyError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("error: interrupted: stopped by user", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:
        logger.debug("unhandled failure", exc_info=True)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: runtime: {message}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK
