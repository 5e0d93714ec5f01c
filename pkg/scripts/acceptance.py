#!/usr/bin/env python3
"""Long-running acceptance checks for posekey.

Runs the seed-pinned overfit sanity runs, the desk-scale comparison of cdiff
against cdiff_pose across seeds, and the four-way loss-switch ablation, then
reports pass/fail and wall time per check.

Usage:
    python scripts/acceptance.py [--work-dir runs/acceptance] [--only overfit]
        [--epochs 30] [--seeds 0 1 2] [--quick]

``--quick`` shrinks every budget so the whole suite finishes in minutes; the
thresholds still apply but are not expected to hold at that scale.
"""

import argparse
import logging
import statistics
import sys
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import torch

from posekey.config import TrainConfig
from posekey.dataset import PostureBatch, generate_dataset
from posekey.evaluation import evaluate_run
from posekey.features import load_or_train_feature_extractor
from posekey.metrics import mean_keypoint_error
from posekey.pose_extract import ColorCodedExtractor
from posekey.reporting import emit_report
from posekey.run_logging import configure_logging
from posekey.synth import make_posture_bank, render_posture
from posekey.training import build_state, train, train_step, trained_from_state

logger = logging.getLogger("posekey.acceptance")

# ANSI colours
GREEN = "\033[92m"
RED = "\033[91m"
YELLOW = "\033[93m"
CYAN = "\033[96m"
BOLD = "\033[1m"
RESET = "\033[0m"

SIZE = 64
OVERFIT_IMAGES = 10

# Small networks that still train in minutes on a CPU at 64x64.
DESK_MODEL = {
    "image_size": SIZE,
    "diffusion_steps": 200,
    "unet_base_channels": 32,
    "unet_channel_mults": (1, 2, 2),
    "attention_resolutions": (16,),
    "latent_dim": 64,
    "label_dim": 32,
    "gan_hidden": (256, 512),
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    elapsed_ms: float
    error: str = ""
    preview: str = ""


@dataclass
class Suite:
    results: list[CheckResult] = field(default_factory=list)

    def record(self, result: CheckResult) -> None:
        self.results.append(result)
        status = f"{GREEN}PASS{RESET}" if result.passed else f"{RED}FAIL{RESET}"
        time_str = f"{CYAN}{result.elapsed_ms / 1000:.1f}s{RESET}"
        print(f"  {status}  {time_str:>12}  {result.name}")
        if not result.passed:
            print(f"           {RED}{result.error}{RESET}")
        elif result.preview:
            print(f"           {YELLOW}{result.preview[:100]}{RESET}")

    def summary(self) -> int:
        total = len(self.results)
        passed = sum(1 for r in self.results if r.passed)
        failed = total - passed
        print()
        print(f"{BOLD}{'-' * 60}{RESET}")
        print(f"{BOLD}Results: {GREEN}{passed} passed{RESET}{BOLD}, "
              f"{RED}{failed} failed{RESET}{BOLD} / {total} total{RESET}")
        if failed:
            print()
            print(f"{RED}Failed checks:{RESET}")
            for r in self.results:
                if not r.passed:
                    print(f"  - {r.name}: {r.error}")
        return 1 if failed else 0


def run_check(suite: Suite, name: str, check: Callable[[], tuple[bool, str]]) -> None:
    """Run ``check`` (returning ``(passed, detail)``) and record the outcome."""
    t0 = time.perf_counter()
    try:
        passed, detail = check()
    except Exception as exc:  # a crashing check is a failed check
        elapsed_ms = (time.perf_counter() - t0) * 1000
        logger.debug("check %s crashed", name, exc_info=True)
        suite.record(CheckResult(name, False, elapsed_ms, error=f"{type(exc).__name__}: {exc}"))
        return
    elapsed_ms = (time.perf_counter() - t0) * 1000
    if passed:
        suite.record(CheckResult(name, True, elapsed_ms, preview=detail))
    else:
        suite.record(CheckResult(name, False, elapsed_ms, error=detail))


# ---------------------------------------------------------------------------
# Overfit sanity
# ---------------------------------------------------------------------------

def fixed_batch(seed: int) -> PostureBatch:
    """One jitter-free render per class of a 10-class bank."""
    bank = make_posture_bank(OVERFIT_IMAGES, seed)
    renders = [render_posture(spec, 0.0, seed, (SIZE, SIZE)) for spec in bank]
    return PostureBatch(
        images=torch.stack([r.image for r in renders]),
        labels=torch.arange(OVERFIT_IMAGES),
        keypoints=torch.stack([r.pose.coords.float() for r in renders]),
        visibility=torch.stack([r.pose.visibility for r in renders]),
    )


def overfit_gan(steps: int, seed: int) -> tuple[bool, str]:
    config = TrainConfig(**{**DESK_MODEL, "model_kind": "cgan_pose", "seed": seed,
                            "batch_size": OVERFIT_IMAGES}).validate()
    batch = fixed_batch(seed)
    extractor = ColorCodedExtractor()
    state = build_state(config, OVERFIT_IMAGES)
    records = [train_step(state, batch, extractor) for _ in range(steps)]
    first = records[0].l_kp
    tail = statistics.fmean(r.l_kp for r in records[-10:])
    ratio = tail / first if first else float("inf")
    return ratio < 0.5, f"L_kp step 1 {first:.5f} -> last 10 steps {tail:.5f} ({ratio:.2f}x)"


def overfit_diffusion(steps: int, seed: int) -> tuple[bool, str]:
    config = TrainConfig(**{**DESK_MODEL, "model_kind": "cdiff_pose", "seed": seed,
                            "batch_size": OVERFIT_IMAGES}).validate()
    batch = fixed_batch(seed)
    extractor = ColorCodedExtractor()
    state = build_state(config, OVERFIT_IMAGES)
    for _ in range(steps):
        train_step(state, batch, extractor)
    images = trained_from_state(state).sample(batch.labels, seed)
    report = mean_keypoint_error(images, batch.labels, extractor, batch.keypoints / SIZE,
                                 batch.visibility)
    return report.mean < 5.0, f"sampled kp error {report.mean:.3f} px ({report.missing} missing)"


# ---------------------------------------------------------------------------
# Desk-scale comparison and ablation
# ---------------------------------------------------------------------------

def _dataset(work_dir: Path, classes: int, per_class: int):
    return generate_dataset(make_posture_bank(classes, 0), per_class, 0.05, (SIZE, SIZE),
                            work_dir / "dataset", seed=0, workers=4)


def _train_and_score(manifest, features, work_dir: Path, label: str, n_samples: int,
                     **overrides):
    config = TrainConfig(**{**DESK_MODEL, "manifest": str(manifest.root),
                            **overrides}).validate()
    result = train(config, work_dir / label, manifest=manifest)
    report = evaluate_run(result.checkpoint, manifest, ColorCodedExtractor(), n_samples,
                          features, seed=config.seed, label=label)
    report.write(work_dir / "eval" / label)
    return result, report


def pose_module_comparison(work_dir: Path, epochs: int, seeds: list[int], per_class: int,
                           n_samples: int) -> tuple[bool, str]:
    manifest = _dataset(work_dir, 10, per_class)
    features = load_or_train_feature_extractor(manifest, SIZE, work_dir / "feature_extractor")
    reports = []
    for kind in ("cdiff", "cdiff_pose"):
        for seed in seeds:
            _, report = _train_and_score(manifest, features, work_dir, f"{kind}-seed{seed}",
                                         n_samples, model_kind=kind, seed=seed, epochs=epochs)
            reports.append(report)
    emit_report(reports, work_dir / "report")

    def median(kind: str, metric: str) -> float:
        return statistics.median(getattr(r, metric) for r in reports if r.model_kind == kind)

    kp = {k: median(k, "mean_kp_err") for k in ("cdiff", "cdiff_pose")}
    fid = {k: median(k, "fid") for k in ("cdiff", "cdiff_pose")}
    passed = kp["cdiff_pose"] <= kp["cdiff"] and fid["cdiff_pose"] <= fid["cdiff"] + 0.5
    return passed, (f"kp err {kp['cdiff']:.3f} -> {kp['cdiff_pose']:.3f} px, "
                    f"fid {fid['cdiff']:.3f} -> {fid['cdiff_pose']:.3f}")


def loss_switch_ablation(work_dir: Path, epochs: int, per_class: int,
                         n_samples: int) -> tuple[bool, str]:
    manifest = _dataset(work_dir, 10, per_class)
    features = load_or_train_feature_extractor(manifest, SIZE, work_dir / "feature_extractor")
    cells = {"both": (1.0, 1.0), "kp-only": (1.0, 0.0), "pose-only": (0.0, 1.0),
             "neither": (0.0, 0.0)}
    reports, problems = [], []
    for cell, (lkp, lpose) in cells.items():
        result, report = _train_and_score(
            manifest, features, work_dir, f"ablation-{cell}", n_samples,
            model_kind="cdiff_pose", epochs=epochs, lambda_kp=lkp, lambda_pose=lpose,
        )
        reports.append(report)
        kp_seen = any(s.l_kp != 0 for s in result.run_log.steps)
        pose_seen = any(s.l_pose != 0 for s in result.run_log.steps)
        if (kp_seen, pose_seen) != (bool(lkp), bool(lpose)):
            problems.append(f"{cell}: nonzero l_kp={kp_seen} l_pose={pose_seen}")
    emit_report(reports, work_dir / "ablation-report")
    rows = (work_dir / "ablation-report" / "table2.csv").read_text().splitlines()[1:]
    if len(rows) != len(cells):
        problems.append(f"table2.csv has {len(rows)} rows, expected {len(cells)}")
    return not problems, "; ".join(problems) or "four cells populated table2.csv"


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main() -> int:
    parser = argparse.ArgumentParser(description="posekey acceptance suite")
    parser.add_argument("--work-dir", default="runs/acceptance")
    parser.add_argument("--only", choices=["overfit", "comparison", "ablation"])
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--quick", action="store_true", help="tiny budgets for a smoke run")
    args = parser.parse_args()

    configure_logging()
    work_dir = Path(args.work_dir)
    gan_steps, diff_steps = (20, 50) if args.quick else (500, 2000)
    epochs = 1 if args.quick else args.epochs
    per_class = 20 if args.quick else 200
    n_samples = 4 if args.quick else 50

    suite = Suite()
    print(f"{BOLD}posekey acceptance{RESET}  work dir {work_dir}")
    if args.only in (None, "overfit"):
        print(f"\n{BOLD}Overfit sanity{RESET}")
        run_check(suite, f"cgan_pose halves L_kp in {gan_steps} steps",
                  lambda: overfit_gan(gan_steps, seed=0))
        run_check(suite, f"cdiff_pose samples within 5 px after {diff_steps} steps",
                  lambda: overfit_diffusion(diff_steps, seed=0))
    if args.only in (None, "comparison"):
        print(f"\n{BOLD}Pose module comparison{RESET}")
        run_check(suite, f"cdiff_pose <= cdiff over seeds {args.seeds}",
                  lambda: pose_module_comparison(work_dir / "comparison", epochs, args.seeds,
                                                 per_class, n_samples))
    if args.only in (None, "ablation"):
        print(f"\n{BOLD}Loss-switch ablation{RESET}")
        run_check(suite, "kp-only / pose-only / both / neither",
                  lambda: loss_switch_ablation(work_dir / "ablation", epochs, per_class,
                                               n_samples))
    return suite.summary()


if __name__ == "__main__":
    sys.exit(main())
