"""Command-line surface: dataset synthesis, training, inference, evaluation,
alignment comparison, and plot emission.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import ConfigError, apply_overrides, load_config, save_config
from .data import (DataError, MisalignSpec, generate_synthetic_dataset,
                   load_image, load_manifest, load_pair, save_image)
from .flow import FlowError, compute_flow, make_backend
from .imgproc import to_image, to_tensor
from .losses import LossError, validity_mask, warp
from .metrics import MetricsError, evaluate_image
from .mimick import MimickError
from .srmodels import ModelError
from .trainer import TrainError, Trainer, infer, load_sr_model

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 1, 2, 3


def percent_reduction(e_ref: float, e_new: float) -> float:
    """Relative per-pixel error reduction in percent."""
    if e_ref <= 0:
        raise ValueError("reference error must be positive")
    return 100.0 * (1.0 - e_new / e_ref)


def _make_run_dir(out: str | Path, cfg: dict | None = None) -> Path:
    run = Path(out) / time.strftime("run_%Y%m%d-%H%M%S")
    n = 0
    while run.exists():
        n += 1
        run = Path(out) / (time.strftime("run_%Y%m%d-%H%M%S") + f"_{n}")
    run.mkdir(parents=True)
    if cfg is not None:
        save_config(cfg, run / "config.yaml")
    return run


# ---------------------------------------------------------------------------
# subcommand bodies (importable for tests)


def gen_synth(src: str, out: str, spec_path: str | None, scale: int, seed: int) -> Path:
    spec_dict = {}
    if spec_path:
        p = Path(spec_path)
        if not p.is_file():
            raise DataError(f"spec file not found: {p}")
        with open(p) as f:
            spec_dict = yaml.safe_load(f) or {}
    spec = MisalignSpec.from_dict(spec_dict)
    generate_synthetic_dataset(src, out, spec, scale, seed)
    return Path(out)


def align_compare(checkpoint: str | Path, manifest_path: str | Path,
                  out_dir: str | Path, epsilon: float = 1e-3) -> dict:
    """Per-pixel alignment error of three candidates against the aligned
    truth: the naive downscaled HR, the flow-warped LR, and the mimicked LR.

    Emits heatmap PNGs and a CSV; returns the aggregate stats."""
    from .mimick import MimickModule
    from .trainer import _mimick_cfg_from

    state = torch.load(checkpoint, map_location="cpu", weights_only=False)
    if "mimick_state" not in state:
        raise TrainError(f"checkpoint {checkpoint} holds no mimicking module")
    cfg = state["config"]
    mimick = MimickModule(_mimick_cfg_from(cfg))
    mimick.load_state_dict(state["mimick_state"])
    mimick.eval()
    backend = make_backend(cfg["flow"]["backend"], cfg["flow"]["weights"])

    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    out_dir = Path(out_dir)
    (out_dir / "error_maps").mkdir(parents=True, exist_ok=True)

    rows, sums = [], {"naive": 0.0, "of": 0.0, "mimick": 0.0}
    for entry in manifest.entries:
        pair = load_pair(entry, manifest.scale, root)
        if pair.aligned_lr_truth is None:
            raise DataError(f"entry {entry.hr_path} has no aligned truth reference")
        truth = pair.aligned_lr_truth
        psi = compute_flow(pair.hr_down, pair.lr, backend)
        lr_w = warp(pair.lr, psi)
        mask = validity_mask(psi, epsilon)[..., None]
        with torch.no_grad():
            mim = to_image(mimick(to_tensor(pair.lr), to_tensor(pair.hr_down),
                                  add_noise=False))
        maps = {"naive": np.abs(pair.hr_down - truth),
                "of": np.abs(lr_w - truth),
                "mimick": np.abs(mim - truth)}
        n_valid = mask.sum() * 3
        errs = {k: float((v * mask).sum() / n_valid) for k, v in maps.items()}
        stem = Path(entry.hr_path).stem
        vmax = max(m.max() for m in maps.values()) or 1.0
        for k, m in maps.items():
            gray = (m.mean(axis=2, keepdims=True) / vmax).repeat(3, axis=2)
            save_image(out_dir / "error_maps" / f"{stem}_{k}.png", gray)
        rows.append({"image": stem, **{f"err_{k}": v for k, v in errs.items()}})
        for k in sums:
            sums[k] += errs[k]

    n = len(rows)
    means = {k: v / n for k, v in sums.items()}
    stats = {
        "mean_err_naive": means["naive"],
        "mean_err_of": means["of"],
        "mean_err_mimick": means["mimick"],
        "reduction_vs_naive_pct": percent_reduction(means["naive"], means["mimick"]),
        "reduction_vs_of_pct": percent_reduction(means["of"], means["mimick"]),
        "images": n,
    }
    with open(out_dir / "align_compare.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    with open(out_dir / "align_compare.json", "w") as f:
        json.dump(stats, f, indent=2)
    return stats


def eval_dataset(checkpoint: str | Path, manifest_path: str | Path,
                 out_dir: str | Path, niqe_params: str | None = None,
                 nrqm_scorer=None, border: int = 4) -> dict:
    """Run SR on every test pair (aligned truth input when present) and
    report per-image plus mean metrics. Deterministic ordering."""
    model = load_sr_model(checkpoint)
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for entry in manifest.entries:
        pair = load_pair(entry, manifest.scale, root)
        if pair.scale != manifest.scale:
            raise DataError("mixed-scale manifest")
        inp = pair.aligned_lr_truth if pair.aligned_lr_truth is not None else pair.lr
        sr = infer(model, inp)
        row = {"image": Path(entry.hr_path).stem}
        try:
            min_side = min(sr.shape[:2])
            rep = evaluate_image(sr, pair.hr,
                                 niqe_params=niqe_params if min_side >= 96 else None,
                                 nrqm_scorer=nrqm_scorer, border=border) \
                if min_side >= 96 else _fr_only(sr, pair.hr, border)
            row.update({k: f"{v:.6f}" for k, v in rep.as_dict().items()})
            row["error"] = ""
        except MetricsError as exc:
            row["error"] = str(exc)
        rows.append(row)

    fields = ["image", "psnr", "ssim", "niqe", "nrqm", "pi", "error"]
    with open(out_dir / "eval.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(rows)
    agg = {}
    for key in ("psnr", "ssim", "niqe", "nrqm", "pi"):
        vals = [float(r[key]) for r in rows if r.get(key)]
        if vals:
            agg[f"mean_{key}"] = float(np.mean(vals))
    agg["images"] = len(rows)
    agg["failed"] = sum(1 for r in rows if r.get("error"))
    with open(out_dir / "eval.json", "w") as f:
        json.dump(agg, f, indent=2)
    return agg


def _fr_only(sr, hr, border):
    from .metrics import MetricReport, psnr, ssim
    return MetricReport(psnr=psnr(sr, hr, border), ssim=ssim(sr, hr, border))


def run_infer(checkpoint: str | Path, input_path: str | Path, out_dir: str | Path,
              tile: int | None = None) -> list[Path]:
    model = load_sr_model(checkpoint)
    inp = Path(input_path)
    paths = sorted(inp.iterdir()) if inp.is_dir() else [inp]
    paths = [p for p in paths if p.suffix.lower() in (".png", ".jpg", ".jpeg")]
    if not paths:
        raise DataError(f"no images at {input_path}")
    out_dir = Path(out_dir)
    written = []
    for p in paths:
        sr = infer(model, load_image(p), tile=tile)
        dest = out_dir / f"{p.stem}_sr.png"
        save_image(dest, sr)
        written.append(dest)
    return written


def plot_artifacts(log_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Loss-curve and lr-schedule figures from a training log, or metric
    bars from an eval CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    log_path, out_dir = Path(log_path), Path(out_dir)
    if not log_path.is_file():
        raise DataError(f"log not found: {log_path}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if log_path.suffix == ".csv":
        with open(log_path) as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise DataError(f"{log_path}: empty CSV, nothing to plot")
        keys = [k for k in ("psnr", "ssim", "niqe") if any(r.get(k) for r in rows)]
        fig, ax = plt.subplots(figsize=(8, 4))
        for k in keys:
            vals = [float(r[k]) for r in rows if r.get(k)]
            ax.bar([f"{k}"], [np.mean(vals)])
        ax.set_title("mean metrics")
        dest = out_dir / "metrics.png"
        fig.savefig(dest)
        plt.close(fig)
        return [dest]

    steps, losses, lrs = [], {"l_res": [], "l_deg": [], "l_cd": [], "l_total": []}, []
    with open(log_path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{log_path}:{lineno}: malformed record: {exc}") from exc
            if "l_total" in rec:
                steps.append(rec["iter"])
                lrs.append(rec.get("lr_sr"))
                for k in losses:
                    losses[k].append(rec[k])
    if not steps:
        raise DataError(f"{log_path}: no loss records found")

    fig, ax = plt.subplots(figsize=(8, 4))
    for k, v in losses.items():
        ax.plot(steps, v, label=k)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    dest = out_dir / "losses.png"
    fig.savefig(dest)
    plt.close(fig)
    written.append(dest)

    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(steps, lrs)
    ax.set_xlabel("iteration")
    ax.set_ylabel("learning rate")
    dest = out_dir / "lr_schedule.png"
    fig.savefig(dest)
    plt.close(fig)
    written.append(dest)
    return written


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mimicsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="synthesize a misaligned dataset with aligned truth")
    p.add_argument("--src", required=True, help="folder of pristine HR images")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="YAML file of misalignment ranges")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="joint mimick + SR training")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--out", required=True, help="output root (run dir created inside)")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override, repeatable")

    p = sub.add_parser("infer", help="SR a file or folder (mimick module removed)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="metric report over a test manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--niqe-params")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("align-compare", help="alignment error maps and stats")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plot", help="figures from a training log or eval CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if getattr(args, "seed", None) is not None:
            np.random.seed(args.seed)
            torch.manual_seed(args.seed)

        if args.command == "gen-synth":
            gen_synth(args.src, args.out, args.spec, args.scale, args.seed)
        elif args.command == "train":
            cfg = load_config(args.config)
            apply_overrides(cfg, args.overrides)
            if args.seed is not None:
                cfg["train"]["seed"] = args.seed
            run_dir = _make_run_dir(args.out, cfg)
            trainer = Trainer(cfg, run_dir)
            if args.resume:
                trainer.load_checkpoint(args.resume)
            trainer.train(quiet=False)
        elif args.command == "infer":
            run_infer(args.checkpoint, args.input, args.out, args.tile)
        elif args.command == "eval":
            eval_dataset(args.checkpoint, args.manifest, args.out,
                         niqe_params=args.niqe_params)
        elif args.command == "align-compare":
            align_compare(args.checkpoint, args.manifest, args.out, args.epsilon)
        elif args.command == "plot":
            plot_artifacts(args.log, args.out)
        return 0
    except (ConfigError, ModelError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DataError, MetricsError, MimickError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (TrainError, LossError, FlowError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
