"""Joint optimization of the mimicking module and the SR model.

Two optimizers keep the gradient routing structural: the degradation +
color losses step only the mimicking module, the reconstruction loss steps
only the SR model, and the mimicked image is detached before it feeds the
SR branch. At inference the mimicking module does not exist.
"""
from __future__ import annotations

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import torch

from . import metrics as metrics_mod
from .config import ConfigError, default_config
from .data import DataError, PairedSample, crop_augment, load_manifest, load_pair
from .flow import make_backend
from .imgproc import to_image, to_tensor
from .losses import (LossError, LossReport, color_loss, degradation_loss,
                     make_color_scorer, reconstruction_loss, total_loss)
from .mimick import MimickConfig, MimickModule
from .srmodels import ModelError, build, sr_forward


class TrainError(Exception):
    pass


def validate_train_cfg(tc: dict) -> None:
    if tc["iterations"] <= 0:
        raise TrainError(f"iterations must be positive, got {tc['iterations']}")
    if tc["lr"] <= 0:
        raise TrainError(f"lr must be positive, got {tc['lr']}")
    if tc["batch_size"] < 1:
        raise TrainError(f"batch_size must be >= 1, got {tc['batch_size']}")


def lr_at(iteration: int, tc: dict) -> float:
    """Cosine annealing from the initial rate down to eta_min."""
    total = tc["iterations"]
    if not 0 <= iteration <= total:
        raise TrainError(f"iteration {iteration} outside [0, {total}]")
    lr0, eta = tc["lr"], tc["eta_min"]
    return eta + 0.5 * (lr0 - eta) * (1.0 + math.cos(math.pi * iteration / total))


def _mimick_cfg_from(cfg: dict) -> MimickConfig:
    m = cfg["mimick"]
    return MimickConfig(
        feature_width=m["feature_width"], dilations=tuple(m["dilations"]),
        noise_sigma=tuple(m["noise_sigma"]),
        noise_gaussian_enabled=m["noise_gaussian_enabled"],
        noise_jpeg_enabled=m["noise_jpeg_enabled"],
        jpeg_quality=tuple(m["jpeg_quality"]), jpeg_mode=m["jpeg_mode"],
        seed=m["seed"])


class Trainer:
    def __init__(self, cfg: dict, run_dir: str | Path,
                 pairs: list[PairedSample] | None = None):
        self.cfg = cfg
        validate_train_cfg(cfg["train"])
        if cfg["model"]["scale"] != cfg["data"]["scale"]:
            raise TrainError(
                f"model scale {cfg['model']['scale']} != data scale {cfg['data']['scale']}")
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.scale = cfg["data"]["scale"]
        tc = cfg["train"]
        self.patch_lr = tc["patch_hr"] // self.scale
        if tc["patch_hr"] % self.scale:
            raise TrainError(f"patch_hr {tc['patch_hr']} not divisible by scale {self.scale}")
        self.mode = tc["mode"]
        if self.mode not in ("mimick", "l1_baseline"):
            raise TrainError(f"unknown train mode {self.mode!r}")

        self.pairs = pairs if pairs is not None else self._load_pairs(cfg["data"]["manifest"])
        self.val_pairs = (self._load_pairs(cfg["data"]["val_manifest"])
                          if cfg["data"]["val_manifest"] else [])

        torch.manual_seed(tc["seed"])
        self.sr_model = build(cfg["model"]["name"], scale=self.scale)
        self.opt_sr = self._make_optimizer(self.sr_model.parameters(), tc)
        if self.mode == "mimick":
            self.mimick = MimickModule(_mimick_cfg_from(cfg))
            self.opt_mimick = self._make_optimizer(self.mimick.parameters(), tc)
            self.flow_backend = make_backend(cfg["flow"]["backend"], cfg["flow"]["weights"])
            self.scorer = make_color_scorer(cfg["loss"]["color_scorer"],
                                            cfg["loss"]["color_weights_path"])
        else:
            self.mimick = None
            self.opt_mimick = None
        self.lam = cfg["loss"]["lambda"]
        self.epsilon = cfg["loss"]["epsilon"]
        self.iteration = 0
        self.skipped = 0

    def _load_pairs(self, manifest_path):
        if manifest_path is None:
            raise TrainError("no dataset manifest configured (data.manifest)")
        manifest = load_manifest(manifest_path)
        if manifest.scale != self.scale:
            raise TrainError(f"manifest scale {manifest.scale} != config scale {self.scale}")
        root = Path(manifest_path).parent
        return [load_pair(e, manifest.scale, root) for e in manifest.entries]

    @staticmethod
    def _make_optimizer(params, tc):
        if tc["optimizer"] != "adam":
            raise TrainError(f"unsupported optimizer {tc['optimizer']!r}")
        return torch.optim.Adam(params, lr=tc["lr"], betas=tuple(tc["betas"]))

    def _set_lrs(self) -> tuple[float, float]:
        tc = self.cfg["train"]
        lr_sr = lr_at(self.iteration, tc)
        mlr = tc["mimick_lr"]
        if mlr is None:
            lr_m = lr_sr
        else:
            scaled = dict(tc, lr=mlr) if mlr > 0 else None
            lr_m = lr_at(self.iteration, scaled) if scaled else 0.0
        for g in self.opt_sr.param_groups:
            g["lr"] = lr_sr
        if self.opt_mimick is not None:
            for g in self.opt_mimick.param_groups:
                g["lr"] = lr_m
        return lr_sr, lr_m

    def sample_batch(self, iteration: int) -> list[PairedSample]:
        """Deterministic batch for a given iteration (resume-safe)."""
        tc = self.cfg["train"]
        rng = np.random.default_rng([tc["seed"], iteration])
        idx = rng.integers(0, len(self.pairs), size=tc["batch_size"])
        return [crop_augment(self.pairs[int(i)], self.patch_lr, rng) for i in idx]

    def train_step(self, batch: list[PairedSample]) -> LossReport | None:
        """One optimization step; returns None when the batch was skipped."""
        lr_sr, lr_m = self._set_lrs()
        hr_t = torch.stack([to_tensor(c.hr)[0] for c in batch])

        if self.mode == "l1_baseline":
            lr_t = torch.stack([to_tensor(c.lr)[0] for c in batch])
            sr = sr_forward(self.sr_model, lr_t, clamp=False)
            l_res = reconstruction_loss(sr, hr_t)
            if not torch.isfinite(l_res):
                self.skipped += 1
                self._check_skip_budget()
                return None
            self.opt_sr.zero_grad()
            l_res.backward()
            self.opt_sr.step()
            self.iteration += 1
            return total_loss(l_res.item(), 0.0, 0.0, self.lam)

        lr_t = torch.stack([to_tensor(c.lr)[0] for c in batch])
        hrd_t = torch.stack([to_tensor(c.hr_down)[0] for c in batch])
        noise_rng = np.random.default_rng(
            [self.cfg["mimick"]["seed"], self.iteration, 7])
        mim = self.mimick(lr_t, hrd_t, rng=noise_rng, add_noise=True)

        deg_terms, keep = [], []
        for i, c in enumerate(batch):
            try:
                deg_terms.append(degradation_loss(
                    c.lr, c.hr_down, mim[i:i + 1], self.flow_backend, self.epsilon))
                keep.append(i)
            except LossError:
                continue   # all-invalid mask: drop the sample
        if not keep:
            self.skipped += 1
            self._check_skip_budget()
            return None
        l_deg = torch.stack(deg_terms).mean()
        l_cd = color_loss(mim[keep], hrd_t[keep], self.scorer)
        mim_obj = l_deg + self.lam * l_cd

        mim_det = mim.detach()
        if not torch.isfinite(mim_obj):
            self.skipped += 1
            self._check_skip_budget()
            return None
        self.opt_mimick.zero_grad()
        mim_obj.backward()

        sr = sr_forward(self.sr_model, mim_det, clamp=False)
        l_res = reconstruction_loss(sr, hr_t)
        if not torch.isfinite(l_res):
            self.skipped += 1
            self._check_skip_budget()
            return None
        self.opt_sr.zero_grad()
        l_res.backward()
        self.opt_mimick.step()
        self.opt_sr.step()
        self.iteration += 1
        return total_loss(l_res.item(), l_deg.item(), l_cd.item(), self.lam)

    def _check_skip_budget(self):
        total = self.iteration + self.skipped
        if total > 100 and self.skipped / total > self.cfg["train"]["max_skip_fraction"]:
            raise TrainError(
                f"{self.skipped}/{total} batches skipped (NaN or empty masks); aborting")

    def validate(self) -> float | None:
        """Mean PSNR of SR outputs on the validation pairs (aligned input
        when the dataset provides it)."""
        if not self.val_pairs:
            return None
        scores = []
        self.sr_model.eval()
        with torch.no_grad():
            for p in self.val_pairs:
                inp = p.aligned_lr_truth if p.aligned_lr_truth is not None else p.lr
                out = to_image(sr_forward(self.sr_model, to_tensor(inp)))
                scores.append(metrics_mod.psnr(out, p.hr))
        self.sr_model.train()
        return float(np.mean(scores))

    # -- checkpointing ------------------------------------------------------

    def state_dict(self) -> dict:
        state = {
            "iteration": self.iteration,
            "skipped": self.skipped,
            "sr_state": self.sr_model.state_dict(),
            "opt_sr": self.opt_sr.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "config": self.cfg,
        }
        if self.mimick is not None:
            state["mimick_state"] = self.mimick.state_dict()
            state["opt_mimick"] = self.opt_mimick.state_dict()
        return state

    def save_checkpoint(self) -> Path:
        ckpt_dir = self.run_dir / "ckpt"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        path = ckpt_dir / f"{self.iteration}.bin"
        tmp = path.with_suffix(".tmp")
        torch.save(self.state_dict(), tmp)
        os.replace(tmp, path)
        latest = ckpt_dir / "latest"
        tmp_l = ckpt_dir / "latest.tmp"
        tmp_l.write_text(path.name)
        os.replace(tmp_l, latest)
        return path

    def load_checkpoint(self, path: str | Path) -> None:
        state = torch.load(path, map_location="cpu", weights_only=False)
        if state["config"]["model"]["scale"] != self.scale:
            raise TrainError("checkpoint scale does not match configured scale")
        self.iteration = state["iteration"]
        self.skipped = state["skipped"]
        self.sr_model.load_state_dict(state["sr_state"])
        self.opt_sr.load_state_dict(state["opt_sr"])
        torch.set_rng_state(state["torch_rng"])
        if self.mimick is not None and "mimick_state" in state:
            self.mimick.load_state_dict(state["mimick_state"])
            self.opt_mimick.load_state_dict(state["opt_mimick"])

    # -- main loop ----------------------------------------------------------

    def train(self, iterations: int | None = None, log_every: int = 1,
              quiet: bool = True) -> Path:
        tc = self.cfg["train"]
        target = iterations if iterations is not None else tc["iterations"]
        log_path = self.run_dir / "train_log.jsonl"
        with open(log_path, "a") as log:
            while self.iteration < target:
                t0 = time.perf_counter()
                batch = self.sample_batch(self.iteration)
                report = self.train_step(batch)
                if report is None:
                    continue
                if self.iteration % log_every == 0 or self.iteration == target:
                    rec = {"iter": self.iteration,
                           "lr_sr": lr_at(self.iteration, tc),
                           **report.as_dict(),
                           "wall_time": time.perf_counter() - t0}
                    log.write(json.dumps(rec) + "\n")
                if self.iteration % tc["val_every"] == 0:
                    val = self.validate()
                    if val is not None:
                        log.write(json.dumps({"iter": self.iteration,
                                              "val_psnr": val}) + "\n")
                        log.flush()
                        if not quiet:
                            print(f"iter {self.iteration}: val PSNR {val:.2f} dB")
                if self.iteration % tc["checkpoint_every"] == 0:
                    self.save_checkpoint()
        return self.save_checkpoint()


# -- inference (mimicking module removed) -----------------------------------


def load_sr_model(checkpoint_path: str | Path, scale: int | None = None):
    """Rebuild only the SR model from a checkpoint; the mimicking module's
    weights are ignored even when present."""
    state = torch.load(checkpoint_path, map_location="cpu", weights_only=False)
    cfg = state["config"]
    if scale is not None and cfg["model"]["scale"] != scale:
        raise TrainError(f"checkpoint scale {cfg['model']['scale']} != requested {scale}")
    model = build(cfg["model"]["name"], scale=cfg["model"]["scale"])
    model.load_state_dict(state["sr_state"])
    model.eval()
    return model


def infer(model, lr: np.ndarray, tile: int | None = None, overlap: int = 16) -> np.ndarray:
    """SR output from a raw LR image; optional overlap-blend tiling."""
    with torch.no_grad():
        if tile is None:
            return to_image(sr_forward(model, to_tensor(lr)))
        return _infer_tiled(model, lr, tile, overlap)


def _infer_tiled(model, lr: np.ndarray, tile: int, overlap: int) -> np.ndarray:
    h, w = lr.shape[:2]
    s = model.scale
    out = np.zeros((h * s, w * s, 3), np.float64)
    weight = np.zeros((h * s, w * s, 1), np.float64)
    step = tile - overlap
    ys = sorted({min(y, max(0, h - tile)) for y in range(0, h, step)})
    xs = sorted({min(x, max(0, w - tile)) for x in range(0, w, step)})
    for y0 in ys:
        for x0 in xs:
            y1, x1 = min(y0 + tile, h), min(x0 + tile, w)
            patch = lr[y0:y1, x0:x1]
            sr = to_image(sr_forward(model, to_tensor(patch)))
            wy = _feather(y1 - y0, y0 > 0, y1 < h, overlap)
            wx = _feather(x1 - x0, x0 > 0, x1 < w, overlap)
            wmap = np.repeat(wy, s)[:, None] * np.repeat(wx, s)[None, :]
            out[y0 * s:y1 * s, x0 * s:x1 * s] += sr * wmap[..., None]
            weight[y0 * s:y1 * s, x0 * s:x1 * s, 0] += wmap
    return (out / weight).astype(np.float32)


def _feather(n: int, fade_lo: bool, fade_hi: bool, overlap: int) -> np.ndarray:
    w = np.ones(n)
    ramp = np.linspace(0.0, 1.0, overlap + 2)[1:-1]
    if fade_lo:
        w[:overlap] = ramp
    if fade_hi:
        w[-overlap:] = ramp[::-1]
    return w
