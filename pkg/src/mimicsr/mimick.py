"""The LR mimicking module: guidance network, transfer network, noise injection.

Takes the LR patch and the downscaled HR patch and rewrites the downscaled
HR so it carries the LR's degradation while keeping HR geometry and color.
Spatial size never changes anywhere in the module; the final projection is
zero-initialized so training starts from the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .diffjpeg import jpeg_approx


class MimickError(Exception):
    pass


@dataclass
class MimickConfig:
    feature_width: int = 64
    dilations: tuple[int, ...] = (1, 2, 4)
    noise_sigma: tuple[float, float] = (0.0, 0.04)
    noise_gaussian_enabled: bool = True
    noise_jpeg_enabled: bool = True
    jpeg_quality: tuple[int, int] = (30, 95)
    jpeg_mode: str = "soft"
    seed: int = 0

    def validate(self) -> None:
        if self.feature_width <= 0:
            raise MimickError(f"feature_width must be positive, got {self.feature_width}")
        if any(d < 1 for d in self.dilations):
            raise MimickError(f"dilations must be >= 1, got {self.dilations}")
        lo, hi = self.noise_sigma
        if not (0.0 <= lo <= hi <= 0.2):
            raise MimickError(f"noise sigma range must lie within [0, 0.2], got {self.noise_sigma}")
        qlo, qhi = self.jpeg_quality
        if not (1 <= qlo <= qhi <= 100):
            raise MimickError(f"jpeg quality range must lie within [1,100], got {self.jpeg_quality}")
        if self.jpeg_mode not in ("soft", "hard"):
            raise MimickError(f"jpeg_mode must be soft|hard, got {self.jpeg_mode!r}")


def _conv3(cin: int, cout: int, dilation: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=dilation, dilation=dilation,
                     padding_mode="reflect")


class GuidanceNet(nn.Module):
    """Extracts a global style vector (scale||shift, length 2C) from the
    channel-concatenated LR / downscaled-HR pair."""

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        layers = [_conv3(6, width), nn.ReLU(inplace=True)]
        for _ in range(3):
            layers += [_conv3(width, width), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(width, 2 * width)

    def forward(self, lr: torch.Tensor, hr_down: torch.Tensor) -> torch.Tensor:
        if lr.shape != hr_down.shape:
            raise MimickError(f"guidance inputs differ in shape: "
                              f"{tuple(lr.shape)} vs {tuple(hr_down.shape)}")
        feat = self.body(torch.cat([lr, hr_down], dim=1))
        pooled = feat.mean(dim=(2, 3))
        return self.head(pooled)


class TransferNet(nn.Module):
    """Rewrites the downscaled HR under guidance-vector modulation.

    Multi-dilation 3x3 encoder for context, 1x1-only decoder to avoid any
    pixel shifting, global residual skip from the input.
    """

    def __init__(self, width: int, dilations: tuple[int, ...]):
        super().__init__()
        self.width = width
        self.head = _conv3(3, width)
        self.branches = nn.ModuleList([_conv3(width, width, d) for d in dilations])
        self.fuse = nn.Conv2d(width * len(dilations), width, 1)
        # nonlinearities sit between the 1x1 stages only: a rectifier after
        # the last stage would clamp the projection input to >= 0, and leaky
        # slopes keep gradient alive through the zero-initialized projection
        self.decoder = nn.Sequential(
            nn.Conv2d(width, width, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(width, width, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(width, width, 1))
        self.proj = nn.Conv2d(width, 3, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.act = nn.ReLU(inplace=True)

    def forward(self, hr_down: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        if guidance.shape[-1] != 2 * self.width:
            raise MimickError(f"guidance length {guidance.shape[-1]} does not match "
                              f"2*feature_width = {2 * self.width}")
        if guidance.dim() == 1:
            guidance = guidance.unsqueeze(0)
        gamma, beta = guidance.chunk(2, dim=-1)
        feat = self.head(hr_down)
        feat = feat * (1.0 + gamma[..., None, None]) + beta[..., None, None]
        feat = self.act(feat)
        feat = self.fuse(torch.cat([b(feat) for b in self.branches], dim=1))
        feat = self.act(feat)
        feat = self.decoder(feat)
        return hr_down + self.proj(feat)


class MimickModule(nn.Module):
    def __init__(self, cfg: MimickConfig | None = None):
        super().__init__()
        self.cfg = cfg or MimickConfig()
        self.cfg.validate()
        self.guidance = GuidanceNet(self.cfg.feature_width)
        self.transfer = TransferNet(self.cfg.feature_width, tuple(self.cfg.dilations))

    def guidance_forward(self, lr: torch.Tensor, hr_down: torch.Tensor) -> torch.Tensor:
        return self.guidance(lr, hr_down)

    def transfer_forward(self, hr_down: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        return self.transfer(hr_down, guidance)

    def forward(self, lr: torch.Tensor, hr_down: torch.Tensor,
                rng: np.random.Generator | None = None,
                add_noise: bool = False) -> torch.Tensor:
        out = self.transfer(hr_down, self.guidance(lr, hr_down))
        if add_noise:
            if rng is None:
                rng = np.random.default_rng(self.cfg.seed)
            out = inject_noise(out, self.cfg, rng)
        return out.clamp(0.0, 1.0)


def inject_noise(img: torch.Tensor, cfg: MimickConfig,
                 rng: np.random.Generator) -> torch.Tensor:
    """Gaussian + JPEG noise, per-image draws; degenerate config is identity.

    The gaussian field is sampled outside autodiff and enters as a constant
    offset; JPEG goes through the differentiable approximation.
    """
    cfg.validate()
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
    out = img
    if cfg.noise_gaussian_enabled and cfg.noise_sigma[1] > 0:
        fields = []
        for _ in range(out.shape[0]):
            sigma = float(rng.uniform(*cfg.noise_sigma))
            fields.append(rng.normal(0.0, sigma, tuple(out.shape[1:])).astype(np.float32))
        out = out + torch.from_numpy(np.stack(fields)).to(out.device)
    if cfg.noise_jpeg_enabled and cfg.jpeg_quality != (100, 100):
        parts = []
        for i in range(out.shape[0]):
            q = int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1))
            parts.append(jpeg_approx(out[i:i + 1], q, cfg.jpeg_mode))
        out = torch.cat(parts)
    out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if squeeze else out
