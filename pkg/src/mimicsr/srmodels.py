"""SR model interface: a plugin registry plus a compact reference backbone.

The reference backbone is a residual CNN with pixel-shuffle upsampling,
small enough for CPU training. Heavier architectures register themselves
through `register` without touching the rest of the pipeline.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ModelError(Exception):
    pass


_REGISTRY: dict[str, callable] = {}


def register(name: str, constructor) -> None:
    if name in _REGISTRY:
        raise ModelError(f"model {name!r} is already registered")
    _REGISTRY[name] = constructor


def get(name: str):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ModelError(
            f"unknown model {name!r}; registered models: {sorted(_REGISTRY)}") from None


def build(name: str, scale: int, **kwargs) -> nn.Module:
    model = get(name)(scale=scale, **kwargs)
    if getattr(model, "scale", scale) != scale:
        raise ModelError(f"model {name!r} built with scale {model.scale}, wanted {scale}")
    return model


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class RefSRNet(nn.Module):
    """Residual backbone: 8 blocks, width 64, pixel-shuffle upsampler.

    A zero-initialized output projection on top of a bilinear global skip
    makes the freshly initialized model an (interpolating) identity.
    """

    def __init__(self, scale: int = 4, width: int = 64, blocks: int = 8):
        super().__init__()
        if scale not in (2, 3, 4):
            raise ModelError(f"scale must be 2, 3, or 4, got {scale}")
        self.scale = scale
        self.head = nn.Conv2d(3, width, 3, padding=1)
        self.body = nn.Sequential(*[_ResBlock(width) for _ in range(blocks)])
        self.body_out = nn.Conv2d(width, width, 3, padding=1)
        self.tail = nn.Conv2d(width, 3 * scale * scale, 3, padding=1)
        self.shuffle = nn.PixelShuffle(scale)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = F.interpolate(x, scale_factor=self.scale, mode="bilinear",
                             align_corners=False)
        feat = self.head(x)
        feat = feat + self.body_out(self.body(feat))
        return base + self.shuffle(self.tail(feat))


def sr_forward(model: nn.Module, lr: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """Run the SR model; output is scale x input size, clamped for display."""
    squeeze = lr.dim() == 3
    if squeeze:
        lr = lr.unsqueeze(0)
    out = model(lr)
    expect = (lr.shape[-2] * model.scale, lr.shape[-1] * model.scale)
    if tuple(out.shape[-2:]) != expect:
        raise ModelError(f"model produced {tuple(out.shape[-2:])}, expected {expect}")
    if clamp:
        out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if squeeze else out


register("ref_small", RefSRNet)
