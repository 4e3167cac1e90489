"""Optical flow between the downscaled HR and the LR patch.

The flow maps the moving image (LR) onto the reference (downscaled HR):
backward-warping LR by the flow approximates the reference. Flow is never
part of the autodiff graph; both backends are frozen.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from .imgproc import luminance


class FlowError(Exception):
    pass


@dataclass
class FlowField:
    """Per-pixel displacement in pixels; u is the x component, v the y."""
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise FlowError("u and v must share a shape")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise FlowError("flow contains non-finite values")

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, h: int, w: int) -> "FlowField":
        return cls(np.zeros((h, w), np.float32), np.zeros((h, w), np.float32))


class ClassicalFlowBackend:
    """Coarse-to-fine pyramidal flow (Farneback), no weights required."""

    kind = "classical"
    trainable = False

    def __init__(self, levels: int = 3, winsize: int = 13, iterations: int = 5):
        self.levels = levels
        self.winsize = winsize
        self.iterations = iterations

    def __call__(self, ref: np.ndarray, mov: np.ndarray) -> FlowField:
        ref_g = np.clip(luminance(ref) * 255.0, 0, 255).astype(np.uint8)
        mov_g = np.clip(luminance(mov) * 255.0, 0, 255).astype(np.uint8)
        h, w = ref_g.shape
        # pyramid levels that keep the coarsest scale meaningful
        levels = max(1, min(self.levels, int(np.log2(max(1, min(h, w) // 16))) + 1))
        win = min(self.winsize, max(5, min(h, w) // 2 | 1))
        flow = cv2.calcOpticalFlowFarneback(
            ref_g, mov_g, None, pyr_scale=0.5, levels=levels, winsize=win,
            iterations=self.iterations, poly_n=5, poly_sigma=1.1,
            flags=cv2.OPTFLOW_FARNEBACK_GAUSSIAN)
        return FlowField(flow[..., 0].astype(np.float32), flow[..., 1].astype(np.float32))


class LearnedFlowBackend:
    """Frozen conv flow estimator restored from a weights file."""

    kind = "learned"
    trainable = False

    def __init__(self, weights_path: str | Path):
        weights_path = Path(weights_path) if weights_path else None
        if weights_path is None or not weights_path.is_file():
            raise FlowError(
                f"learned flow backend requires a weights file, got {weights_path}; "
                "set flow.backend=classical to run without weights")
        self.net = _FlowNet()
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        self.net.load_state_dict(state)
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def __call__(self, ref: np.ndarray, mov: np.ndarray) -> FlowField:
        x = np.concatenate([ref, mov], axis=2).transpose(2, 0, 1)[None]
        with torch.no_grad():
            out = self.net(torch.from_numpy(np.ascontiguousarray(x)).float())
        flow = out[0].numpy()
        return FlowField(flow[0].astype(np.float32), flow[1].astype(np.float32))


class _FlowNet(torch.nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        layers = [torch.nn.Conv2d(6, width, 3, padding=1), torch.nn.ReLU()]
        for _ in range(3):
            layers += [torch.nn.Conv2d(width, width, 3, padding=1), torch.nn.ReLU()]
        layers += [torch.nn.Conv2d(width, 2, 3, padding=1)]
        self.body = torch.nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


def make_backend(kind: str = "classical", weights: str | None = None):
    if kind == "classical":
        return ClassicalFlowBackend()
    if kind == "learned":
        return LearnedFlowBackend(weights)
    raise FlowError(f"unknown flow backend {kind!r} (choose learned|classical)")


def compute_flow(ref: np.ndarray, mov: np.ndarray, backend) -> FlowField:
    """psi such that warping mov by psi approximates ref."""
    if ref.shape != mov.shape:
        raise FlowError(f"flow inputs differ in shape: {ref.shape} vs {mov.shape}")
    flow = backend(ref, mov)
    if flow.shape != ref.shape[:2]:
        raise FlowError("backend returned flow of wrong size")
    return flow
