"""Dataset ingestion, patch augmentation, and the synthetic-misalignment generator.

The synthetic generator degrades an HR image twice with shared random draws:
once after a random affine + color transform (the "captured" LR) and once
without it (the aligned ground-truth LR). The pair gives an alignment oracle
that real zoom-lens datasets cannot provide.
"""
from __future__ import annotations

import io as _io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import cv2
import numpy as np
from PIL import Image as PILImage

from .imgproc import (
    apply_dihedral,
    float_to_uint8,
    resize_bicubic,
    uint8_to_float,
)

VALID_SCALES = (2, 3, 4)


class DataError(Exception):
    """Raised for malformed datasets, manifests, or generator specs."""


def load_image(path: str | Path) -> np.ndarray:
    """8-bit image file -> HxWx3 float array in [0,1]."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"image not found: {p}")
    with PILImage.open(p) as im:
        arr = np.asarray(im.convert("RGB"))
    return uint8_to_float(arr)


def save_image(path: str | Path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(float_to_uint8(img)).save(path)


@dataclass
class PairedSample:
    lr: np.ndarray
    hr: np.ndarray
    hr_down: np.ndarray
    aligned_lr_truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def scale(self) -> int:
        return self.hr.shape[0] // self.lr.shape[0]

    def validate(self) -> None:
        h, w = self.lr.shape[:2]
        s = self.scale
        if self.hr.shape[:2] != (s * h, s * w):
            raise DataError(
                f"hr shape {self.hr.shape[:2]} is not an integer multiple "
                f"of lr shape {(h, w)}")
        if self.hr_down.shape[:2] != (h, w):
            raise DataError("hr_down must match lr dimensions")
        if self.aligned_lr_truth is not None and self.aligned_lr_truth.shape[:2] != (h, w):
            raise DataError("aligned_lr_truth must match lr dimensions")


@dataclass
class MisalignSpec:
    """Parameter ranges for the synthetic capture model. All ranges are (lo, hi).

    translation is in HR-grid pixels; rotation in degrees; blur_sigma in
    LR-grid pixels (applied at HR resolution as sigma*scale before the
    downscale, mimicking optics that act on the LR exposure).
    """
    translation: tuple[float, float] = (0.0, 0.0)
    rotation: tuple[float, float] = (0.0, 0.0)
    scale_jitter: tuple[float, float] = (1.0, 1.0)
    color_gain: tuple[float, float] = (1.0, 1.0)
    brightness_offset: tuple[float, float] = (0.0, 0.0)
    gamma: tuple[float, float] = (1.0, 1.0)
    blur_sigma: tuple[float, float] = (0.0, 0.0)
    noise_sigma: tuple[float, float] = (0.0, 0.0)
    jpeg_quality: tuple[int, int] = (100, 100)
    jpeg_enabled: bool = False
    rng_seed: int = 0

    def validate(self) -> None:
        for name in ("translation", "rotation", "scale_jitter", "color_gain",
                     "brightness_offset", "gamma", "blur_sigma", "noise_sigma",
                     "jpeg_quality"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DataError(f"misalign spec range {name} is not ordered: {lo} > {hi}")
        qlo, qhi = self.jpeg_quality
        if not (1 <= qlo <= qhi <= 100):
            raise DataError(f"jpeg_quality must lie within [1,100], got {self.jpeg_quality}")

    @classmethod
    def from_dict(cls, d: dict) -> "MisalignSpec":
        spec = cls(**{k: tuple(v) if isinstance(v, (list, tuple)) else v
                      for k, v in d.items()})
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ManifestEntry:
    lr_path: str
    hr_path: str
    truth_path: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    scale: int
    split: str = "train"

    def validate(self, root: Path | None = None) -> None:
        if self.scale not in VALID_SCALES:
            raise DataError(f"scale must be one of {VALID_SCALES}, got {self.scale}")
        if self.split not in ("train", "val", "test"):
            raise DataError(f"unknown split {self.split!r}")
        if root is not None:
            for e in self.entries:
                for p in (e.lr_path, e.hr_path, e.truth_path):
                    if p is not None and not (root / p).is_file():
                        raise DataError(f"manifest path not resolvable: {root / p}")


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps({"scale": manifest.scale, "split": manifest.split}) + "\n")
        for e in manifest.entries:
            f.write(json.dumps(asdict(e)) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"empty manifest: {path}")
    head = json.loads(lines[0])
    entries = [ManifestEntry(**json.loads(ln)) for ln in lines[1:]]
    m = DatasetManifest(entries=entries, scale=int(head["scale"]),
                        split=head.get("split", "train"))
    m.validate(root=path.parent)
    return m


def load_pair(entry: ManifestEntry, scale: int, root: str | Path = ".") -> PairedSample:
    root = Path(root)
    hr = load_image(root / entry.hr_path)
    lr = load_image(root / entry.lr_path)
    truth = load_image(root / entry.truth_path) if entry.truth_path else None
    sample = PairedSample(lr=lr, hr=hr, hr_down=downscale_hr(hr, scale),
                          aligned_lr_truth=truth,
                          meta={"source": entry.hr_path})
    sample.validate()
    if sample.scale != scale:
        raise DataError(f"pair scale {sample.scale} != manifest scale {scale}")
    return sample


def downscale_hr(hr: np.ndarray, scale: int) -> np.ndarray:
    """Antialiased bicubic downscale of HR to the LR grid."""
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise DataError(f"HR dimensions {h}x{w} not divisible by scale {scale}")
    out = resize_bicubic(hr, h // scale, w // scale)
    return np.clip(out, 0.0, 1.0)


def crop_augment(pair: PairedSample, patch: int, rng: np.random.Generator) -> PairedSample:
    """Random crop (patch is the LR-side size) + random flip/rotation.

    All members of the sample share one crop offset (scaled on the HR side)
    and one dihedral code.
    """
    h, w = pair.lr.shape[:2]
    if patch > h or patch > w:
        raise DataError(f"patch {patch} larger than LR image {h}x{w}")
    s = pair.scale
    y0 = int(rng.integers(0, h - patch + 1))
    x0 = int(rng.integers(0, w - patch + 1))
    code = int(rng.integers(0, 8))

    def crop_lr(img):
        return apply_dihedral(img[y0:y0 + patch, x0:x0 + patch], code)

    hr_crop = pair.hr[s * y0:s * (y0 + patch), s * x0:s * (x0 + patch)]
    out = PairedSample(
        lr=crop_lr(pair.lr),
        hr=apply_dihedral(hr_crop, code),
        hr_down=crop_lr(pair.hr_down),
        aligned_lr_truth=(crop_lr(pair.aligned_lr_truth)
                          if pair.aligned_lr_truth is not None else None),
        meta=dict(pair.meta, crop=(y0, x0), dihedral=code),
    )
    return out


def _jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    buf = _io.BytesIO()
    PILImage.fromarray(float_to_uint8(img)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with PILImage.open(buf) as im:
        return uint8_to_float(np.asarray(im.convert("RGB")))


def _color_transform(img: np.ndarray, gains: np.ndarray, offset: float,
                     gamma: float) -> np.ndarray:
    out = np.power(np.clip(img, 0.0, 1.0), gamma)
    out = out * gains[None, None, :] + offset
    return np.clip(out, 0.0, 1.0)


def _degrade(img: np.ndarray, scale: int, blur_sigma_lr: float,
             noise: np.ndarray | None, jpeg_quality: int | None) -> np.ndarray:
    """blur -> downscale -> gaussian noise -> jpeg, shared-draw friendly."""
    out = img
    if blur_sigma_lr > 0:
        out = cv2.GaussianBlur(out, (0, 0), sigmaX=blur_sigma_lr * scale,
                               borderType=cv2.BORDER_REFLECT)
    out = np.clip(resize_bicubic(out, out.shape[0] // scale, out.shape[1] // scale),
                  0.0, 1.0)
    if noise is not None:
        out = np.clip(out + noise, 0.0, 1.0)
    if jpeg_quality is not None:
        out = _jpeg_roundtrip(out, jpeg_quality)
    return out


def synth_misalign(hr: np.ndarray, spec: MisalignSpec, scale: int,
                   rng: np.random.Generator) -> PairedSample:
    """Build a misaligned LR plus its aligned ground truth from one HR image.

    lr               = degrade(affine(color(hr))) downscaled
    aligned_lr_truth = degrade(hr) downscaled, with identical degradation draws
    """
    spec.validate()
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise DataError(f"HR dimensions {h}x{w} not divisible by scale {scale}")

    u = rng.uniform
    tx, ty = u(*spec.translation), u(*spec.translation)
    angle = u(*spec.rotation)
    sj = u(*spec.scale_jitter)
    gains = np.array([u(*spec.color_gain) for _ in range(3)], dtype=np.float64)
    offset = u(*spec.brightness_offset)
    gamma = u(*spec.gamma)
    blur_sigma = u(*spec.blur_sigma)
    noise_sigma = u(*spec.noise_sigma)
    quality = int(rng.integers(spec.jpeg_quality[0], spec.jpeg_quality[1] + 1)) \
        if spec.jpeg_enabled else None

    # recoverable-margin check: worst-case displacement of any pixel
    radius = 0.5 * float(np.hypot(h, w))
    disp = (max(abs(spec.translation[0]), abs(spec.translation[1]))
            + radius * np.sin(np.deg2rad(max(abs(spec.rotation[0]), abs(spec.rotation[1]))))
            + radius * max(abs(spec.scale_jitter[0] - 1), abs(spec.scale_jitter[1] - 1)))
    if disp > min(h, w) / 4:
        raise DataError(
            f"misalignment spec displaces pixels by up to {disp:.1f}px, beyond the "
            f"recoverable margin {min(h, w) / 4:.1f}px for a {h}x{w} image")

    warped = hr
    identity_affine = (tx == 0 and ty == 0 and angle == 0 and sj == 1)
    if not identity_affine:
        m = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), angle, sj)
        m[0, 2] += tx
        m[1, 2] += ty
        warped = cv2.warpAffine(hr, m, (w, h), flags=cv2.INTER_LINEAR,
                                borderMode=cv2.BORDER_REFLECT)
    colored = _color_transform(warped, gains, offset, gamma)

    noise = rng.normal(0.0, noise_sigma, (h // scale, w // scale, 3)).astype(np.float32) \
        if noise_sigma > 0 else None
    lr = _degrade(colored, scale, blur_sigma, noise, quality)
    truth = _degrade(hr, scale, blur_sigma, noise, quality)

    sample = PairedSample(
        lr=lr.astype(np.float32), hr=hr.astype(np.float32),
        hr_down=downscale_hr(hr, scale),
        aligned_lr_truth=truth.astype(np.float32),
        meta={
            "translation": (tx, ty), "rotation": angle, "scale_jitter": sj,
            "color_gain": gains.tolist(), "brightness_offset": offset,
            "gamma": gamma, "blur_sigma": blur_sigma, "noise_sigma": noise_sigma,
            "jpeg_quality": quality,
        },
    )
    sample.validate()
    return sample


def generate_synthetic_dataset(src_dir: str | Path, out_dir: str | Path,
                               spec: MisalignSpec, scale: int, seed: int,
                               split: str = "train") -> DatasetManifest:
    """Apply synth_misalign to every image under src_dir; write a PNG tree
    plus a manifest into out_dir. Deterministic given seed."""
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    paths = sorted(p for p in src_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise DataError(f"no images found under {src_dir}")
    entries = []
    root_rng = np.random.default_rng(seed)
    seeds = root_rng.integers(0, 2 ** 31, size=len(paths))
    for path, s in zip(paths, seeds):
        hr = load_image(path)
        h, w = hr.shape[:2]
        hr = hr[:h - h % scale, :w - w % scale]
        sample = synth_misalign(hr, spec, scale, np.random.default_rng(int(s)))
        stem = path.stem
        lr_p, hr_p, tr_p = (f"lr/{stem}.png", f"hr/{stem}.png", f"truth/{stem}.png")
        save_image(out_dir / lr_p, sample.lr)
        save_image(out_dir / hr_p, sample.hr)
        save_image(out_dir / tr_p, sample.aligned_lr_truth)
        entries.append(ManifestEntry(lr_path=lr_p, hr_path=hr_p, truth_path=tr_p))
    manifest = DatasetManifest(entries=entries, scale=scale, split=split)
    save_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest
