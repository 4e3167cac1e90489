#!/usr/bin/env python3
"""Refit the NIQE natural-scene model over a folder of pristine images.

Usage: fit_niqe_params.py <image_dir> <out.npz>

Without arguments, regenerates the packaged parameter file from the
scikit-image sample photographs.
"""
import sys
from pathlib import Path

import numpy as np

from mimicsr.data import load_image
from mimicsr.metrics import fit_niqe_params, save_niqe_params

_SKIMAGE_SET = [
    "astronaut", "chelsea", "coffee", "immunohistochemistry", "rocket", "cat",
    "hubble_deep_field", "retina", "camera", "moon", "coins", "clock", "horse",
    "grass", "gravel", "brick", "colorwheel",
]


def _skimage_images():
    import skimage.data as d
    imgs = []
    for name in _SKIMAGE_SET:
        img = getattr(d, name)()
        imgs.append(img[..., :3].astype(np.float32) / 255.0 if img.ndim == 3
                    else img.astype(np.float32) / 255.0)
    return imgs


def main(argv):
    if len(argv) == 3:
        src, out = Path(argv[1]), Path(argv[2])
        paths = sorted(p for p in src.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not paths:
            print(f"no images under {src}", file=sys.stderr)
            return 2
        images = [load_image(p) for p in paths]
    elif len(argv) == 1:
        images = _skimage_images()
        out = Path(__file__).resolve().parents[1] / "src/mimicsr/data/niqe_params.npz"
    else:
        print(__doc__, file=sys.stderr)
        return 1
    params = fit_niqe_params(images)
    save_niqe_params(params, out)
    print(f"wrote {out} from {len(images)} images")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
