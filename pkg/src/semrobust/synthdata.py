"""Rendered-digit corpus generator.

The toolkit consumes MNIST-layout IDX files supplied by the user. When no
such files are at hand (e.g. an offline machine), this module renders a
stand-in corpus of grayscale digits 0-9 from system vector fonts with
random rotation, shift, scale, stroke intensity, blur and pixel noise.
Output matches the expected layout: 28x28 ubyte IDX images + label files
plus a SHA-256 manifest.

Usage:  python -m semrobust.synthdata --out data/ --seed 0
"""

import argparse
import os
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from .dataio import RawDataset, save_raw_dataset, write_checksum_manifest

SIDE = 28
_CANVAS = 48  # render large, rotate, then crop the center

_FONT_FILES = [
    "DejaVuSans.ttf",
    "DejaVuSans-Bold.ttf",
    "DejaVuSerif.ttf",
    "DejaVuSerif-Bold.ttf",
    "DejaVuSansMono.ttf",
    "DejaVuSansMono-Bold.ttf",
]

DEFAULT_FILES = {
    "train_images": "train-images.idx",
    "train_labels": "train-labels.idx",
    "test_images": "test-images.idx",
    "test_labels": "test-labels.idx",
}


def _font_dir():
    override = os.environ.get("SEMROBUST_FONT_DIR")
    if override:
        return Path(override)
    try:
        import matplotlib
        return Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    except ImportError:
        pass
    for candidate in ("/usr/share/fonts/truetype/dejavu", "/usr/share/fonts"):
        p = Path(candidate)
        if p.exists():
            return p
    raise RuntimeError("no TTF font directory found; set SEMROBUST_FONT_DIR")


def _load_fonts():
    fdir = _font_dir()
    found = {}
    for name in _FONT_FILES:
        hits = list(fdir.rglob(name))
        if hits:
            found[name] = hits[0]
    if not found:
        raise RuntimeError(f"none of {_FONT_FILES} under {fdir}")
    cache = {}

    def get(name, size):
        key = (name, size)
        if key not in cache:
            cache[key] = ImageFont.truetype(str(found[name]), size)
        return cache[key]

    return sorted(found), get


def _render_one(digit, font, angle, dx, dy, ink, blur, noise, rng):
    canvas = Image.new("L", (_CANVAS, _CANVAS), 0)
    draw = ImageDraw.Draw(canvas)
    draw.text((_CANVAS / 2 + dx, _CANVAS / 2 + dy), str(digit),
              font=font, fill=ink, anchor="mm")
    canvas = canvas.rotate(angle, resample=Image.BILINEAR, center=(_CANVAS / 2, _CANVAS / 2))
    if blur > 0:
        canvas = canvas.filter(ImageFilter.GaussianBlur(blur))
    lo = (_CANVAS - SIDE) // 2
    img = np.asarray(canvas, dtype=np.float64)[lo:lo + SIDE, lo:lo + SIDE]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def make_corpus(n, seed):
    """Render n labeled digits; labels are drawn uniformly."""
    rng = np.random.default_rng(seed)
    names, get_font = _load_fonts()
    images = np.empty((n, SIDE, SIDE), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    for i in range(n):
        font = get_font(names[rng.integers(len(names))],
                        int(rng.integers(24, 34)))
        images[i] = _render_one(
            digit=int(labels[i]),
            font=font,
            angle=float(rng.uniform(-20.0, 20.0)),
            dx=float(rng.uniform(-2.5, 2.5)),
            dy=float(rng.uniform(-2.5, 2.5)),
            ink=int(rng.integers(190, 256)),
            blur=float(rng.uniform(0.0, 0.7)),
            noise=float(rng.uniform(2.0, 9.0)),
            rng=rng,
        )
    return RawDataset(images=images, labels=labels)


def write_corpus(out_dir, n_train=12000, n_test=2400, seed=0):
    """Render train and test splits and write IDX files + checksum manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = make_corpus(n_train, seed)
    test = make_corpus(n_test, seed + 1)
    save_raw_dataset(train, out_dir / DEFAULT_FILES["train_images"],
                     out_dir / DEFAULT_FILES["train_labels"])
    save_raw_dataset(test, out_dir / DEFAULT_FILES["test_images"],
                     out_dir / DEFAULT_FILES["test_labels"])
    write_checksum_manifest(out_dir, sorted(DEFAULT_FILES.values()))
    return out_dir


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--n-train", type=int, default=12000)
    parser.add_argument("--n-test", type=int, default=2400)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    out = write_corpus(args.out, args.n_train, args.n_test, args.seed)
    print(f"wrote corpus to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
