"""Write the bundled background photos and object cutouts used by the synthetic benchmark.

Everything is derived from the public-domain sample images shipped with
scikit-image, so the repository carries no third-party dataset.
Backgrounds are RGB PNGs, objects are RGBA PNGs whose alpha is the mask.
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import data, transform

BG_SHAPE = (192, 256)
OBJ_SIZE = 96


def crop_resize(img, shape, box=None):
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img[..., :3].astype(np.float64) / 255.0
    if box is not None:
        y0, y1, x0, x1 = box
        img = img[y0:y1, x0:x1]
    return transform.resize(img, shape, order=3, anti_aliasing=True)


def tint(gray, rgb):
    g = gray.astype(np.float64) / 255.0
    return (np.clip(g[..., None] * np.asarray(rgb)[None, None, :], 0, 1) * 255).astype(np.uint8)


def ellipse_mask(n, ry, rx):
    y, x = np.mgrid[0:n, 0:n] - (n - 1) / 2.0
    return ((y / ry) ** 2 + (x / rx) ** 2 <= 1.0).astype(np.float64)


def rounded_rect(n, h, w, rad):
    y, x = np.mgrid[0:n, 0:n] - (n - 1) / 2.0
    dy = np.maximum(np.abs(y) - (h / 2 - rad), 0)
    dx = np.maximum(np.abs(x) - (w / 2 - rad), 0)
    return (dx ** 2 + dy ** 2 <= rad ** 2).astype(np.float64)


def backgrounds():
    return {
        "rocket": crop_resize(data.rocket(), BG_SHAPE, (0, 427, 0, 570)),
        "coffee": crop_resize(data.coffee(), BG_SHAPE, (0, 400, 33, 567)),
        "astronaut": crop_resize(data.astronaut(), BG_SHAPE, (64, 448, 0, 512)),
        "gravel": crop_resize(tint(data.gravel(), (0.75, 0.9, 0.7)), BG_SHAPE, (0, 384, 0, 512)),
        "brick": crop_resize(tint(data.brick(), (1.0, 0.75, 0.6)), BG_SHAPE, (0, 384, 0, 512)),
        "immuno": crop_resize(data.immunohistochemistry(), BG_SHAPE, (0, 384, 0, 512)),
    }


def objects():
    n = OBJ_SIZE
    horse = ~data.horse()
    horse = transform.resize(horse.astype(float), (n, int(round(n * 400 / 328))), order=1, anti_aliasing=True)
    horse = horse[:, (horse.shape[1] - n) // 2:][:, :n]
    logo = data.logo()
    logo_rgb = crop_resize(logo, (n, n))
    logo_a = transform.resize(logo[..., 3].astype(float) / 255.0, (n, n), order=1, anti_aliasing=True)
    out = {
        "cat_horse": (crop_resize(data.chelsea(), (n, n), (20, 300, 100, 380)), horse),
        "logo": (logo_rgb, logo_a),
        "grass_disk": (crop_resize(tint(data.grass(), (0.95, 0.9, 0.3)), (n, n), (0, 256, 0, 256)), ellipse_mask(n, 46, 46)),
        "coins_box": (crop_resize(tint(data.coins(), (1.0, 0.85, 0.35)), (n, n), (0, 300, 40, 340)),
                      rounded_rect(n, 80, 92, 14)),
        "face_ellipse": (crop_resize(data.astronaut(), (n, n), (20, 240, 150, 370)), ellipse_mask(n, 46, 36)),
        "cup_box": (crop_resize(data.coffee(), (n, n), (20, 380, 120, 480)), rounded_rect(n, 92, 72, 10)),
    }
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="src/blurmotion/data/assets")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in backgrounds().items():
        Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8)).save(out / f"bg_{name}.png")
    for name, (rgb, alpha) in objects().items():
        alpha = (np.clip(alpha, 0, 1) > 0.5).astype(np.float64)
        rgba = np.concatenate([np.clip(rgb, 0, 1), alpha[..., None]], axis=2)
        Image.fromarray((rgba * 255).round().astype(np.uint8), "RGBA").save(out / f"obj_{name}.png")
    print(f"wrote assets to {out}")


if __name__ == "__main__":
    main()
