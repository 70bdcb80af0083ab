"""Refit the shipped GSM prior from derivative statistics of a few photos.

Uses the public-domain sample images bundled with scikit-image.
"""

import argparse

import numpy as np
from skimage import data

from blurmotion.image import to_gradient_domain, to_luma, downsample
from blurmotion.priors import gsm_em

PHOTOS = ["camera", "astronaut", "coffee", "chelsea", "rocket"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="src/blurmotion/data/gsm_default.txt")
    ap.add_argument("--J", type=int, default=4)
    ap.add_argument("--scales", type=int, default=2, help="pyramid levels sampled per photo")
    ap.add_argument("--samples", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    samples = []
    for name in PHOTOS:
        img = getattr(data, name)().astype(np.float64)
        # undo 8-bit quantization, otherwise exact-zero differences form a spike
        img = (img + rng.uniform(-0.5, 0.5, img.shape)) / 255.0
        img = to_luma(img)
        for _ in range(args.scales):
            g = to_gradient_domain(img)
            samples += [g.dx[:, :-1].ravel(), g.dy[:-1, :].ravel()]
            img = downsample(img)
    samples = np.concatenate(samples)
    samples = rng.choice(samples, size=min(args.samples, samples.size), replace=False)
    prior, trace = gsm_em(samples, args.J)
    prior.save(args.out)
    print(f"fitted {prior.J} components on {samples.size} responses, loglik {trace[-1]:.1f}")
    for p, s in zip(prior.pi, prior.sigma):
        print(f"  pi={p:.4f} sigma={s:.5f}")


if __name__ == "__main__":
    main()
