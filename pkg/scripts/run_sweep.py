"""Initialization-sensitivity sweep on the horizontal-motion scene; writes sweep.tsv."""

import argparse
from pathlib import Path

from blurmotion.pipeline import Config
from blurmotion.synth import SWEEP_INITS, sensitivity_sweep, sweep_scene, write_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/sweep")
    ap.add_argument("--config", default=None, help="key = value config file")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.002)
    ap.add_argument("--inits", type=float, nargs="+", default=list(SWEEP_INITS))
    args = ap.parse_args()

    cfg = Config.from_file(args.config, seed=args.seed) if args.config else Config(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = sensitivity_sweep(cfg, sweep_scene(args.noise, args.seed), tuple(args.inits),
                              progress=lambda d, m, r: print(f"{d:10s} {m:g}: AEP {r.aep:.2f} a1 {r.a[0]:.2f} "
                                                             f"a4 {r.a[3]:.2f} ({r.seconds:.0f} s)", flush=True))
    write_sweep(out / "sweep.tsv", table, tuple(args.inits))


if __name__ == "__main__":
    main()
