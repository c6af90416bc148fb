"""Effective overlap K(x) after reorganization as a function of k, against k (2 ln(alpha0/tau)/5)^1.5."""
import argparse

import numpy as np

from splatreorg import scenes
from splatreorg.diagnostics import TAU_K, effective_overlap
from splatreorg.reorg import reorganize
from splatreorg.resample import ResamplePlan


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ks", type=int, nargs="+", default=[3, 10, 20, 40, 80])
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--alpha0", type=float, default=0.01)
    ap.add_argument("--contrast", type=float, default=1.0)
    args = ap.parse_args()
    const = (2 * np.log(args.alpha0 / TAU_K) / 5) ** 1.5
    gs = scenes.uniform_set(args.n, seed=0, contrast=args.contrast)
    probes = scenes.interior_probes(400, seed=0, contrast=args.contrast)
    print(f"analytic large-k constant K/k = {const:.4f}; acceptance band [k/4, 4k]")
    print(f"{'k':>4} {'min':>5} {'median':>7} {'mean':>7} {'max':>5} {'mean/k':>7} {'frac<k/4':>9}")
    for k in args.ks:
        out = reorganize(gs, ResamplePlan(k=k, alpha0=args.alpha0, seed=0)).output
        c = effective_overlap(out, probes)
        print(f"{k:4d} {c.min():5d} {np.median(c):7.1f} {c.mean():7.2f} {c.max():5d} {c.mean() / k:7.3f} "
              f"{np.mean(c < k / 4):9.2f}")


if __name__ == "__main__":
    main()
