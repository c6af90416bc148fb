"""Density error and seed variance of the kNN mixture estimate q_M as k varies.

Prints, per k: the median over seeds of the per-seed median relative error,
the error of the across-seed median estimate, and the seed variance averaged
over probes.  Also prints the same error for an isotropic kernel with the same
determinant and for a fixed bandwidth, which separates estimator variance
from sampling.
"""
import argparse

import numpy as np

from splatreorg import scenes
from splatreorg.diagnostics import mixture_density
from splatreorg.reorg import floor_covariances, second_moments
from splatreorg.resample import ResamplePlan, sample
from splatreorg.spatial_index import PointIndex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--samples", type=int, default=50_000)
    ap.add_argument("--ks", type=int, nargs="+", default=[20, 50, 100, 200])
    ap.add_argument("--probes", type=int, default=200)
    args = ap.parse_args()

    gs, mix = scenes.mixture_set(), scenes.mixture()
    x, _ = scenes.probes_in_support(mix, args.probes, 0)
    p = mix.pdf(x)
    kmax = max(args.ks)
    q = {k: [] for k in args.ks}
    iso = {k: [] for k in args.ks}
    for s in range(args.seeds):
        c = sample(gs, ResamplePlan(samples=args.samples, seed=s)).centers
        nbr, _ = PointIndex(c).knn_batch(c, kmax, exclude=np.arange(len(c)))
        for k in args.ks:
            covs, _ = floor_covariances(second_moments(c, nbr[:, :k]))
            q[k].append(mixture_density(x, c, covs, cutoff=8.0))
            r2 = np.linalg.det(covs) ** (1 / 3)
            iso[k].append(mixture_density(x, c, r2[:, None, None] * np.eye(3), cutoff=8.0))
    print(f"{'k':>5} {'median err':>11} {'seed-median est':>16} {'mean var':>11} {'isotropic err':>14}")
    for k in args.ks:
        a, b = np.array(q[k]), np.array(iso[k])
        err = np.median(np.median(np.abs(a - p) / p, axis=1))
        ens = np.median(np.abs(np.median(a, axis=0) - p) / p)
        ierr = np.median(np.median(np.abs(b - p) / p, axis=1))
        print(f"{k:5d} {err:11.4f} {ens:16.4f} {a.var(axis=0).mean():11.3e} {ierr:14.4f}")


if __name__ == "__main__":
    main()
