"""Independent reference implementations used as test oracles.

These deliberately avoid the package's own code paths: brute-force scans,
scipy's rotation class, numpy's LAPACK eigensolver, mpmath for closed forms.
"""
import mpmath
import numpy as np
from scipy.spatial.transform import Rotation

from splatreorg.model import GaussianSet, logit


def random_unit_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_set(rng, n, appearance_dim=3, spread=3.0, log_scale=(-1.5, 0.3)):
    return GaussianSet(
        positions=rng.uniform(-spread, spread, (n, 3)),
        log_scales=rng.uniform(*log_scale, (n, 3)),
        rotations=random_unit_quats(rng, n),
        opacity_logits=logit(rng.uniform(0.05, 0.95, n)),
        appearance=rng.uniform(-1, 1, (n, appearance_dim)),
    )


def random_spd(rng, n=None, cond=1e3):
    """Random SPD matrices with eigenvalues spread over ``cond``."""
    shape = () if n is None else (n,)
    R = Rotation.random(n, random_state=int(rng.integers(2 ** 31))).as_matrix()
    lam = np.exp(rng.uniform(0, np.log(cond), shape + (3,)))
    return (R * lam[..., None, :]) @ np.swapaxes(R, -1, -2)


def covariance_scipy(log_scale, quat):
    """Sigma = R S^2 R^T with R from scipy (which takes x, y, z, w order)."""
    w, x, y, z = quat
    R = Rotation.from_quat([x, y, z, w]).as_matrix()
    S = np.diag(np.exp(log_scale))
    return R @ S @ S @ R.T


def brute_knn(points, query, k, exclude=None):
    d2 = ((points - query) ** 2).sum(1)
    idx = np.arange(len(points))
    if exclude is not None:
        keep = idx != exclude
        idx, d2 = idx[keep], d2[keep]
    order = np.lexsort((idx, d2))[:k]
    return idx[order], d2[order]


def brute_nearest(points, query):
    d2 = ((points - query) ** 2).sum(1)
    return int(np.flatnonzero(d2 == d2.min())[0])


def gaussian_pdf_mp(x, mean, cov, dps=40):
    """N(x | mean, cov) in mpmath precision."""
    with mpmath.workdps(dps):
        C = mpmath.matrix(cov.tolist())
        d = mpmath.matrix((np.asarray(x) - np.asarray(mean)).tolist())
        q = (d.T * mpmath.inverse(C) * d)[0]
        return (2 * mpmath.pi) ** mpmath.mpf(-1.5) * mpmath.det(C) ** mpmath.mpf(-0.5) * mpmath.exp(-q / 2)


def overlap_energy_brute(positions, covs, alphas):
    """Ordered-pair sum in mpmath, O(N^2)."""
    total = mpmath.mpf(0)
    n = len(positions)
    for i in range(n):
        for j in range(n):
            if i != j:
                total += alphas[i] * alphas[j] * gaussian_pdf_mp(positions[i], positions[j], covs[i] + covs[j])
    return float(total)


def composite(alphas, colors):
    """Front-to-back compositing by explicit loop."""
    T, C = 1.0, np.zeros_like(np.asarray(colors[0], dtype=float)) if len(colors) else 0.0
    for a, c in zip(alphas, colors):
        C = C + T * a * np.asarray(c, dtype=float)
        T *= 1.0 - a
    return C, T
