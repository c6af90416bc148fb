"""Ray transmittance profiles, overlap energy, effective overlap, density consistency
and the local curvature proxy, all computed on an immutable GaussianSet."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import GaussianSet, sigmoid
from .spatial_index import PointIndex

TAU_K = 1.0 / 255.0
LOG_2PI = math.log(2.0 * math.pi)
_PAIR_CHUNK = 1 << 18


# ---------------------------------------------------------------- mixtures

def _chol_parts(covs: np.ndarray):
    L = np.linalg.cholesky(covs)
    Linv = np.linalg.inv(L)
    P = np.swapaxes(Linv, -1, -2) @ Linv
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    return P, logdet


def mixture_density(x, centers, covs, weights=None, chunk: int = 16,
                    cutoff: float | None = None) -> np.ndarray:
    """sum_j w_j N(x | centers_j, covs_j) for every row of x (w_j = 1/M by default).

    With ``cutoff`` set, terms whose Mahalanobis distance exceeds ``cutoff`` are
    dropped (each is below e^{-cutoff^2/2} of its own peak); candidates come
    from kd-tree ball queries grouped by kernel radius.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    centers = np.asarray(centers, dtype=np.float64)
    m, dim = centers.shape
    w = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    P, logdet = _chol_parts(covs)
    lognorm = np.log(w) - 0.5 * (dim * LOG_2PI + logdet)
    if cutoff is not None:
        return _culled_density(x, centers, covs, P, lognorm, cutoff)
    out = np.empty(len(x))
    for lo in range(0, len(x), chunk):
        d = x[lo:lo + chunk, None, :] - centers[None]
        out[lo:lo + chunk] = np.exp(lognorm[None] - 0.5 * _quad(P[None], d)).sum(-1)
    return out


def _quad(P, d):
    """d^T P d over the trailing axis, written out to avoid a 3-operand einsum."""
    dim = d.shape[-1]
    q = np.zeros(d.shape[:-1])
    for i in range(dim):
        q += P[..., i, i] * d[..., i] ** 2
        for j in range(i + 1, dim):
            q += 2.0 * P[..., i, j] * d[..., i] * d[..., j]
    return q


def _culled_density(x, centers, covs, P, lognorm, cutoff):
    radius = cutoff * np.sqrt(np.linalg.eigvalsh(covs)[:, -1]) * (1 + 1e-9)
    # radius classes a factor 2 apart, one tree each
    cls = np.floor(np.log2(radius / radius.min())).astype(np.int64)
    groups = []
    for c in np.unique(cls):
        members = np.flatnonzero(cls == c)
        groups.append((members, PointIndex(centers[members]), radius[members].max()))
    out = np.empty(len(x))
    for p, xp in enumerate(x):
        cand = np.sort(np.concatenate([members[np.asarray(tree.within(xp, r), dtype=np.int64)]
                                       for members, tree, r in groups]))
        q = _quad(P[cand], xp - centers[cand])
        keep = q <= cutoff * cutoff
        out[p] = np.exp(lognorm[cand][keep] - 0.5 * q[keep]).sum()
    return out


@dataclass(frozen=True)
class GaussianMixture:
    """Normalized analytic mixture p(x) = sum_i w_i N(x | mu_i, Sigma_i)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    @classmethod
    def from_set(cls, gs: GaussianSet) -> "GaussianMixture":
        a = gs.opacities()
        return cls(a / a.sum(), gs.positions.copy(), gs.covariances())

    def pdf(self, x) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        return mixture_density(x, self.means, self.covs, w / w.sum())

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        comp = rng.choice(len(w), size=count, p=w / w.sum())
        L = np.linalg.cholesky(self.covs)
        return self.means[comp] + np.einsum("mij,mj->mi", L[comp], rng.standard_normal((count, 3)))

    def max_density(self, iters: int = 100) -> float:
        """Largest mode value, found by fixed-point (mean-shift) iteration from every mean."""
        Pinv = np.linalg.inv(self.covs)
        best = 0.0
        for start in self.means:
            x = start.copy()
            for _ in range(iters):
                d = x - self.means
                r = self.weights * np.exp(-0.5 * np.einsum("mi,mij,mj->m", d, Pinv, d)) / \
                    np.sqrt(np.linalg.det(self.covs))
                if r.sum() == 0:
                    break
                A = np.einsum("m,mij->ij", r, Pinv)
                b = np.einsum("m,mij,mj->i", r, Pinv, self.means)
                nx = np.linalg.solve(A, b)
                if np.allclose(nx, x, rtol=0, atol=1e-12):
                    x = nx
                    break
                x = nx
            best = max(best, float(self.pdf(x[None])[0]), float(self.pdf(start[None])[0]))
        return best


# ---------------------------------------------------------------- rays

@dataclass
class RayProfile:
    """Depth-ordered contributors along one ray.

    ``transmittance[i]`` is T before contributor i; the final entry is T after
    all contributors, so ``len(transmittance) == len(indices) + 1``.
    """

    origin: np.ndarray
    direction: np.ndarray
    indices: np.ndarray
    depths: np.ndarray
    alphas: np.ndarray
    transmittance: np.ndarray
    a_model: str = "max-response"

    @property
    def accumulated(self) -> float:
        return float(self.alphas.sum())

    def accumulated_before(self, depth: float) -> float:
        return float(self.alphas[self.depths < depth].sum())

    def transmittance_at(self, depth: float) -> float:
        """T reaching ``depth``: product of (1 - a) over contributors strictly in front."""
        n = int(np.count_nonzero(self.depths < depth))
        return float(self.transmittance[n])

    def count_before(self, depth: float) -> int:
        return int(np.count_nonzero(self.depths < depth))

    def to_dict(self) -> dict:
        return {
            "origin": self.origin.tolist(), "direction": self.direction.tolist(),
            "a_model": self.a_model, "indices": self.indices.tolist(),
            "depths": self.depths.tolist(), "alphas": self.alphas.tolist(),
            "transmittance": self.transmittance.tolist(), "accumulated": self.accumulated,
        }


def ray_profile(gs: GaussianSet, origin, direction, a_model: str = "max-response",
                tau: float = TAU_K) -> RayProfile:
    """Effective opacities along ``origin + t * direction`` (t >= 0).

    ``max-response``: a_i = alpha_i * max_t G_i(o + t d), in closed form.
    ``integrated``: a_i = min(alpha_i * int G_i dt / (sqrt(2 pi) * det(Sigma_i)^(1/6)), 0.999);
    the normalization makes an isotropic Gaussian hit through its center give a_i = alpha_i.
    Contributors with a_i < tau are dropped; depth ties break by index.
    """
    if a_model not in ("max-response", "integrated"):
        raise ValueError(f"unknown a_model {a_model!r}")
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    nd = np.linalg.norm(d)
    if nd == 0 or not np.isfinite(nd):
        raise ValueError("ray direction must be nonzero")
    d = d / nd
    if len(gs) == 0:
        raise ValueError("set is empty")
    covs = gs.covariances()
    P = np.linalg.inv(covs)
    rel = gs.positions - o
    Pd = P @ d
    dPd = Pd @ d
    t_star = np.einsum("mi,mi->m", rel, Pd) / dPd
    q0 = np.einsum("mi,mij,mj->m", rel, P, rel)
    qmin = np.maximum(q0 - t_star * t_star * dPd, 0.0)
    peak = np.exp(-0.5 * qmin)
    alpha = gs.opacities()
    if a_model == "max-response":
        a = alpha * peak
    else:
        sigma_bar = np.linalg.det(covs) ** (1.0 / 6.0)
        a = np.minimum(alpha * peak * np.sqrt(2 * np.pi / dPd) / (np.sqrt(2 * np.pi) * sigma_bar), 0.999)
    keep = (a >= tau) & (t_star >= 0)
    idx = np.flatnonzero(keep)
    order = np.lexsort((idx, t_star[idx]))
    idx = idx[order]
    a_sel = a[idx]
    T = np.concatenate([[1.0], np.cumprod(1.0 - a_sel)])
    return RayProfile(o, d, idx, t_star[idx], a_sel, T, a_model)


def transmittance_bound(m: int, alpha0: float) -> tuple[float, float]:
    """((1 - alpha0)^m, 1 - m * alpha0): lower bound on T behind m contributors with a <= alpha0."""
    if m < 0 or not 0 < alpha0 < 1:
        raise ValueError("need m >= 0 and 0 < alpha0 < 1")
    return (1.0 - alpha0) ** m, 1.0 - m * alpha0


def gradient_ratio(A_p: float, A_q: float, a_q: float, a_p: float) -> float:
    """exp(A_p - A_q) * a_q / a_p; values above 1 mean the reorganized primitive gets more gradient."""
    if a_p == 0:
        raise ZeroDivisionError("a_p must be nonzero")
    return math.exp(A_p - A_q) * (a_q / a_p)


# ---------------------------------------------------------------- overlap

@dataclass(frozen=True)
class OverlapEnergy:
    value: float
    truncation_bound: float
    pairs_evaluated: int
    cutoff_sigma: float
    exact: bool


def _pair_terms(i, j, mu, covs, alpha, cutoff2):
    S = covs[i] + covs[j]
    diff = mu[i] - mu[j]
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError("singular pair covariance Sigma_i + Sigma_j") from e
    z = np.linalg.solve(L, diff[..., None])[..., 0]
    m2 = (z * z).sum(-1)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1)
    val = alpha[i] * alpha[j] * np.exp(-0.5 * (3 * LOG_2PI + logdet + m2))
    if cutoff2 is not None:
        val = np.where(m2 <= cutoff2, val, 0.0)
    return val


def _truncation_bound(alpha, covs, cutoff_sigma):
    # det(A+B) >= 8 sqrt(det A det B) (Minkowski), so every skipped term is at most
    # (2 pi)^-1.5 e^{-c^2/2} 8^{-1/2} (a_i d_i^{-1/4}) (a_j d_j^{-1/4})
    x = alpha * np.linalg.det(covs) ** -0.25
    s = x.sum()
    return float((2 * np.pi) ** -1.5 * math.exp(-0.5 * cutoff_sigma ** 2) / math.sqrt(8.0)
                 * max(s * s - (x * x).sum(), 0.0))


def overlap_energy(gs: GaussianSet, cutoff_sigma: float = 6.0, exact: bool = False,
                   opacities=None) -> OverlapEnergy:
    """O(G) = sum_{i != j} a_i a_j N(mu_i | mu_j, Sigma_i + Sigma_j).

    Culled mode skips pairs whose Mahalanobis separation under Sigma_i + Sigma_j
    exceeds ``cutoff_sigma`` and reports an upper bound on what was skipped.
    ``exact`` evaluates every pair.  Terms are summed in (i, j) order.
    """
    if len(gs) == 0:
        raise ValueError("set is empty")
    if cutoff_sigma <= 0:
        raise ValueError("cutoff_sigma must be positive")
    alpha = gs.opacities() if opacities is None else np.asarray(opacities, dtype=np.float64)
    mu = gs.positions
    covs = gs.covariances()
    n = len(gs)
    if n == 1:
        return OverlapEnergy(0.0, 0.0, 0, cutoff_sigma, exact)

    if exact:
        ii, jj = np.triu_indices(n, k=1)
        cutoff2 = None
        bound = 0.0
    else:
        lam_max = np.linalg.eigvalsh(covs)[:, -1]
        radius = cutoff_sigma * np.sqrt(lam_max + lam_max.max()) * (1 + 1e-9)
        index = PointIndex(mu)
        rows, cols = [], []
        for i in range(n):
            nb = index.within(mu[i], radius[i])
            nb = nb[nb > i]
            rows.append(np.full(len(nb), i, dtype=np.int64))
            cols.append(nb)
        ii, jj = np.concatenate(rows), np.concatenate(cols)
        cutoff2 = cutoff_sigma ** 2
        bound = _truncation_bound(alpha, covs, cutoff_sigma)

    parts = [_pair_terms(ii[lo:lo + _PAIR_CHUNK], jj[lo:lo + _PAIR_CHUNK], mu, covs, alpha, cutoff2)
             for lo in range(0, len(ii), _PAIR_CHUNK)]
    terms = np.concatenate(parts) if parts else np.zeros(0)
    value = 2.0 * math.fsum(terms)
    return OverlapEnergy(value, bound, int(len(terms)), cutoff_sigma, exact)


def overlap_after_reset(gs: GaussianSet, alpha0: float, cutoff_sigma: float = 6.0,
                        exact: bool = False) -> OverlapEnergy:
    """Overlap energy of the same geometry with every opacity replaced by ``alpha0``."""
    return overlap_energy(gs, cutoff_sigma, exact, opacities=np.full(len(gs), alpha0))


def effective_overlap(gs: GaussianSet, probes, tau: float = TAU_K) -> np.ndarray:
    """Per probe, how many primitives satisfy alpha_i * G_i(x) >= tau."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if not np.all(np.isfinite(probes)):
        raise ValueError("probes must be finite")
    counts = np.zeros(len(probes), dtype=np.int64)
    alpha = gs.opacities()
    live = np.flatnonzero(alpha >= tau)
    if len(live) == 0:
        return counts
    covs = gs.covariances()[live]
    P = np.linalg.inv(covs)
    lam_max = np.linalg.eigvalsh(covs)[:, -1]
    reach = np.sqrt(2.0 * np.log(alpha[live] / tau) * lam_max)
    index = PointIndex(gs.positions[live])
    radius = reach.max() * (1 + 1e-9) + 1e-300
    for p, x in enumerate(probes):
        cand = index.within(x, radius)
        d = x - gs.positions[live][cand]
        m2 = np.einsum("mi,mij,mj->m", d, P[cand], d)
        counts[p] = int(np.count_nonzero(alpha[live][cand] * np.exp(-0.5 * m2) >= tau))
    return counts


def density_consistency(centers, covs, mixture: GaussianMixture, probes, min_fraction: float = 0.1,
                        p_max: float | None = None):
    """|q_M(x) - p(x)| / p(x) at probes where p(x) >= min_fraction * max p.

    q_M is the equal-weight mixture of N(x | x_j, Sigma_j).  Returns
    ``(errors, mask)`` with ``errors`` only for the retained probes.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    p = mixture.pdf(probes)
    p_max = mixture.max_density() if p_max is None else p_max
    mask = p >= min_fraction * p_max
    q = mixture_density(probes[mask], centers, covs)
    return np.abs(q - p[mask]) / p[mask], mask


def curvature_proxy(gs: GaussianSet, probe, radius: float) -> tuple[np.ndarray, float]:
    """sum of Sigma_i^{-1} over primitives centered within ``radius`` and its condition number."""
    probe = np.asarray(probe, dtype=np.float64)
    near = np.flatnonzero(np.linalg.norm(gs.positions - probe, axis=1) <= radius)
    if len(near) == 0:
        raise ValueError("no primitives within radius of probe")
    H = np.linalg.inv(gs.covariances()[near]).sum(0)
    H = 0.5 * (H + H.T)
    ev = np.linalg.eigvalsh(H)
    return H, float(ev[-1] / ev[0])


def opacity_summary(gs: GaussianSet) -> dict:
    a = sigmoid(gs.opacity_logits)
    return {"min": float(a.min()), "mean": float(a.mean()), "max": float(a.max())} if len(a) else {}
