"""Built-in synthetic scenes used by the validation suites, tests and scripts."""
from __future__ import annotations

import numpy as np

from .diagnostics import GaussianMixture
from .model import GaussianSet, logit, params_from_covariance, rotmat_to_quat

# analytic 3-component test mixture: weights follow the opacities
MIXTURE_MEANS = np.array([[0.0, 0.0, 0.0], [5.0, 0.5, 0.0], [1.5, 4.5, 1.5]])
MIXTURE_SCALES = np.array([[1.2, 0.8, 0.6], [0.7, 1.4, 0.9], [1.0, 1.0, 0.7]])
MIXTURE_ANGLES = np.array([0.3, -0.7, 1.1])  # rotation about z
MIXTURE_OPACITIES = np.array([0.9, 0.6, 0.45])


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _unit_appearance(n: int, dim: int = 3, value: float = 0.0) -> np.ndarray:
    return np.full((n, dim), value)


def mixture_set() -> GaussianSet:
    """The analytic mixture itself as a 3-primitive splat set."""
    quats = np.stack([rotmat_to_quat(_rot_z(t)) for t in MIXTURE_ANGLES])
    appearance = np.eye(3)
    return GaussianSet(MIXTURE_MEANS.copy(), np.log(MIXTURE_SCALES), quats,
                       logit(MIXTURE_OPACITIES), appearance)


def mixture() -> GaussianMixture:
    return GaussianMixture.from_set(mixture_set())


def grouped_mixture_set(n: int = 3000, seed: int = 0, scale: float = 0.15):
    """``n`` small isotropic primitives split into three groups, one per mixture component.

    Group g has centers drawn from component g and opacity ``MIXTURE_OPACITIES[g]``.
    Returns ``(set, group)`` with ``group[i]`` the component of primitive i.
    """
    rng = np.random.default_rng(seed)
    comp = mixture()
    group = np.repeat(np.arange(3), [n - 2 * (n // 3), n // 3, n // 3])
    L = np.linalg.cholesky(comp.covs)
    pos = comp.means[group] + np.einsum("nij,nj->ni", L[group], rng.standard_normal((n, 3)))
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    gs = GaussianSet(pos, np.full((n, 3), np.log(scale)), quats,
                     logit(MIXTURE_OPACITIES[group]), np.eye(3)[group])
    return gs, group


def probes_in_support(mix: GaussianMixture, count: int, seed: int, min_fraction: float = 0.1):
    """``count`` probes drawn from the mixture itself, kept where p >= min_fraction * max p."""
    rng = np.random.default_rng(seed)
    p_max = mix.max_density()
    out = []
    while sum(len(o) for o in out) < count:
        x = mix.sample(4 * count, rng)
        out.append(x[mix.pdf(x) >= min_fraction * p_max])
    return np.concatenate(out)[:count], p_max


def uniform_set(n: int = 4000, box: float = 10.0, seed: int = 0, alpha: float = 0.5,
                contrast: float = 1.0) -> GaussianSet:
    """Isotropic primitives in ``[0, box]^3``.

    With ``contrast > 1`` the half ``x < box/2`` is ``contrast`` times denser
    than the other half (same total count).  Scales follow the local spacing.
    """
    rng = np.random.default_rng(seed)
    n_dense = int(round(n * contrast / (contrast + 1.0)))
    pos = rng.uniform(0.0, box, (n, 3))
    pos[:n_dense, 0] *= 0.5
    pos[n_dense:, 0] = 0.5 * box + 0.5 * pos[n_dense:, 0]
    density = np.where(np.arange(n) < n_dense, n_dense, n - n_dense) / (0.5 * box ** 3)
    spacing = density ** (-1.0 / 3.0)
    log_scales = np.repeat(np.log(0.5 * spacing)[:, None], 3, axis=1)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianSet(pos, log_scales, quats, np.full(n, logit(alpha)), _unit_appearance(n))


def interior_probes(count: int, box: float = 10.0, seed: int = 0, margin: float = 2.0,
                    contrast: float = 1.0) -> np.ndarray:
    """Probes away from the box faces and, for contrast scenes, from the density step."""
    rng = np.random.default_rng(seed + 7919)
    x = rng.uniform(margin, box - margin, (count, 3))
    if contrast != 1.0:
        half = count // 2
        x[:half, 0] = rng.uniform(margin, 0.5 * box - margin / 2, half)
        x[half:, 0] = rng.uniform(0.5 * box + margin / 2, box - margin, count - half)
    return x


def clone_cluster(s: int = 50, alpha: float = 0.8, cov=None) -> GaussianSet:
    """``s`` identical primitives at the origin (unit covariance by default)."""
    if cov is None:
        log_scales, quats = np.zeros((s, 3)), np.tile([1.0, 0.0, 0.0, 0.0], (s, 1))
    else:
        sc, q = params_from_covariance(np.asarray(cov, dtype=np.float64))
        log_scales, quats = np.tile(np.log(sc), (s, 1)), np.tile(q, (s, 1))
    return GaussianSet(np.zeros((s, 3)), log_scales, quats, np.full(s, logit(alpha)),
                       _unit_appearance(s, value=0.5))


def floater_surface_set(grid: int = 40, extent: float = 4.0, surface_depth: float = 5.0,
                        floater_depth: float = 2.0, floater_scale: float = 0.5,
                        floater_opacity: float = 0.99, surface_opacity: float = 0.9):
    """A flat surface of disc-like primitives at z = surface_depth plus one floater.

    The floater sits on the z axis, so the ray from the origin along +z is
    occluded.  Returns ``(set, floater_index)``.
    """
    g = np.linspace(-extent, extent, grid)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    n = grid * grid
    spacing = g[1] - g[0]
    pos = np.column_stack([xx.ravel(), yy.ravel(), np.full(n, surface_depth)])
    log_scales = np.tile(np.log([0.6 * spacing, 0.6 * spacing, 0.05 * spacing]), (n, 1))
    pos = np.vstack([pos, [0.0, 0.0, floater_depth]])
    log_scales = np.vstack([log_scales, np.full(3, np.log(floater_scale))])
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n + 1, 1))
    logits = np.concatenate([np.full(n, logit(surface_opacity)), [logit(floater_opacity)]])
    appearance = np.vstack([np.tile([0.8, 0.6, 0.4], (n, 1)), [0.5, 0.5, 0.5]])
    return GaussianSet(pos, log_scales, quats, logits, appearance), n


__all__ = [
    "MIXTURE_MEANS", "MIXTURE_OPACITIES", "clone_cluster", "floater_surface_set",
    "grouped_mixture_set", "interior_probes", "mixture", "mixture_set", "probes_in_support",
    "uniform_set",
]
