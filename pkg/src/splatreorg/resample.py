"""Opacity-weighted categorical sampling and reparameterized coordinate draws.

Random numbers come from counter-based Philox streams.  Draw ``j`` belongs to
block ``j // BLOCK``; each block has its own generator keyed by
``(seed, stream)`` with the block number in the high counter word, so any
block can be produced independently and a chunked or parallel run yields the
same batch as a sequential one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import GaussianSet

BLOCK = 8192
STREAM_CATEGORY = 1
STREAM_NORMAL = 2
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ResamplePlan:
    """Sampling configuration.  ``samples=None`` keeps the input count (M = N)."""

    samples: int | None = None
    k: int = 20
    alpha0: float = 0.01
    seed: int = 0
    floor_rel: float = 1e-6
    floor_abs: float = 1e-12
    opacity_clip_min: float = 1e-12

    def __post_init__(self):
        if self.samples is not None and self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.alpha0 < 1.0:
            raise ValueError("alpha0 must lie in (0, 1)")
        if self.floor_rel <= 0 or self.floor_abs <= 0 or self.opacity_clip_min <= 0:
            raise ValueError("floors must be positive")

    def sample_count(self, n: int) -> int:
        return n if self.samples is None else self.samples


@dataclass(frozen=True)
class SampleBatch:
    centers: np.ndarray  # (M, dim)
    source: np.ndarray  # (M,) component index z_j

    def __len__(self) -> int:
        return len(self.centers)


def block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    key = ((stream & _MASK64) << 64) | (seed & _MASK64)
    return np.random.Generator(np.random.Philox(key=key, counter=block << 192))


def _blocks(count: int):
    for b, start in enumerate(range(0, count, BLOCK)):
        yield b, start, min(count, start + BLOCK)


def uniforms(seed: int, stream: int, count: int) -> np.ndarray:
    out = np.empty(count)
    for b, lo, hi in _blocks(count):
        out[lo:hi] = block_generator(seed, stream, b).random(hi - lo)
    return out


def standard_normals(seed: int, stream: int, count: int, dim: int) -> np.ndarray:
    out = np.empty((count, dim))
    for b, lo, hi in _blocks(count):
        out[lo:hi] = block_generator(seed, stream, b).standard_normal((hi - lo, dim))
    return out


def categorical_weights(opacities, clip_min: float = 1e-12) -> np.ndarray:
    """P(z = i) proportional to activated opacity, clipped below at ``clip_min``.

    Deliberately no volume factor: large blurry Gaussians get no extra mass.
    Accepts a GaussianSet or an array of opacities.
    """
    a = opacities.opacities() if isinstance(opacities, GaussianSet) else np.asarray(opacities, np.float64)
    if a.ndim != 1 or len(a) == 0:
        raise ValueError("need at least one component")
    if not np.any(a > clip_min):
        raise ValueError("all opacities are at or below the clip threshold")
    w = np.maximum(a, clip_min)
    return w / w.sum()


def draw_categories(weights, count: int, seed: int) -> np.ndarray:
    """Inverse-CDF categorical draws; u_j comes from the category stream at draw j."""
    w = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(w)
    u = uniforms(seed, STREAM_CATEGORY, count) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(w) - 1).astype(np.int64)


def draw_coordinates(gs: GaussianSet, categories, seed: int, eps=None) -> SampleBatch:
    """x_j = mu_k + R_k S_k eps_j with eps_j ~ N(0, I) (so Cov(x_j | z_j = k) = Sigma_k)."""
    cats = np.asarray(categories, dtype=np.int64)
    if cats.size and (cats.min() < 0 or cats.max() >= len(gs)):
        raise ValueError("category index out of range")
    if eps is None:
        eps = standard_normals(seed, STREAM_NORMAL, len(cats), 3)
    eps = np.asarray(eps, dtype=np.float64).reshape(len(cats), 3)
    transforms = gs.sampling_transforms()
    x = gs.positions[cats] + np.einsum("mij,mj->mi", transforms[cats], eps)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite sample coordinates")
    return SampleBatch(centers=x, source=cats)


def sample(gs: GaussianSet, plan: ResamplePlan) -> SampleBatch:
    weights = categorical_weights(gs, plan.opacity_clip_min)
    cats = draw_categories(weights, plan.sample_count(len(gs)), plan.seed)
    return draw_coordinates(gs, cats, plan.seed)
