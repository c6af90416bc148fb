"""kNN covariance estimation, low-opacity assembly and the end-to-end reorganization pass."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import GaussianSet, logit, params_from_covariance, sym_eig3
from .resample import ResamplePlan, SampleBatch, categorical_weights, draw_categories, draw_coordinates
from .spatial_index import PointIndex

log = logging.getLogger(__name__)


class ReorgError(RuntimeError):
    """Numeric failure inside a named pipeline stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class ReorgStats:
    floored_eigenvalues: int = 0
    radius_min: float = 0.0
    radius_max: float = 0.0
    timing: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"floored_eigenvalues": self.floored_eigenvalues,
                "radius_min": self.radius_min, "radius_max": self.radius_max}


@dataclass
class ReorgResult:
    output: GaussianSet
    batch: SampleBatch
    covariances: np.ndarray  # floored Sigma'_j
    stats: ReorgStats
    passes: list[ReorgStats] = field(default_factory=list)


def second_moments(centers: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """(1/k) sum_l (x_{j_l} - x_j)(x_{j_l} - x_j)^T, taken about x_j itself."""
    d = centers[neighbors] - centers[:, None, :]
    return np.einsum("mki,mkj->mij", d, d) / neighbors.shape[1]


def floor_covariances(covs: np.ndarray, floor_rel: float = 1e-6, floor_abs: float = 1e-12):
    """Clamp eigenvalues to max(floor_rel * lambda_max, floor_abs); returns (covs, n_floored)."""
    vals, vecs = sym_eig3(covs)
    floor = np.maximum(floor_rel * vals[..., :1], floor_abs)
    n_floored = int(np.count_nonzero(vals < floor))
    vals = np.maximum(vals, floor)
    out = (vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2)), n_floored


def knn_covariances(centers, index: PointIndex, k: int, floor_rel: float = 1e-6,
                    floor_abs: float = 1e-12):
    """Floored kNN second-moment covariance for every center (self excluded).

    Returns ``(covs, n_floored, radii)`` where ``radii`` is the distance to the
    k-th neighbour.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {len(centers)}")
    nbr, d2 = index.knn_batch(centers, k, exclude=np.arange(len(centers)))
    covs, n_floored = floor_covariances(second_moments(centers, nbr), floor_rel, floor_abs)
    return covs, n_floored, np.sqrt(d2[:, -1])


def knn_covariance(centers, index: PointIndex, j: int, k: int, floor_rel: float = 1e-6,
                   floor_abs: float = 1e-12) -> np.ndarray:
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {len(centers)}")
    nbr, _ = index.knn_batch(centers[j:j + 1], k, exclude=[j])
    d = centers[nbr[0]] - centers[j]
    return floor_covariances(d.T @ d / k, floor_rel, floor_abs)[0]


def inherit_appearance(centers, old_index: PointIndex, old: GaussianSet) -> np.ndarray:
    """Row j copies the appearance of the old Gaussian nearest to x_j (lowest index on ties)."""
    if len(old) == 0:
        raise ValueError("old set is empty")
    return old.appearance[old_index.nearest_batch(centers)]


def assemble(centers, covariances, appearance, alpha0: float) -> GaussianSet:
    """Native parameters from (x_j, Sigma'_j, C'_j) with every opacity set to alpha0."""
    covariances = np.asarray(covariances, dtype=np.float64)
    scales, quats = params_from_covariance(covariances)
    if np.any(scales <= 0):
        raise ValueError("covariance has a zero eigenvalue; floor it before assembly")
    m = len(covariances)
    return GaussianSet(
        positions=centers,
        log_scales=np.log(scales),
        rotations=quats,
        opacity_logits=np.full(m, logit(alpha0)),
        appearance=appearance,
    )


def reorganize(gs: GaussianSet, plan: ResamplePlan) -> ReorgResult:
    """One full pass: categorical + coordinate sampling, kNN covariance, alpha0, inheritance."""
    m = plan.sample_count(len(gs))
    if len(gs) == 0:
        raise ValueError("input set is empty")
    if m < plan.k + 1:
        raise ValueError(f"{m} samples cannot support k={plan.k} neighbours (need >= k+1)")
    timing: dict[str, float] = {}
    t0 = time.perf_counter()

    def lap(stage):
        nonlocal t0
        now = time.perf_counter()
        timing[stage] = now - t0
        t0 = now

    try:
        weights = categorical_weights(gs, plan.opacity_clip_min)
    except ValueError as e:
        raise ReorgError("categorical", str(e)) from e
    cats = draw_categories(weights, m, plan.seed)
    lap("categorical")
    try:
        batch = draw_coordinates(gs, cats, plan.seed)
    except FloatingPointError as e:
        raise ReorgError("coordinates", str(e)) from e
    lap("coordinates")

    index = PointIndex(batch.centers)
    try:
        covs, n_floored, radii = knn_covariances(batch.centers, index, plan.k, plan.floor_rel, plan.floor_abs)
    except np.linalg.LinAlgError as e:
        raise ReorgError("knn_covariance", str(e)) from e
    lap("knn_covariance")

    appearance = inherit_appearance(batch.centers, PointIndex(gs.positions), gs)
    lap("appearance")
    try:
        out = assemble(batch.centers, covs, appearance, plan.alpha0)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise ReorgError("assemble", str(e)) from e
    lap("assemble")
    stats = ReorgStats(n_floored, float(radii.min()), float(radii.max()), timing)
    return ReorgResult(out, batch, covs, stats, [stats])


def reorganize_cascaded(gs: GaussianSet, plan: ResamplePlan, passes: int) -> ReorgResult:
    """Apply ``reorganize`` ``passes`` times, pass p using seed ``plan.seed + p``.

    No optimization happens between passes here, unlike a training-loop cascade.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    result = None
    history: list[ReorgStats] = []
    current = gs
    for p in range(passes):
        result = reorganize(current, replace(plan, seed=plan.seed + p))
        history.append(result.stats)
        current = result.output
    result.passes = history
    return result


__all__ = [
    "ReorgError", "ReorgResult", "ReorgStats", "assemble", "floor_covariances", "inherit_appearance",
    "knn_covariance", "knn_covariances", "reorganize", "reorganize_cascaded", "second_moments",
]
