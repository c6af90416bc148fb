"""Gaussian-splat containers, activations and covariance <-> (scale, rotation) conversion.

Storage follows the usual splat checkpoint convention: opacity is kept as a
logit, per-axis standard deviations as logarithms and rotations as unit
quaternions ordered (w, x, y, z).  Arithmetic is float64 throughout.

Covariances are plain ``(..., 3, 3)`` arrays; ``sym_eig3`` is the batched
eigensolver used to go back to native parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

QUAT_TOL = 1e-6
EIG_TOL = 1e-12  # Jacobi stop: off-diagonal norm <= EIG_TOL * trace
_DEGENERATE_REL = 1e-10


def sigmoid(x):
    """Numerically stable logistic function (exact at logit(0.01) in float64)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("logit requires 0 < p < 1")
    out = np.log(p / (1.0 - p))
    return out if out.ndim else float(out)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z); inputs are normalized first."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(q)):
        raise ValueError("quaternion must be finite and nonzero")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for proper rotations, canonical sign w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    m00, m11, m22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    tr = m00 + m11 + m22
    q = np.empty((R.shape[0], 4))
    # Shepperd: branch on the largest of (trace, diagonal entries)
    case = np.argmax(np.stack([tr, m00, m11, m22], -1), axis=-1)

    c = case == 0
    s = 2.0 * np.sqrt(1.0 + tr[c])
    q[c] = np.stack([0.25 * s, (R[c, 2, 1] - R[c, 1, 2]) / s,
                     (R[c, 0, 2] - R[c, 2, 0]) / s, (R[c, 1, 0] - R[c, 0, 1]) / s], -1)
    c = case == 1
    s = 2.0 * np.sqrt(1.0 + m00[c] - m11[c] - m22[c])
    q[c] = np.stack([(R[c, 2, 1] - R[c, 1, 2]) / s, 0.25 * s,
                     (R[c, 0, 1] + R[c, 1, 0]) / s, (R[c, 0, 2] + R[c, 2, 0]) / s], -1)
    c = case == 2
    s = 2.0 * np.sqrt(1.0 + m11[c] - m00[c] - m22[c])
    q[c] = np.stack([(R[c, 0, 2] - R[c, 2, 0]) / s, (R[c, 0, 1] + R[c, 1, 0]) / s,
                     0.25 * s, (R[c, 1, 2] + R[c, 2, 1]) / s], -1)
    c = case == 3
    s = 2.0 * np.sqrt(1.0 + m22[c] - m00[c] - m11[c])
    q[c] = np.stack([(R[c, 1, 0] - R[c, 0, 1]) / s, (R[c, 0, 2] + R[c, 2, 0]) / s,
                     (R[c, 1, 2] + R[c, 2, 1]) / s, 0.25 * s], -1)

    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    # canonical hemisphere: first nonzero component positive
    lead = np.argmax(np.abs(q) > 1e-15, axis=-1)
    flip = q[np.arange(len(q)), lead] < 0
    q[flip] *= -1
    return q.reshape(*batch, 4)


def covariance_from_params(log_scale, quat) -> np.ndarray:
    """Sigma = R S S^T R^T for (..., 3) log-scales and (..., 4) quaternions."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if not np.all(np.isfinite(log_scale)):
        raise ValueError("log_scale must be finite")
    M = quat_to_rotmat(quat) * np.exp(log_scale)[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def _jacobi_sweep(A: np.ndarray, V: np.ndarray) -> None:
    n = A.shape[0]
    idx = np.arange(n)
    for p, q in ((0, 1), (0, 2), (1, 2)):
        apq = A[:, p, q]
        active = apq != 0
        theta = np.zeros(n)
        theta[active] = (A[active, q, q] - A[active, p, p]) / (2.0 * apq[active])
        t = np.where(active, np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
        t[active & (theta == 0)] = 1.0
        c = 1.0 / np.sqrt(t * t + 1.0)
        s = t * c
        J = np.zeros((n, 3, 3))
        J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
        J[idx, p, p] = c
        J[idx, q, q] = c
        J[idx, p, q] = s
        J[idx, q, p] = -s
        A[:] = np.swapaxes(J, -1, -2) @ A @ J
        A[:] = 0.5 * (A + np.swapaxes(A, -1, -2))
        A[:, p, q] = A[:, q, p] = 0.0
        V[:] = V @ J


def _canonical_basis(vals: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Deterministic eigenvectors for one matrix whose spectrum has repeated values."""
    scale = max(np.max(np.abs(vals)), np.finfo(float).tiny)
    out = vecs.copy()
    start = 0
    while start < 3:
        stop = start + 1
        while stop < 3 and abs(vals[stop - 1] - vals[stop]) <= _DEGENERATE_REL * scale:
            stop += 1
        if stop - start > 1:
            sub = vecs[:, start:stop]
            proj = sub @ sub.T
            chosen: list[np.ndarray] = []
            for e in np.eye(3):
                v = proj @ e
                for u in chosen:
                    v = v - (u @ v) * u
                nv = np.linalg.norm(v)
                if nv > 1e-3:
                    chosen.append(v / nv)
                if len(chosen) == stop - start:
                    break
            out[:, start:stop] = np.stack(chosen, axis=1)
        start = stop
    return out


def sym_eig3(cov: np.ndarray, tol: float = EIG_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of symmetric (..., 3, 3) matrices by cyclic Jacobi rotations.

    Returns ``(vals, vecs)`` with ``vals`` sorted descending and ``vecs`` a proper
    rotation (det +1) whose columns are the eigenvectors.  Orientation is fixed so
    the decomposition is reproducible:

    * simple eigenvalues: the largest-magnitude component of the eigenvector is
      positive (first such index on ties);
    * repeated eigenvalues: the eigenspace basis is Gram-Schmidt of the projected
      unit axes e_x, e_y, e_z, so the identity matrix maps to the identity rotation;
    * if the result has det -1 the last column is negated.
    """
    cov = np.asarray(cov, dtype=np.float64)
    batch = cov.shape[:-2]
    A = 0.5 * (cov + np.swapaxes(cov, -1, -2)).reshape(-1, 3, 3).copy()
    V = np.broadcast_to(np.eye(3), A.shape).copy()
    scale = np.maximum(np.abs(np.trace(A, axis1=1, axis2=2)), np.abs(A).max(axis=(1, 2)))
    for _ in range(32):
        off = np.sqrt(A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2)
        todo = off > 1e-3 * tol * scale
        if not todo.any():
            break
        sub_A, sub_V = A[todo], V[todo]
        _jacobi_sweep(sub_A, sub_V)
        A[todo], V[todo] = sub_A, sub_V
    off = np.sqrt(A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2)
    if np.any(off > tol * scale):
        raise np.linalg.LinAlgError("Jacobi iteration did not converge")

    vals = np.diagonal(A, axis1=1, axis2=2).copy()
    order = np.argsort(-vals, axis=1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=1)
    vecs = np.take_along_axis(V, order[:, None, :], axis=2)

    vmax = np.abs(vals).max(axis=1)
    gaps = np.abs(np.diff(vals, axis=1))
    degenerate = np.any(gaps <= _DEGENERATE_REL * np.maximum(vmax, np.finfo(float).tiny)[:, None], axis=1)
    for i in np.flatnonzero(degenerate):
        vecs[i] = _canonical_basis(vals[i], vecs[i])

    lead = np.argmax(np.abs(vecs), axis=1)
    sign = np.sign(np.take_along_axis(vecs, lead[:, None, :], axis=1))
    sign[sign == 0] = 1.0
    vecs = vecs * sign
    flip = np.linalg.det(vecs) < 0
    vecs[flip, :, 2] *= -1
    return vals.reshape(*batch, 3), vecs.reshape(*batch, 3, 3)


def params_from_covariance(cov, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """(scale, quaternion) with R diag(scale)^2 R^T == cov; works on (..., 3, 3) batches.

    Raises ValueError when the input is not symmetric, or has an eigenvalue
    below ``-tol * trace``; slightly negative eigenvalues within tolerance are
    clamped to zero.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape[-2:] != (3, 3) or not np.all(np.isfinite(cov)):
        raise ValueError("covariance must be a finite (..., 3, 3) array")
    tr = np.abs(np.trace(cov, axis1=-2, axis2=-1))
    asym = np.abs(cov - np.swapaxes(cov, -1, -2)).max(axis=(-2, -1))
    if np.any(asym > tol * np.maximum(tr, np.finfo(float).tiny)):
        raise ValueError("covariance is not symmetric")
    vals, vecs = sym_eig3(cov)
    if np.any(vals[..., -1] < -tol * tr):
        raise ValueError("covariance is indefinite")
    return np.sqrt(np.maximum(vals, 0.0)), rotmat_to_quat(vecs)


@dataclass(frozen=True)
class ActivatedGaussian:
    position: np.ndarray
    covariance: np.ndarray
    opacity: float
    appearance: np.ndarray


def _frozen(a, shape_tail: tuple[int, ...], name: str) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim != 1 + len(shape_tail) or a.shape[1:] != shape_tail:
        raise ValueError(f"{name} has shape {a.shape}, expected (N, {', '.join(map(str, shape_tail))})")
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """Structure-of-arrays splat model in native parameterization; arrays are read-only."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    appearance: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "positions", _frozen(self.positions, (3,), "positions"))
        n = len(self.positions)
        set_(self, "log_scales", _frozen(self.log_scales, (3,), "log_scales"))
        set_(self, "rotations", _frozen(self.rotations, (4,), "rotations"))
        logits = np.array(self.opacity_logits, dtype=np.float64).reshape(-1)
        logits.flags.writeable = False
        set_(self, "opacity_logits", logits)
        app = np.array(self.appearance, dtype=np.float64)
        if app.ndim != 2:
            raise ValueError("appearance must be (N, D)")
        app.flags.writeable = False
        set_(self, "appearance", app)
        for name in ("log_scales", "rotations", "opacity_logits", "appearance"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length differs from positions ({n})")
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "appearance"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if n and np.max(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0)) > QUAT_TOL:
            raise ValueError("rotations must be unit quaternions (use normalize_quaternions)")

    @classmethod
    def empty(cls, appearance_dim: int = 3) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, appearance_dim)))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def appearance_dim(self) -> int:
        return self.appearance.shape[1]

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return covariance_from_params(self.log_scales, self.rotations)

    def sampling_transforms(self) -> np.ndarray:
        """R_i S_i, the matrices with (R S)(R S)^T = Sigma_i."""
        return quat_to_rotmat(self.rotations) * self.scales()[:, None, :]

    def replace(self, **changes) -> "GaussianSet":
        return replace(self, **changes)

    def equals(self, other: "GaussianSet") -> bool:
        """Field-exact comparison (metadata ignored)."""
        names = ("positions", "log_scales", "rotations", "opacity_logits", "appearance")
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


def normalize_quaternions(q: np.ndarray, tol: float = QUAT_TOL) -> tuple[np.ndarray, float]:
    """Normalize rows whose norm deviates from 1 by more than ``tol``.

    Rows already within tolerance are returned bit-for-bit, which keeps
    read/write round trips byte-exact.  Also returns the largest deviation seen.
    """
    q = np.array(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise ValueError("zero or non-finite quaternion")
    dev = np.abs(norms - 1.0)
    bad = dev > tol
    q[bad] /= norms[bad, None]
    return q, float(dev.max()) if len(dev) else 0.0


def activate(gs: GaussianSet, i: int) -> ActivatedGaussian:
    if not 0 <= i < len(gs):
        raise IndexError(f"index {i} out of range for {len(gs)} Gaussians")
    return ActivatedGaussian(
        position=gs.positions[i].copy(),
        covariance=covariance_from_params(gs.log_scales[i], gs.rotations[i]),
        opacity=float(sigmoid(gs.opacity_logits[i])),
        appearance=gs.appearance[i].copy(),
    )
