"""Small alpha-compositing simulator with exact gradients.

A scene is a set of primitives at fixed depths.  Each primitive has a lateral
center in a ``dim``-dimensional image plane (``dim`` = 0 is the pure-depth
case where every primitive covers every ray), an isotropic footprint width,
an opacity logit and a color vector.  A ray is a pixel position ``u``:

    a_i(u) = sigmoid(logit_i) * exp(-|u - center_i|^2 / (2 width_i^2))
    C(u)   = sum_i T_i a_i c_i,   T_i = prod_{j before i} (1 - a_j)

with primitives composited front to back (depth, then index).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import logit, sigmoid
from .resample import (ResamplePlan, categorical_weights, draw_categories,
                       standard_normals, STREAM_NORMAL)
from .spatial_index import PointIndex
from .reorg import second_moments


@dataclass(frozen=True)
class ToyScene:
    depths: np.ndarray  # (N,)
    logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, C)
    centers: np.ndarray  # (N, dim)
    log_widths: np.ndarray  # (N,)
    pixels: np.ndarray  # (R, dim)
    target: np.ndarray  # (R, C)

    def __post_init__(self):
        n = len(self.depths)
        for name in ("logits", "colors", "centers", "log_widths"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.centers.shape[1] != self.pixels.shape[1]:
            raise ValueError("centers and pixels must share the lateral dimension")
        if len(self.pixels) != len(self.target) or self.target.shape[1] != self.colors.shape[1]:
            raise ValueError("target must be (R, C) matching pixels and colors")
        if not np.all(np.isfinite(self.depths)):
            raise ValueError("depths must be finite")

    @property
    def dim(self) -> int:
        return self.pixels.shape[1]

    @property
    def order(self) -> np.ndarray:
        return np.lexsort((np.arange(len(self.depths)), self.depths))

    def opacities(self) -> np.ndarray:
        return sigmoid(self.logits)

    def params(self) -> np.ndarray:
        """Optimized parameters: logits, colors and (dim > 0) centers, log-widths."""
        parts = [self.logits, self.colors.ravel()]
        if self.dim:
            parts += [self.centers.ravel(), self.log_widths]
        return np.concatenate(parts)

    def with_params(self, theta: np.ndarray) -> "ToyScene":
        n, c, d = len(self.depths), self.colors.shape[1], self.dim
        theta = np.asarray(theta, dtype=np.float64)
        o = 0
        logits = theta[o:o + n]; o += n
        colors = theta[o:o + n * c].reshape(n, c); o += n * c
        centers, log_widths = self.centers, self.log_widths
        if d:
            centers = theta[o:o + n * d].reshape(n, d); o += n * d
            log_widths = theta[o:o + n]; o += n
        return replace(self, logits=logits, colors=colors, centers=centers, log_widths=log_widths)


def make_scene(depths, logits, colors, pixels, target, centers=None, log_widths=None) -> ToyScene:
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    n = len(depths)
    colors = np.asarray(colors, dtype=np.float64)
    colors = colors.reshape(n, colors.shape[-1] if colors.ndim == 2 else -1)
    pixels = np.asarray(pixels, dtype=np.float64)
    pixels = pixels.reshape(len(pixels), -1) if pixels.ndim else pixels.reshape(1, 0)
    dim = pixels.shape[1]
    centers = np.zeros((n, dim)) if centers is None else np.asarray(centers, dtype=np.float64).reshape(n, dim)
    log_widths = np.zeros(n) if log_widths is None else np.asarray(log_widths, dtype=np.float64).reshape(n)
    target = np.asarray(target, dtype=np.float64).reshape(len(pixels), colors.shape[1])
    return ToyScene(depths, np.asarray(logits, dtype=np.float64).reshape(n), colors, centers,
                    log_widths, pixels, target)


def _footprints(scene: ToyScene):
    """(R, N) footprint g and lateral offsets u - center (R, N, dim), unsorted."""
    diff = scene.pixels[:, None, :] - scene.centers[None, :, :]
    if scene.dim == 0:
        return np.ones((len(scene.pixels), len(scene.depths))), diff
    w2 = np.exp(2.0 * scene.log_widths)
    return np.exp(-0.5 * (diff ** 2).sum(-1) / w2), diff


def _forward(scene: ToyScene):
    order = scene.order
    g, diff = _footprints(scene)
    s = scene.opacities()
    a = (s[None, :] * g)[:, order]  # (R, N) in compositing order
    T = np.cumprod(np.concatenate([np.ones((len(a), 1)), 1.0 - a[:, :-1]], axis=1), axis=1) \
        if a.shape[1] else np.ones((len(a), 0))
    c = scene.colors[order]  # (N, C)
    contrib = (T * a)[:, :, None] * c[None]  # (R, N, C)
    return order, g, diff, s, a, T, c, contrib


def render(scene: ToyScene) -> np.ndarray:
    """Composited color per ray, shape (R, C)."""
    *_, contrib = _forward(scene)
    return contrib.sum(1)


def loss(scene: ToyScene) -> float:
    r = render(scene) - scene.target
    return float((r * r).sum())


def transmittance_to(scene: ToyScene, depth: float) -> np.ndarray:
    """Per-ray transmittance through all primitives strictly in front of ``depth``."""
    g, _ = _footprints(scene)
    a = scene.opacities()[None, :] * g
    front = scene.depths < depth
    return np.prod(1.0 - a[:, front], axis=1)


def _dC_da_recursive(a, T, c):
    # same quantity as T_i (c_i - B_{i+1}) with B the composite behind i; safe when a_i == 1
    out = np.empty((len(a), c.shape[1]))
    behind = np.zeros(c.shape[1])
    for i in range(len(a) - 1, -1, -1):
        out[i] = T[i] * (c[i] - behind)
        behind = a[i] * c[i] + (1.0 - a[i]) * behind
    return out


def gradients(scene: ToyScene, target=None) -> tuple[float, np.ndarray]:
    """Loss sum_r |C(r) - C*(r)|^2 and its exact gradient w.r.t. ``scene.params()``."""
    if target is not None:
        scene = replace(scene, target=np.asarray(target, dtype=np.float64).reshape(scene.target.shape))
    order, g, diff, s, a, T, c, contrib = _forward(scene)
    n = len(order)
    C = contrib.sum(1)
    res = C - scene.target
    L = float((res * res).sum())
    dC = 2.0 * res  # (R, C)

    # dC/da_i = T_i c_i - S_i / (1 - a_i), S_i = sum_{j > i} T_j a_j c_j
    S = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    with np.errstate(divide="ignore", invalid="ignore"):
        dC_da = T[:, :, None] * c[None] - S / (1.0 - a)[:, :, None]
    for r in np.flatnonzero((1.0 - a).min(axis=1, initial=1.0) < 1e-8):
        dC_da[r] = _dC_da_recursive(a[r], T[r], c)
    dL_da = np.einsum("rnc,rc->rn", dC_da, dC)  # sorted order
    dL_dc_sorted = np.einsum("rn,rc->nc", T * a, dC)

    inv = np.empty(n, dtype=np.int64)
    inv[order] = np.arange(n)
    dL_da = dL_da[:, inv]  # back to scene order
    a_scene = a[:, inv]
    grad_logit = (dL_da * g).sum(0) * s * (1.0 - s)
    grad_color = dL_dc_sorted[inv]
    parts = [grad_logit, grad_color.ravel()]
    if scene.dim:
        w2 = np.exp(2.0 * scene.log_widths)
        da = dL_da * a_scene  # dL/da * a
        grad_center = np.einsum("rn,rnd->nd", da, diff) / w2[:, None]
        grad_logw = (da * (diff ** 2).sum(-1)).sum(0) / w2
        parts += [grad_center.ravel(), grad_logw]
    return L, np.concatenate(parts)


@dataclass
class OptState:
    scene: ToyScene
    step: float
    iterations: int = 0
    loss_history: list[float] = field(default_factory=list)
    min_transmittance: list[float] = field(default_factory=list)
    diverged: bool = False


def geometry_mask(scene: ToyScene) -> np.ndarray:
    """True for the lateral center / log-width entries of ``scene.params()``."""
    n, c = len(scene.depths), scene.colors.shape[1]
    mask = np.zeros(len(scene.params()), dtype=bool)
    mask[n * (1 + c):] = True
    return mask


def optimize(scene: ToyScene, iters: int, step: float, target_depth: float | None = None,
             fit_geometry: bool = True) -> OptState:
    """Plain fixed-step gradient descent; the loss is recorded before the first step and after each.

    ``fit_geometry=False`` holds centers and widths fixed (only opacity logits and
    colors move).  Stops early with ``diverged=True`` if the loss or parameters
    become non-finite.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    state = OptState(scene, step)

    def record(sc, L):
        state.loss_history.append(L)
        if target_depth is not None:
            state.min_transmittance.append(float(transmittance_to(sc, target_depth).min()))

    theta = scene.params()
    frozen = None if fit_geometry else geometry_mask(scene)
    L, grad = gradients(scene)
    record(scene, L)
    current = scene
    for it in range(iters):
        if frozen is not None:
            grad[frozen] = 0.0
        theta = theta - step * grad
        if not np.all(np.isfinite(theta)):
            state.diverged = True
            break
        current = scene.with_params(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            L, grad = gradients(current)
        if not np.isfinite(L):
            state.diverged = True
            break
        record(current, L)
        state.iterations = it + 1
    state.scene = current
    return state


def toy_reorganize(scene: ToyScene, plan: ResamplePlan) -> ToyScene:
    """Resample primitives in (lateral, depth) space with alpha0 opacity and nearest-neighbour colors.

    Each primitive is treated as an isotropic Gaussian of std ``exp(log_width)``.
    The new width is the root mean lateral second moment of the k nearest
    samples (depth second moment when ``dim`` = 0).
    """
    n, d = len(scene.depths), scene.dim
    m = plan.sample_count(n)
    if m < plan.k + 1:
        raise ValueError(f"{m} samples cannot support k={plan.k}")
    old_pts = np.column_stack([scene.centers, scene.depths])
    cats = draw_categories(categorical_weights(scene.opacities(), plan.opacity_clip_min), m, plan.seed)
    eps = standard_normals(plan.seed, STREAM_NORMAL, m, d + 1)
    pts = old_pts[cats] + np.exp(scene.log_widths)[cats, None] * eps

    index = PointIndex(pts)
    nbr, _ = index.knn_batch(pts, plan.k, exclude=np.arange(m))
    mom = second_moments(pts, nbr)
    diag = np.diagonal(mom, axis1=1, axis2=2)
    var = diag[:, :d].mean(1) if d else diag[:, 0]
    var = np.maximum(var, plan.floor_abs)
    nearest = PointIndex(old_pts).nearest_batch(pts)
    return ToyScene(
        depths=pts[:, d].copy(),
        logits=np.full(m, logit(plan.alpha0)),
        colors=scene.colors[nearest].copy(),
        centers=pts[:, :d].copy(),
        log_widths=0.5 * np.log(var),
        pixels=scene.pixels,
        target=scene.target,
    )


def _wave(u):
    return 0.5 + 0.4 * np.sin(4.0 * np.pi * u)


def deadlock_scene(seed: int = 0, surface: int = 100, rays: int = 49, floater_width: float = 2.0,
                   floater_opacity: float = 0.99) -> ToyScene:
    """Wide opaque floater at depth 2 in front of a surface at depth 5.

    The surface has the right geometry but its appearance sits at the floater's
    color, so the floater's opacity gradient vanishes and the only way out is
    through the hidden colors, whose gradients carry the factor T <= 0.01.
    """
    rng = np.random.default_rng(seed)
    u = (np.arange(rays) + 0.5) / rays
    cs = np.sort(rng.uniform(0.0, 1.0, surface))
    depths = np.concatenate([5.0 + 0.01 * rng.standard_normal(surface), [2.0]])
    centers = np.concatenate([cs, [0.5]])
    widths = np.concatenate([np.full(surface, 2.0 / surface), [floater_width]])
    alphas = np.concatenate([np.full(surface, 0.9), [floater_opacity]])
    return make_scene(depths, logit(alphas), np.full(surface + 1, 0.5), u, _wave(u),
                      centers, np.log(widths))


def cluster_scene(clones: int = 50, alpha: float = 0.8, rays: int = 32) -> ToyScene:
    """``clones`` identical primitives stacked at one depth and center."""
    u = (np.arange(rays) + 0.5) / rays
    return make_scene(np.full(clones, 3.0), np.full(clones, logit(alpha)), np.full(clones, 0.5),
                      u, _wave(u), np.full(clones, 0.5), np.full(clones, np.log(0.1)))


DEADLOCK_TARGET_DEPTH = 4.9


@dataclass
class DeadlockRecord:
    seed: int
    direct: OptState
    reorg: OptState
    transmittance_before: float  # min over rays, at the target depth
    transmittance_after: float

    @property
    def direct_loss(self) -> float:
        return self.direct.loss_history[-1]

    @property
    def reorg_loss(self) -> float:
        return self.reorg.loss_history[-1]

    @property
    def reorg_wins(self) -> bool:
        return (not self.reorg.diverged) and (self.direct.diverged or self.reorg_loss < self.direct_loss)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "iters": self.direct.iterations, "step": self.direct.step,
            "direct_initial_loss": self.direct.loss_history[0], "direct_final_loss": self.direct_loss,
            "reorg_initial_loss": self.reorg.loss_history[0], "reorg_final_loss": self.reorg_loss,
            "direct_diverged": self.direct.diverged, "reorg_diverged": self.reorg.diverged,
            "transmittance_before": self.transmittance_before,
            "transmittance_after": self.transmittance_after, "reorg_wins": self.reorg_wins,
        }


def deadlock_experiment(seed: int = 0, iters: int = 2000, step: float = 0.01, k: int = 20,
                        alpha0: float = 0.01, scene: ToyScene | None = None,
                        target_depth: float = DEADLOCK_TARGET_DEPTH) -> DeadlockRecord:
    """Equal-budget comparison: direct continuation vs reorganize-then-optimize.

    Both branches run ``iters`` steps of the same fixed-step descent on opacity
    logits and colors; geometry is held fixed (see ``optimize``).  ``seed``
    drives both the scene and the resampling.
    """
    scene = deadlock_scene(seed) if scene is None else scene
    before = float(transmittance_to(scene, target_depth).min())
    direct = optimize(scene, iters, step, target_depth, fit_geometry=False)
    fresh = toy_reorganize(scene, ResamplePlan(k=k, alpha0=alpha0, seed=seed))
    after = float(transmittance_to(fresh, target_depth).min())
    reorg = optimize(fresh, iters, step, target_depth, fit_geometry=False)
    return DeadlockRecord(seed, direct, reorg, before, after)


def scene_to_dict(scene: ToyScene) -> dict:
    return {f: getattr(scene, f).tolist() for f in
            ("depths", "logits", "colors", "centers", "log_widths", "pixels", "target")}


def scene_from_dict(d: dict) -> ToyScene:
    """Inverse of ``scene_to_dict``; also accepts ``opacities`` / ``widths`` instead of logits / log_widths."""
    logits = d["logits"] if "logits" in d else logit(np.asarray(d["opacities"], dtype=np.float64))
    log_widths = d.get("log_widths")
    if log_widths is None and "widths" in d:
        widths = np.asarray(d["widths"], dtype=np.float64)
        if np.any(widths <= 0):
            raise ValueError("widths must be positive")
        log_widths = np.log(widths)
    colors = np.asarray(d["colors"], dtype=np.float64)
    if np.any((colors < 0) | (colors > 1)):
        raise ValueError("colors must lie in [0, 1]")
    return make_scene(d["depths"], logits, colors, d["pixels"], d["target"], d.get("centers"), log_widths)


def random_scene(rng: np.random.Generator, n: int | None = None, rays: int | None = None,
                 dim: int | None = None, channels: int | None = None) -> ToyScene:
    """Random valid scene for gradient checks (distinct depths, moderate opacities)."""
    n = int(rng.integers(1, 7)) if n is None else n
    rays = int(rng.integers(1, 6)) if rays is None else rays
    dim = int(rng.integers(0, 3)) if dim is None else dim
    channels = int(rng.choice([1, 3])) if channels is None else channels
    return make_scene(
        depths=rng.permutation(n) + rng.uniform(0.0, 0.5, n),
        logits=rng.uniform(-3.0, 3.0, n),
        colors=rng.uniform(0.0, 1.0, (n, channels)),
        pixels=rng.uniform(0.0, 1.0, (rays, dim)),
        target=rng.uniform(0.0, 1.0, (rays, channels)),
        centers=rng.uniform(0.0, 1.0, (n, dim)),
        log_widths=np.log(rng.uniform(0.2, 0.8, n)),
    )


def finite_difference_error(scene: ToyScene, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest |g - g_fd| / max(|g|, |g_fd|, floor) over all parameters (central differences)."""
    _, grad = gradients(scene)
    theta = scene.params()
    worst = 0.0
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        fd = (loss(scene.with_params(theta + e)) - loss(scene.with_params(theta - e))) / (2.0 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), floor))
    return worst
