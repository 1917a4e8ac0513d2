"""Latent-variable update: analytic pose gradients and backtracking descent.

Two evaluations of the per-projection cost ``J_p = 1/2 |g_p - H(theta, t) c|^2``
are available.

``kernel``
    The Gram-kernel expansion::

        J_p = 1/2 sum_d A[d] K(M d) / det(Lambda) - sum_k c[k] T_p(M k + t) + 1/2 |g_p|^2

    with ``A`` the autocorrelation of ``c`` (computed once per volume), ``K``
    the continuous autocorrelation of ``psi`` and ``T_p`` the back-projection
    profile of ``g_p``.  Neither the cost nor its gradient forms ``H c``.  The
    translation partials only involve ``T_p``.  ``K`` integrates over the
    detector plane instead of summing over pixels, so this cost differs from
    the pixel-sum cost by the aliasing of ``psi`` at detector sampling.

``direct``
    ``H c`` is formed and the gradient is ``-<r, dHc/dv>`` for the residual
    ``r``.  This is the exact derivative of :func:`cost_single` but costs an
    order of magnitude more per evaluation.

Both gradients differentiate the Catmull-Rom interpolants they evaluate, so
each is the exact derivative of its own cost.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .forward import PsiTables, autocorrelation, project
from .geometry import canonicalize, projection_matrix, projection_matrix_derivative

METHODS = ("kernel", "direct")


@dataclass(frozen=True)
class GdConfig:
    alpha_theta0: float = 1e-7
    alpha_t0: float = 1e-5
    eta: float = 0.25
    k_gd: int = 3
    max_backtracks: int = 20
    method: str = "kernel"

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if not (self.alpha_theta0 > 0 and self.alpha_t0 > 0):
            raise ValueError("initial steps must be positive")
        if self.k_gd < 0 or self.max_backtracks < 0:
            raise ValueError("k_gd and max_backtracks must be non-negative")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass
class ProjectionTrace:
    """What happened to one projection during a descent run."""

    initial_cost: float
    final_cost: float
    costs: list = field(default_factory=list)  # cost after every theta/t sub-step
    accepted: list = field(default_factory=list)  # whether that sub-step moved
    exhausted: int = 0  # sub-steps left unchanged after max_backtracks
    evaluations: int = 0


def _dmats(theta) -> np.ndarray:
    return np.stack([projection_matrix_derivative(theta, i) for i in (1, 2, 3)])


class VolumeContext:
    """Per-volume quantities shared by every projection: ``c`` and its autocorrelation."""

    def __init__(self, c: np.ndarray, tables: PsiTables):
        self.c = np.ascontiguousarray(c, dtype=float)
        self.tables = tables
        self._acorr = None

    @property
    def acorr(self) -> np.ndarray:
        if self._acorr is None:
            self._acorr = autocorrelation(self.c)
        return self._acorr

    def objective(self, image: np.ndarray, method: str = "kernel"):
        if method == "kernel":
            return KernelObjective(self, image)
        if method == "direct":
            return DirectObjective(self, image)
        raise ValueError(f"unknown method {method!r}")


class KernelObjective:
    """Expanded cost of one projection and its gradient."""

    def __init__(self, ctx: VolumeContext, image: np.ndarray, table=None):
        self.ctx = ctx
        image = np.asarray(image, dtype=float)
        self.table = table if table is not None else ctx.tables.image_table(image)
        self.g_sq = float(np.sum(image * image))

    def quad(self, theta) -> float:
        tab = self.ctx.tables
        return K.quad_term(self.ctx.acorr, projection_matrix(theta), *tab.auto.args, tab.auto_radius) / tab.grid.det

    def cross(self, pose) -> float:
        return K.cross_term(self.ctx.c, projection_matrix(pose[:3]), float(pose[3]), float(pose[4]), *self.table.args)

    def cost(self, pose) -> float:
        return 0.5 * self.quad(pose[:3]) - self.cross(pose) + 0.5 * self.g_sq

    def grad(self, pose, with_theta: bool = True) -> np.ndarray:
        """``[dJ/dtheta1, dJ/dtheta2, dJ/dtheta3, dJ/dt1, dJ/dt2]``; angles zeroed unless ``with_theta``."""
        tab = self.ctx.tables
        theta = pose[:3]
        mat = projection_matrix(theta)
        dm = _dmats(theta)
        out = -K.cross_grad(self.ctx.c, mat, dm, float(pose[3]), float(pose[4]), *self.table.args, with_theta)
        if with_theta:
            quad = K.quad_grad(self.ctx.acorr, mat, dm, *tab.auto.args, tab.auto_radius)
            out[:3] += 0.5 * quad / tab.grid.det
        return out


class DirectObjective:
    """Pixel-sum cost of one projection and its exact gradient."""

    def __init__(self, ctx: VolumeContext, image: np.ndarray):
        self.ctx = ctx
        self.image = np.asarray(image, dtype=float)
        self._last = (None, None)

    def residual(self, pose) -> np.ndarray:
        key = np.asarray(pose, dtype=float).tobytes()
        if self._last[0] != key:
            self._last = (key, self.image - project(self.ctx.c, pose, self.ctx.tables))
        return self._last[1]

    def cost(self, pose) -> float:
        r = self.residual(pose)
        return 0.5 * float(np.sum(r * r))

    def grad(self, pose, with_theta: bool = True) -> np.ndarray:
        tab = self.ctx.tables
        g = tab.grid
        theta = pose[:3]
        return K.project_grad_one(
            self.ctx.c, projection_matrix(theta), _dmats(theta), float(pose[3]), float(pose[4]),
            self.residual(pose), tab.psi, tab.half, tab.oversampling, g.delta1, g.delta2,
            tab.psi_radius, with_theta,
        )


def _as_pose(pose) -> np.ndarray:
    if hasattr(pose, "as_array"):
        return pose.as_array()
    return np.asarray(pose, dtype=float)


def cost_single(c: np.ndarray, pose, image: np.ndarray, tables: PsiTables) -> float:
    """``1/2 |g_p - H(theta, t) c|^2`` evaluated through the forward projector."""
    r = np.asarray(image, dtype=float) - project(c, pose, tables)
    return 0.5 * float(np.sum(r * r))


def cost_expanded(c: np.ndarray, pose, image: np.ndarray, tables: PsiTables) -> float:
    """The same cost through the Gram-kernel expansion."""
    return KernelObjective(VolumeContext(c, tables), image).cost(_as_pose(pose))


def grad_pose(c: np.ndarray, pose, image: np.ndarray, tables: PsiTables, method: str = "direct"):
    """Analytic gradient of ``J_p``; returns ``(dJ/dtheta[3], dJ/dt[2])``.

    ``direct`` differentiates :func:`cost_single`, ``kernel`` differentiates
    :func:`cost_expanded`.
    """
    obj = VolumeContext(c, tables).objective(image, method)
    g = obj.grad(_as_pose(pose))
    return g[:3], g[3:]


def _canon(theta: np.ndarray) -> np.ndarray:
    return np.array(canonicalize(*theta))


def descend_one(objective, pose: np.ndarray, cfg: GdConfig):
    """Semi-coordinate-wise descent on one projection.

    Each round takes one backtracked step on the angles, then one on the
    shift.  Steps restart from the initial step size every round, and a step
    is accepted when it does not increase the cost.  If backtracking runs out,
    the variable keeps its value for that round.
    """
    theta = np.array(pose[:3], dtype=float)
    t = np.array(pose[3:5], dtype=float)
    cur = objective.cost(np.concatenate([theta, t]))
    trace = ProjectionTrace(initial_cost=cur, final_cost=cur, evaluations=1)

    def step(x, grad, alpha, make, project_x):
        nonlocal cur
        for _ in range(cfg.max_backtracks + 1):
            cand = project_x(x - alpha * grad)
            val = objective.cost(make(cand))
            trace.evaluations += 1
            if val <= cur:
                cur = val
                return cand, True
            alpha *= cfg.eta
        trace.exhausted += 1
        return x, False

    for _ in range(cfg.k_gd):
        grad = objective.grad(np.concatenate([theta, t]), with_theta=True)
        theta, ok = step(theta, grad[:3], cfg.alpha_theta0, lambda a: np.concatenate([a, t]), _canon)
        trace.costs.append(cur)
        trace.accepted.append(ok)

        grad = objective.grad(np.concatenate([theta, t]), with_theta=False)
        t, ok = step(t, grad[3:], cfg.alpha_t0, lambda s: np.concatenate([theta, s]), lambda s: s)
        trace.costs.append(cur)
        trace.accepted.append(ok)
    trace.final_cost = cur
    return np.concatenate([theta, t]), trace


@dataclass
class RefineResult:
    poses: np.ndarray
    traces: list
    seconds: float = 0.0

    @property
    def total_cost(self) -> float:
        return float(sum(tr.final_cost for tr in self.traces))

    @property
    def exhausted(self) -> int:
        return int(sum(tr.exhausted for tr in self.traces))


def refine_latents_batched(
    c: np.ndarray,
    images: np.ndarray,
    poses: np.ndarray,
    tables: PsiTables,
    cfg: GdConfig = GdConfig(),
    batch_size: int = 32,
    threads: int = 1,
    htg_out: np.ndarray | None = None,
    context: VolumeContext | None = None,
) -> RefineResult:
    """Refine every projection's pose independently, one mini-batch at a time.

    Projections never interact, so the result is the same for every batch
    size and thread count.  If ``htg_out`` is given, the back-projection of
    the images at the refined poses is added to it in projection order.
    """
    start = time.perf_counter()
    images = np.asarray(images, dtype=float)
    poses = np.asarray(poses, dtype=float)
    P = len(images)
    if len(poses) != P:
        raise ValueError(f"{P} images but {len(poses)} poses")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batch_size = min(batch_size, max(P, 1))
    ctx = context if context is not None else VolumeContext(c, tables)
    if cfg.method == "kernel" and cfg.k_gd > 0:
        ctx.acorr  # computed once, before any worker touches it
    new_poses = poses.copy()
    traces: list = [None] * P

    def work(p):
        table = tables.image_table(images[p]) if (cfg.method == "kernel" or htg_out is not None) else None
        if cfg.method == "kernel":
            obj = KernelObjective(ctx, images[p], table)
        else:
            obj = DirectObjective(ctx, images[p])
        pose, tr = descend_one(obj, poses[p], cfg)
        return table, pose, tr

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for lo in range(0, P, batch_size):
            idx = range(lo, min(P, lo + batch_size))
            results = list(pool.map(work, idx)) if pool else [work(p) for p in idx]
            for p, (table, pose, tr) in zip(idx, results):
                new_poses[p] = pose
                traces[p] = tr
                if htg_out is not None:
                    mat = projection_matrix(pose[:3])
                    K.backproject_accumulate(htg_out, mat, float(pose[3]), float(pose[4]), *table.args)
    finally:
        if pool:
            pool.shutdown()
    return RefineResult(new_poses, traces, time.perf_counter() - start)


def refine_latents(c, images, poses, tables, cfg: GdConfig = GdConfig(), htg_out=None) -> RefineResult:
    """Unbatched reference path of :func:`refine_latents_batched`."""
    return refine_latents_batched(c, images, poses, tables, cfg, batch_size=max(len(images), 1), htg_out=htg_out)
