"""Volume update: TV-regularised least squares by ADMM with an inner CG solve.

Solves ``min_c 1/2 |g - H c|^2 + lambda sum_v |(L c)_v|_2`` with ``L`` the
forward-difference gradient.  ``H^T H`` enters only through the Gram kernel,
``H^T g`` is precomputed, so an iteration costs a few 3D FFTs.

Splitting ``u = L c`` with multiplier ``u~`` gives the three steps::

    u   <- prox_{lambda/rho}(L c - u~/rho)
    c   <- (H^T H + rho L^T L)^{-1} (H^T g + rho L^T (u + u~/rho))
    u~  <- u~ + rho (u - L c)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .forward import HthKernel, apply_hth


def grad3d(c: np.ndarray) -> np.ndarray:
    """Forward differences along each axis, zero on the far face; shape ``(3, *c.shape)``."""
    c = np.asarray(c, dtype=float)
    out = np.zeros((3,) + c.shape)
    out[0, :-1] = c[1:] - c[:-1]
    out[1, :, :-1] = c[:, 1:] - c[:, :-1]
    out[2, :, :, :-1] = c[:, :, 1:] - c[:, :, :-1]
    return out


def grad3d_adjoint(u: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`grad3d` (the negative divergence)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape[1:])
    for ax in range(3):
        d = np.moveaxis(u[ax], ax, 0)
        o = np.moveaxis(out, ax, 0)  # view into out
        o[:-1] -= d[:-1]
        o[1:] += d[:-1]
    return out


def div3d(u: np.ndarray) -> np.ndarray:
    return -grad3d_adjoint(u)


def laplacian_neg(c: np.ndarray) -> np.ndarray:
    """``L^T L c``."""
    return grad3d_adjoint(grad3d(c))


def prox_l21(z: np.ndarray, mu: float) -> np.ndarray:
    """Group soft-thresholding of the leading (channel) axis."""
    if mu < 0:
        raise ValueError(f"threshold must be non-negative, got {mu}")
    z = np.asarray(z, dtype=float)
    if mu == 0:
        return z.copy()
    norm = np.sqrt(np.sum(z * z, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > mu, 1.0 - mu / norm, 0.0)
    return z * scale


def tv_norm(c: np.ndarray) -> float:
    """``sum_v |(L c)_v|_2``."""
    g = grad3d(c)
    return float(np.sum(np.sqrt(np.sum(g * g, axis=0))))


@dataclass
class CgResult:
    x: np.ndarray
    residual: float  # final relative residual |A x - b| / |b|
    iterations: int
    history: list = field(default_factory=list)  # relative residual after each iteration, starting at x0
    tol: float = 0.0

    @property
    def converged(self) -> bool:
        return self.residual <= self.tol


CG_METHODS = ("cr", "cg")


def cg_solve(
    apply_A: Callable,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    cg_iters: int = 20,
    cg_tol: float = 1e-6,
    method: str = "cr",
) -> CgResult:
    """Conjugate-direction solve of ``A x = b`` for symmetric positive (semi-)definite ``A``.

    ``method="cr"`` (conjugate residuals) minimises ``|b - A x|`` over the
    Krylov space, so the residual never increases; ``method="cg"`` is the
    classical variant, monotone only in the ``A``-norm of the error.  Both
    use one application of ``A`` per iteration.  Stops when the relative
    residual drops to ``cg_tol`` or after ``cg_iters`` iterations;
    non-convergence is reported, never raised.
    """
    if method not in CG_METHODS:
        raise ValueError(f"method must be one of {CG_METHODS}, got {method!r}")
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    bnorm = math.sqrt(float(np.vdot(b, b)))
    if bnorm == 0.0:
        return CgResult(np.zeros_like(b), 0.0, 0, [0.0], cg_tol)
    r = b - apply_A(x)
    hist = [math.sqrt(float(np.vdot(r, r))) / bnorm]
    it = 0
    p = r.copy()
    if method == "cg":
        rr = float(np.vdot(r, r))
        while it < cg_iters and hist[-1] > cg_tol:
            ap = apply_A(p)
            pap = float(np.vdot(p, ap))
            if pap <= 0.0:
                break  # direction in the null space of a semi-definite operator
            a = rr / pap
            x += a * p
            r -= a * ap
            rr_new = float(np.vdot(r, r))
            it += 1
            hist.append(math.sqrt(rr_new) / bnorm)
            p = r + (rr_new / rr) * p
            rr = rr_new
    else:
        ar = apply_A(r)
        ap = ar.copy()
        rar = float(np.vdot(r, ar))
        while it < cg_iters and hist[-1] > cg_tol:
            apap = float(np.vdot(ap, ap))
            if rar <= 0.0 or apap == 0.0:
                break
            a = rar / apap
            x += a * p
            r -= a * ap
            it += 1
            hist.append(math.sqrt(float(np.vdot(r, r))) / bnorm)
            ar = apply_A(r)
            rar_new = float(np.vdot(r, ar))
            beta = rar_new / rar
            p = r + beta * p
            ap = ar + beta * ap
            rar = rar_new
    return CgResult(x, hist[-1], it, hist, cg_tol)


@dataclass(frozen=True)
class AdmmConfig:
    """``lam``/``rho`` of ``None`` mean the noise-scaled defaults of :func:`default_weights`."""

    lam: float | None = None
    rho: float | None = None
    k_admm: int = 2
    cg_iters: int = 20
    cg_tol: float = 1e-6
    cg_method: str = "cr"

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.rho is not None and not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if self.k_admm < 1 or self.cg_iters < 1 or not self.cg_tol > 0:
            raise ValueError("k_admm, cg_iters and cg_tol must be positive")
        if self.cg_method not in CG_METHODS:
            raise ValueError(f"cg_method must be one of {CG_METHODS}, got {self.cg_method!r}")

    def resolve(self, sigma: float, n_images: int, kernel: HthKernel | None = None) -> tuple[float, float]:
        lam_d, rho_d = default_weights(sigma, n_images, kernel)
        lam = self.lam if self.lam is not None else lam_d
        rho = self.rho if self.rho is not None else max(10.0 * lam, rho_d)
        return lam, rho


RHO_FLOOR = 1e-3


def default_weights(sigma: float, n_images: int, kernel: HthKernel | None = None) -> tuple[float, float]:
    """``lambda = 0.01 sigma sqrt(P)`` and ``rho = 10 lambda``.

    ``rho`` is floored at ``RHO_FLOOR`` times the kernel's central value so
    the linear step stays well posed when ``sigma = 0``.
    """
    lam = 0.01 * sigma * math.sqrt(n_images)
    floor = RHO_FLOOR
    if kernel is not None:
        n = kernel.n
        floor *= float(kernel.w[n - 1, n - 1, n - 1])
    return lam, max(10.0 * lam, floor)


@dataclass
class TvState:
    """ADMM auxiliary variable ``u`` and multiplier ``u~`` (both ``(3, n, n, n)``)."""

    u: np.ndarray
    u_dual: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.u_dual.shape:
            raise ValueError("u and u_dual must have the same shape")

    @classmethod
    def start(cls, c: np.ndarray) -> "TvState":
        u = grad3d(c)
        return cls(u, np.zeros_like(u))

    def copy(self) -> "TvState":
        return TvState(self.u.copy(), self.u_dual.copy())


@dataclass
class AdmmRound:
    objective: float
    data_fidelity: float
    tv: float
    cg_residual: float
    cg_iterations: int
    cg_history: list
    primal_residual: float


@dataclass
class AdmmResult:
    c: np.ndarray
    state: TvState
    lam: float
    rho: float
    rounds: list

    @property
    def objectives(self) -> list:
        return [r.objective for r in self.rounds]


def data_fidelity(c: np.ndarray, kernel: HthKernel, htg: np.ndarray, g_sq: float) -> float:
    """``1/2 |g - H c|^2`` through the Gram kernel."""
    return 0.5 * float(np.vdot(c, apply_hth(c, kernel))) - float(np.vdot(c, htg)) + 0.5 * g_sq


def admm_reconstruct(
    kernel: HthKernel,
    htg: np.ndarray,
    c0: np.ndarray,
    cfg: AdmmConfig = AdmmConfig(),
    lam: float = 0.0,
    rho: float | None = None,
    state: TvState | None = None,
    g_sq: float = 0.0,
) -> AdmmResult:
    """Run ``cfg.k_admm`` ADMM rounds from ``c0`` (and ``state`` when warm-starting).

    ``lam``/``rho`` are the resolved weights (see :meth:`AdmmConfig.resolve`).
    ``g_sq = |g|^2`` only shifts the reported objective.
    """
    c = np.array(c0, dtype=float)
    if c.shape != htg.shape or c.shape != (kernel.n,) * 3:
        raise ValueError(f"shape mismatch: c {c.shape}, htg {htg.shape}, kernel n={kernel.n}")
    if rho is None:
        rho = default_weights(0.0, 1, kernel)[1] if lam == 0 else 10.0 * lam
    st = state.copy() if state is not None else TvState.start(c)

    def apply_a(x):
        return apply_hth(x, kernel) + rho * laplacian_neg(x)

    rounds = []
    for _ in range(cfg.k_admm):
        lc = grad3d(c)
        st.u = prox_l21(lc - st.u_dual / rho, lam / rho)
        b = htg + rho * grad3d_adjoint(st.u + st.u_dual / rho)
        sol = cg_solve(apply_a, b, c, cfg.cg_iters, cfg.cg_tol, cfg.cg_method)
        c = sol.x
        lc = grad3d(c)
        st.u_dual = st.u_dual + rho * (st.u - lc)
        fid = data_fidelity(c, kernel, htg, g_sq)
        tv = tv_norm(c)
        rounds.append(
            AdmmRound(
                objective=fid + lam * tv,
                data_fidelity=fid,
                tv=tv,
                cg_residual=sol.residual,
                cg_iterations=sol.iterations,
                cg_history=sol.history,
                primal_residual=float(np.linalg.norm(st.u - lc)),
            )
        )
    return AdmmResult(c, st, lam, rho, rounds)
