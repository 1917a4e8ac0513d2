"""Outer alternation between volume and pose updates, and half-split refinement."""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .admm import AdmmConfig, TvState, admm_reconstruct
from .forward import PsiTables, backproject, compute_hth_kernel
from .metrics import FscCurve, fsc, resolution_at_threshold
from .refine import GdConfig, VolumeContext, refine_latents_batched
from .simulate import synthesize


class NumericalFailure(RuntimeError):
    """Non-finite values appeared in the reconstruction state."""

    def __init__(self, iteration: int, what: str):
        super().__init__(f"non-finite {what} after outer iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class JointConfig:
    max_outer_iters: int = 40
    admm: AdmmConfig = AdmmConfig()
    gd: GdConfig = GdConfig()
    half_split: bool = False
    fsc_stall_patience: int = 1
    batch_size: int = 32
    threads: int = 1
    sigma: float = 0.0  # noise level used by the default ADMM weights
    fsc_threshold: float = 0.5
    postprocess_threshold: float = 0.143

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.fsc_stall_patience < 1:
            raise ValueError("fsc_stall_patience must be >= 1")
        if self.batch_size < 1 or self.threads < 1:
            raise ValueError("batch_size and threads must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass
class IterationRecord:
    iteration: int
    objective_admm: float  # after the volume update, at the previous poses
    objective_gd: float  # after the pose update (equals objective_admm without refinement)
    data_fidelity: float
    tv: float
    cg_residual: float
    mean_dtheta: float  # mean absolute wrapped change of the Euler angles
    mean_dt: float  # mean absolute change of the shifts
    gd_exhausted: int
    r_c: float | None = None  # against the ground truth when available
    fsc_area: float | None = None  # half-map FSC area (half-split runs)
    seconds: float = 0.0

    def as_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("seconds")
        return d


@dataclass
class RefinementTrace:
    records: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def append(self, rec: IterationRecord) -> None:
        self.records.append(rec)

    def to_jsonl(self, timing: bool = False) -> str:
        """One JSON object per iteration; timings are left out unless requested."""
        lines = [json.dumps(r.as_dict(timing), sort_keys=True, allow_nan=True) for r in self.records]
        lines += [json.dumps({"note": n}, sort_keys=True) for n in self.notes]
        return "".join(line + "\n" for line in lines)

    def write(self, path, timing: bool = False) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl(timing))

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


def _wrapped_abs(d: np.ndarray) -> np.ndarray:
    return np.abs(np.mod(d + math.pi, 2.0 * math.pi) - math.pi)


class JointRun:
    """State of one joint refinement, advanced one outer iteration at a time."""

    def __init__(self, images, poses, c0, tables: PsiTables, cfg: JointConfig, ground_truth=None, keep_gd_traces: bool = False):
        self.images = np.asarray(images, dtype=float)
        self.poses = np.array(poses, dtype=float)
        if self.images.ndim != 3 or len(self.images) != len(self.poses) or self.poses.shape[1:] != (5,):
            raise ValueError(f"{len(self.images)} images do not match pose array {self.poses.shape}")
        m = tables.grid.m
        if self.images.shape[1:] != (m, m):
            raise ValueError(f"images are {self.images.shape[1:]}, detector is {(m, m)}")
        self.c = np.array(c0, dtype=float)
        if self.c.ndim != 3 or len(set(self.c.shape)) != 1:
            raise ValueError(f"volume must be a cube, got {self.c.shape}")
        self.n = self.c.shape[0]
        self.tables = tables
        self.cfg = cfg
        self.ground_truth = None if ground_truth is None else synthesize(np.asarray(ground_truth, dtype=float), tables.basis)
        self.keep_gd_traces = keep_gd_traces
        self.gd_traces: list = []
        self.trace = RefinementTrace()
        self.state: TvState | None = None
        self.iteration = 0
        self.g_sq = float(np.sum(self.images * self.images))
        self._kernel = None
        self._htg = None
        self.lam = self.rho = None

    def _operators(self):
        if self._kernel is None:
            self._kernel = compute_hth_kernel(self.poses[:, :3], self.tables, self.n)
        if self._htg is None:
            self._htg = backproject(self.images, self.poses, self.tables, self.n)
        return self._kernel, self._htg

    def step(self) -> IterationRecord:
        cfg = self.cfg
        start = time.perf_counter()
        kernel, htg = self._operators()
        if self.lam is None:
            self.lam, self.rho = cfg.admm.resolve(cfg.sigma, len(self.images), kernel)
        res = admm_reconstruct(kernel, htg, self.c, cfg.admm, self.lam, self.rho, self.state, self.g_sq)
        self.c, self.state = res.c, res.state
        last = res.rounds[-1]
        self.iteration += 1
        self._guard(self.c, "volume")
        self._guard(np.array([last.objective, last.cg_residual]), "objective")

        obj_gd = last.objective
        dtheta = dt = 0.0
        exhausted = 0
        if cfg.gd.k_gd > 0:
            new_htg = np.zeros_like(htg)
            ctx = VolumeContext(self.c, self.tables)
            rr = refine_latents_batched(
                self.c, self.images, self.poses, self.tables, cfg.gd, cfg.batch_size, cfg.threads, new_htg, ctx
            )
            self._guard(rr.poses, "poses")
            dtheta = float(np.mean(_wrapped_abs(rr.poses[:, :3] - self.poses[:, :3])))
            dt = float(np.mean(np.abs(rr.poses[:, 3:] - self.poses[:, 3:])))
            exhausted = rr.exhausted
            obj_gd = rr.total_cost + self.lam * last.tv
            if self.keep_gd_traces:
                self.gd_traces.append(rr.traces)
            self.poses = rr.poses
            self._htg = new_htg
            self._kernel = None

        rec = IterationRecord(
            iteration=self.iteration,
            objective_admm=last.objective,
            objective_gd=obj_gd,
            data_fidelity=last.data_fidelity,
            tv=last.tv,
            cg_residual=last.cg_residual,
            mean_dtheta=dtheta,
            mean_dt=dt,
            gd_exhausted=exhausted,
        )
        if self.ground_truth is not None:
            rec.r_c = resolution_at_threshold(fsc(self.density(), self.ground_truth), cfg.fsc_threshold)
        if cfg.gd.k_gd > 0 and exhausted:
            self.trace.notes.append(f"iteration {self.iteration}: {exhausted} line searches exhausted")
        rec.seconds = time.perf_counter() - start
        self.trace.append(rec)
        return rec

    def density(self) -> np.ndarray:
        return synthesize(self.c, self.tables.basis)

    def _guard(self, arr, what):
        if not np.all(np.isfinite(arr)):
            raise NumericalFailure(self.iteration, what)


@dataclass
class JointResult:
    c: np.ndarray
    poses: np.ndarray
    trace: RefinementTrace
    run: JointRun | None = field(default=None, repr=False)


def joint_refine(images, poses, c0, tables: PsiTables, cfg: JointConfig = JointConfig(), ground_truth=None, keep_gd_traces=False, callback=None) -> JointResult:
    """Alternate ADMM volume updates and pose descent for ``cfg.max_outer_iters`` iterations.

    ``callback(run, record)`` may return ``True`` to stop early.
    """
    run = JointRun(images, poses, c0, tables, cfg, ground_truth, keep_gd_traces)
    for _ in range(cfg.max_outer_iters):
        rec = run.step()
        if callback is not None and callback(run, rec):
            run.trace.notes.append(f"stopped by callback after iteration {run.iteration}")
            break
    return JointResult(run.c, run.poses, run.trace, run)


# ----------------------------------------------------------------------------- half split


def split_indices(P: int) -> tuple[np.ndarray, np.ndarray]:
    """Even and odd projection indices."""
    if P < 2:
        raise ValueError(f"half-split refinement needs P >= 2, got {P}")
    idx = np.arange(P)
    return idx[0::2], idx[1::2]


@dataclass
class HalfSplitResult:
    half1: np.ndarray
    half2: np.ndarray
    average: np.ndarray
    poses: np.ndarray
    fsc: FscCurve
    trace: RefinementTrace
    stop_iteration: int
    best_iteration: int
    traces: tuple = ()


def half_split_refine(images, poses, c0, tables: PsiTables, cfg: JointConfig = JointConfig(), ground_truth=None, split=None) -> HalfSplitResult:
    """Refine the even and odd halves independently, in lockstep, from the same ``c0``.

    After every outer iteration the half maps are compared; refinement stops
    once the area under their FSC has failed to increase for
    ``cfg.fsc_stall_patience`` consecutive iterations.  The half maps (and
    poses) of the best iteration are returned together with their average.
    """
    images = np.asarray(images, dtype=float)
    poses = np.asarray(poses, dtype=float)
    ia, ib = split if split is not None else split_indices(len(images))
    runs = [JointRun(images[ia], poses[ia], c0, tables, cfg, ground_truth), JointRun(images[ib], poses[ib], c0, tables, cfg, ground_truth)]
    trace = RefinementTrace()
    best_area, best = -math.inf, None
    stalls = 0
    stop = cfg.max_outer_iters
    for it in range(1, cfg.max_outer_iters + 1):
        recs = [r.step() for r in runs]
        curve = fsc(runs[0].density(), runs[1].density())
        area = curve.area()
        rec = replace(
            recs[0],
            objective_admm=recs[0].objective_admm + recs[1].objective_admm,
            objective_gd=recs[0].objective_gd + recs[1].objective_gd,
            data_fidelity=recs[0].data_fidelity + recs[1].data_fidelity,
            mean_dtheta=0.5 * (recs[0].mean_dtheta + recs[1].mean_dtheta),
            mean_dt=0.5 * (recs[0].mean_dt + recs[1].mean_dt),
            gd_exhausted=recs[0].gd_exhausted + recs[1].gd_exhausted,
            cg_residual=max(recs[0].cg_residual, recs[1].cg_residual),
            tv=recs[0].tv + recs[1].tv,
            fsc_area=area,
            seconds=recs[0].seconds + recs[1].seconds,
            r_c=None,
        )
        if ground_truth is not None:
            avg = 0.5 * (runs[0].density() + runs[1].density())
            rec.r_c = resolution_at_threshold(fsc(avg, runs[0].ground_truth), cfg.fsc_threshold)
        trace.append(rec)
        if area > best_area:
            best_area, stalls = area, 0
            best = (it, runs[0].c.copy(), runs[1].c.copy(), runs[0].poses.copy(), runs[1].poses.copy(), curve)
        else:
            stalls += 1
            if stalls >= cfg.fsc_stall_patience:
                stop = it
                trace.notes.append(f"half-map FSC area stalled at iteration {it}; best iteration {best[0]}")
                break
    it_best, c1, c2, p1, p2, curve = best
    merged = np.empty_like(poses)
    merged[ia] = p1
    merged[ib] = p2
    return HalfSplitResult(c1, c2, 0.5 * (c1 + c2), merged, curve, trace, stop, it_best, (runs[0].trace, runs[1].trace))


# ----------------------------------------------------------------------------- post-processing


def soft_mask(n: int, radius: float, edge: float = 3.0) -> np.ndarray:
    """1 inside ``radius``, raised-cosine fall-off to 0 over ``edge`` voxels."""
    x = np.arange(n) - n // 2
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    r = np.sqrt(X**2 + Y**2 + Z**2)
    t = np.clip((r - radius) / edge, 0.0, 1.0)
    return 0.5 + 0.5 * np.cos(np.pi * t)


def lowpass(volume: np.ndarray, cutoff: float) -> np.ndarray:
    """Zero every Fourier coefficient with ``|k| / n > cutoff`` (cycles per voxel)."""
    n = volume.shape[0]
    f = np.fft.fftfreq(n)
    fx, fy, fz = np.meshgrid(f, f, f, indexing="ij")
    keep = np.sqrt(fx**2 + fy**2 + fz**2) <= cutoff + 1e-12
    return np.fft.ifftn(np.fft.fftn(volume) * keep).real


def postprocess(volume: np.ndarray, curve: FscCurve, mask_radius: float | None = None, threshold: float = 0.143, edge: float = 3.0):
    """Soft spherical mask, then a sharp low-pass where the half-map FSC crosses ``threshold``.

    Returns ``(volume, note)``.  If the curve starts below the threshold there
    is no crossing to use and the input is passed through unchanged.  If it
    never drops below, only the mask is applied.
    """
    volume = np.asarray(volume, dtype=float)
    n = volume.shape[0]
    if mask_radius is None:
        mask_radius = n / 2 - edge - 1
    if len(curve.values) == 0 or curve.values[0] < threshold:
        note = f"FSC never reaches {threshold}; volume passed through unchanged"
        warnings.warn(note, RuntimeWarning, stacklevel=2)
        return volume.copy(), note
    masked = volume * soft_mask(n, mask_radius, edge)
    cutoff = resolution_at_threshold(curve, threshold)
    if not np.any(curve.values < threshold):
        return masked, "FSC stays above threshold; mask only"
    return lowpass(masked, cutoff), f"low-pass at {cutoff:.6g} cycles/voxel"
