"""Fourier shell correlation, resolution at a threshold, volume SNR, pose-error histograms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geometry import align_to, wrap_angle_difference

COMPONENTS = ("theta1", "theta2", "theta3", "t1", "t2")


@dataclass
class FscCurve:
    """Correlation per shell; ``radii`` in cycles per voxel (Nyquist = 0.5)."""

    radii: np.ndarray
    values: np.ndarray
    eps_r: float
    counts: np.ndarray
    n: int
    gaps: tuple = ()  # shell indices skipped because they held no samples

    @property
    def nyquist(self) -> float:
        return 0.5

    def area(self) -> float:
        """Mean correlation over the shells (area under the curve per unit shell)."""
        return float(np.mean(self.values)) if len(self.values) else 0.0


def _shell_index(n: int) -> np.ndarray:
    f = np.fft.fftfreq(n) * n
    fx, fy, fz = np.meshgrid(f, f, f, indexing="ij")
    return np.sqrt(fx**2 + fy**2 + fz**2)


def fsc(v1: np.ndarray, v2: np.ndarray, eps_r: float = 0.5) -> FscCurve:
    """Shell-wise normalised cross-correlation of the 3D spectra (real part).

    Shell ``s`` holds the frequencies with ``s - eps_r <= |k| < s + eps_r``
    on the integer lattice, for ``s = 1 .. n // 2`` (DC excluded).
    """
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if v1.shape != v2.shape or v1.ndim != 3 or len(set(v1.shape)) != 1:
        raise ValueError(f"fsc needs equal cubic volumes, got {v1.shape} and {v2.shape}")
    n = v1.shape[0]
    f1 = np.fft.fftn(v1)
    f2 = np.fft.fftn(v2)
    r = _shell_index(n).ravel()
    cross = (f1 * np.conj(f2)).real.ravel()
    p1 = (np.abs(f1) ** 2).ravel()
    p2 = (np.abs(f2) ** 2).ravel()
    radii, values, counts, gaps = [], [], [], []
    for s in range(1, n // 2 + 1):
        sel = (r >= s - eps_r) & (r < s + eps_r)
        cnt = int(np.count_nonzero(sel))
        den = math.sqrt(float(p1[sel].sum()) * float(p2[sel].sum())) if cnt else 0.0
        if cnt == 0 or den == 0.0:
            gaps.append(s)
            continue
        radii.append(s / n)
        values.append(float(cross[sel].sum()) / den)
        counts.append(cnt)
    return FscCurve(np.array(radii), np.clip(np.array(values), -1.0, 1.0), eps_r, np.array(counts), n, tuple(gaps))


def resolution_at_threshold(curve: FscCurve, tau: float = 0.5) -> float:
    """Frequency of the first downward crossing of ``tau``, linearly interpolated.

    Returns Nyquist if the curve never drops below ``tau`` and 0 if it starts
    below.
    """
    if not -1.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (-1, 1), got {tau}")
    v, r = curve.values, curve.radii
    below = np.flatnonzero(v < tau)
    if len(below) == 0:
        return curve.nyquist
    i = int(below[0])
    if i == 0:
        return 0.0
    v0, v1 = v[i - 1], v[i]
    return float(r[i - 1] + (v0 - tau) / (v0 - v1) * (r[i] - r[i - 1]))


def volume_snr(gt: np.ndarray, rec: np.ndarray) -> float:
    """``20 log10(|gt| / |gt - rec|)`` in dB; ``inf`` when the two are equal."""
    gt = np.asarray(gt, dtype=float)
    rec = np.asarray(rec, dtype=float)
    if gt.shape != rec.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {rec.shape}")
    num = float(np.linalg.norm(gt))
    if num == 0:
        raise ValueError("ground truth is identically zero")
    den = float(np.linalg.norm(gt - rec))
    if den == 0:
        return math.inf
    return 20.0 * math.log10(num / den)


def pose_errors(true_poses: np.ndarray, est_poses: np.ndarray, align: bool = False) -> np.ndarray:
    """Signed ``true - est`` per component, ``(P, 5)``; angles wrapped to ``(-pi, pi]``.

    Angle errors are taken against whichever of the two equivalent Euler
    triples of the estimate lies closer to the true one.

    With ``align`` the best global rotation is removed from the estimates first.
    """
    t = np.asarray(true_poses, dtype=float)
    e = np.asarray(est_poses, dtype=float)
    if t.shape != e.shape:
        raise ValueError(f"pose lists differ: {t.shape} vs {e.shape}")
    if align and len(t):
        ang = np.array([a.as_array() for a in align_to(t[:, :3], e[:, :3])])
        e = np.c_[ang, e[:, 3:5]]
    d = t - e
    d[:, :3] = wrap_angle_difference(d[:, :3])
    # (t1, t2, t3) and (t1 + pi, -t2, t3 + pi) are the same pose; use the nearer triple
    alt = t[:, :3] - np.c_[e[:, 0] + math.pi, -e[:, 1], e[:, 2] + math.pi]
    alt = wrap_angle_difference(alt)
    swap = np.sum(alt * alt, axis=1) < np.sum(d[:, :3] ** 2, axis=1)
    d[swap, :3] = alt[swap]
    return d


@dataclass
class ErrorHistogram:
    edges: np.ndarray
    density: np.ndarray
    label: str

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def pose_error_pdf(true_poses, est_poses, component: str, bins=50, align: bool = False, degrees: bool = False) -> ErrorHistogram:
    """Density-normalised histogram of one error component."""
    if component not in COMPONENTS:
        raise ValueError(f"component must be one of {COMPONENTS}")
    d = pose_errors(true_poses, est_poses, align)[:, COMPONENTS.index(component)]
    if degrees and component.startswith("theta"):
        d = np.degrees(d)
    if np.isscalar(bins) and np.ptp(d) == 0:
        # degenerate sample: one bin centred on the common value
        w = 1e-6 if d[0] == 0 else 1e-6 * abs(d[0])
        edges = np.array([d[0] - w, d[0] + w])
        return ErrorHistogram(edges, np.array([1.0 / (2 * w)]), component)
    dens, edges = np.histogram(d, bins=bins, density=True)
    return ErrorHistogram(edges, dens, component)


def write_xy_csv(path, x, y) -> None:
    """Two-column ``x,y`` CSV with full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for a, b in zip(np.asarray(x, dtype=float), np.asarray(y, dtype=float)):
            w.writerow([repr(float(a)), repr(float(b))])


def fsc_to_csv(curve: FscCurve, path) -> None:
    write_xy_csv(path, curve.radii, curve.values)


def histogram_to_csv(hist: ErrorHistogram, path) -> None:
    write_xy_csv(path, hist.centers, hist.density)
