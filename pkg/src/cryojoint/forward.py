"""Discrete imaging operator ``H(theta, t)``, its adjoint and the Gram kernel.

Conventions
-----------
* Coefficients live on an ``n x n x n`` grid with unit spacing; index ``i``
  maps to the lattice point ``k = i - n // 2``.
* Detector pixels form an ``m x m`` grid; index ``j`` sits at
  ``Lambda (j - m // 2)``.
* ``psi = h * P(phi)`` is tabulated on a grid ``ov`` times finer than the
  detector, aligned so that every pixel centre is a table node.  This makes
  the tabulated back-projection the exact transpose of :func:`project`.
* ``psi * psi^v`` is the continuous autocorrelation.  The Gram kernel built
  from it only approximates the pixel-sum Gram matrix; the mismatch is
  aliasing of the basis at detector sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy.signal import fftconvolve

from . import _kernels as K
from .basis import DEFAULT_KBWF, KbwfParams, kbwf_xray, kbwf_xray_gradient
from .geometry import projection_matrix

DEFAULT_OVERSAMPLING = 16
MAX_TABLE_NODES = 8192


@dataclass(frozen=True)
class DetectorGrid:
    """``m x m`` detector with sampling steps ``Lambda = diag(delta1, delta2)``."""

    m: int
    delta1: float = 1.0
    delta2: float = 1.0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"detector size must be >= 1, got {self.m}")
        if not (self.delta1 > 0 and self.delta2 > 0):
            raise ValueError("sampling steps must be positive")

    @property
    def det(self) -> float:
        return self.delta1 * self.delta2

    def pixel_coords(self) -> np.ndarray:
        """Physical pixel centres, shape ``(m, m, 2)``."""
        j = np.arange(self.m) - self.m // 2
        y1, y2 = np.meshgrid(j * self.delta1, j * self.delta2, indexing="ij")
        return np.stack([y1, y2], axis=-1)


@dataclass(frozen=True)
class Psf:
    """Point-spread function sampled at detector resolution; ``None`` means ``h = delta``."""

    kernel: np.ndarray | None = None

    def __post_init__(self):
        if self.kernel is not None:
            k = np.asarray(self.kernel, dtype=float)
            if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
                raise ValueError(f"PSF kernel must be 2D with odd sides, got shape {k.shape}")
            if not np.all(np.isfinite(k)):
                raise ValueError("PSF kernel has non-finite entries")
            object.__setattr__(self, "kernel", k)

    @property
    def is_identity(self) -> bool:
        return self.kernel is None

    def support_radius(self, grid: DetectorGrid) -> float:
        if self.kernel is None:
            return 0.0
        h1, h2 = self.kernel.shape[0] // 2, self.kernel.shape[1] // 2
        return math.hypot(h1 * grid.delta1, h2 * grid.delta2)

    @classmethod
    def gaussian(cls, sigma: float, half: int | None = None) -> "Psf":
        """Normalised isotropic Gaussian blur (``sigma`` in pixels)."""
        if half is None:
            half = max(1, int(math.ceil(3 * sigma)))
        x = np.arange(-half, half + 1)
        g = np.exp(-0.5 * (x / sigma) ** 2)
        k = np.outer(g, g)
        return cls(k / k.sum())


IDENTITY_PSF = Psf()


@dataclass
class Table:
    """Values on a uniform 2D grid; node ``[0, 0]`` sits at ``origin``."""

    values: np.ndarray
    origin: tuple[float, float]
    step: tuple[float, float]

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        pts = np.ascontiguousarray(y.reshape(-1, 2))
        out = K.interp2_many(self.values, self.origin[0], self.origin[1], self.step[0], self.step[1], pts)
        return out.reshape(y.shape[:-1])

    @property
    def args(self):
        return (self.values, self.origin[0], self.origin[1], self.step[0], self.step[1])


@dataclass
class PsiTables:
    """Pose-independent lookup tables shared by all projections.

    ``psi`` and its gradient, the autocorrelation ``psi * psi^v`` and its
    gradient.  Per-image tables are produced on demand by :meth:`image_tables`.
    """

    basis: KbwfParams
    psf: Psf
    grid: DetectorGrid
    oversampling: int
    half: int
    psi: np.ndarray
    dpsi: np.ndarray  # shape (2, L, L)
    auto: Table
    dauto: tuple[Table, Table]
    psi_radius: float
    _spectra: dict = field(default_factory=dict, repr=False)

    @property
    def step(self) -> tuple[float, float]:
        return (self.grid.delta1 / self.oversampling, self.grid.delta2 / self.oversampling)

    @property
    def auto_radius(self) -> float:
        return 2.0 * self.psi_radius

    def psi_table(self) -> Table:
        s = self.step
        return Table(self.psi, (-self.half * s[0], -self.half * s[1]), s)

    def image_table(self, image: np.ndarray) -> Table:
        """Table of ``T(y) = sum_j g[j] psi(Lambda j - y)``.

        ``T`` equals ``(g * psi^v) / det(Lambda)`` with ``g`` read as a train of
        weighted impulses at the pixel centres.
        """
        return self._image_tables(image, 1)[0]

    def image_tables(self, image: np.ndarray) -> tuple[Table, Table, Table]:
        """``T`` together with tables of its two gradient components."""
        return self._image_tables(image, 3)

    def _image_tables(self, image: np.ndarray, channels: int) -> tuple:
        image = np.asarray(image, dtype=float)
        m, ov, half = self.grid.m, self.oversampling, self.half
        if image.shape != (m, m):
            raise ValueError(f"image shape {image.shape} does not match detector {(m, m)}")
        L = 2 * half + 1
        up_len = ov * (m - 1) + 1
        full = up_len + L - 1
        shape = (scipy.fft.next_fast_len(full, real=True),) * 2
        key = (shape, channels)
        spec = self._spectra.get(key)
        if spec is None:
            # reversed kernels: T = U * psi_rev, grad T = -U * dpsi_rev
            kern = np.stack([self.psi[::-1, ::-1], -self.dpsi[0][::-1, ::-1], -self.dpsi[1][::-1, ::-1]])[:channels]
            spec = scipy.fft.rfft2(kern, s=shape, axes=(1, 2))
            self._spectra[key] = spec
        up = np.zeros((up_len, up_len))
        up[::ov, ::ov] = image
        fu = scipy.fft.rfft2(up, s=shape)
        out = scipy.fft.irfft2(fu[None] * spec, s=shape, axes=(1, 2))[:, :full, :full]
        s = self.step
        cm = m // 2
        origin = (-(half + ov * cm) * s[0], -(half + ov * cm) * s[1])
        return tuple(Table(np.ascontiguousarray(o), origin, s) for o in out)


def build_psi_tables(
    basis: KbwfParams = DEFAULT_KBWF,
    psf: Psf = IDENTITY_PSF,
    grid: DetectorGrid | None = None,
    oversampling: int = DEFAULT_OVERSAMPLING,
) -> PsiTables:
    """Sample ``psi = h * P(phi)``, its gradient and its autocorrelation."""
    if grid is None:
        raise ValueError("a detector grid is required")
    if oversampling < 1:
        raise ValueError("oversampling must be >= 1")
    radius = basis.a + psf.support_radius(grid)
    s1, s2 = grid.delta1 / oversampling, grid.delta2 / oversampling
    half = int(math.ceil(radius / min(s1, s2))) + 3
    L = 2 * half + 1
    if 2 * L > MAX_TABLE_NODES:
        raise ValueError(
            f"table of {L} nodes per axis exceeds the budget of {MAX_TABLE_NODES // 2}; "
            "reduce the PSF support or the oversampling"
        )
    idx = np.arange(-half, half + 1)
    y = np.stack(np.meshgrid(idx * s1, idx * s2, indexing="ij"), axis=-1)
    if psf.is_identity:
        psi = kbwf_xray(y, basis)
        dpsi = np.moveaxis(kbwf_xray_gradient(y, basis), -1, 0)
    else:
        h = psf.kernel
        psi = np.zeros((L, L))
        dpsi = np.zeros((2, L, L))
        c1, c2 = h.shape[0] // 2, h.shape[1] // 2
        for a in range(h.shape[0]):
            for b in range(h.shape[1]):
                if h[a, b] == 0.0:
                    continue
                shift = np.array([(a - c1) * grid.delta1, (b - c2) * grid.delta2])
                psi += h[a, b] * kbwf_xray(y - shift, basis)
                dpsi += h[a, b] * np.moveaxis(kbwf_xray_gradient(y - shift, basis), -1, 0)
    cell = s1 * s2
    rev = psi[::-1, ::-1]
    auto = fftconvolve(psi, rev) * cell
    dauto = [fftconvolve(dpsi[i], rev) * cell for i in range(2)]
    origin = (-2 * half * s1, -2 * half * s2)
    # enforce the exact evenness of the autocorrelation and oddness of its gradient
    auto = 0.5 * (auto + auto[::-1, ::-1])
    dauto = [0.5 * (d - d[::-1, ::-1]) for d in dauto]
    return PsiTables(
        basis=basis,
        psf=psf,
        grid=grid,
        oversampling=oversampling,
        half=half,
        psi=psi,
        dpsi=dpsi,
        auto=Table(np.ascontiguousarray(auto), origin, (s1, s2)),
        dauto=tuple(Table(np.ascontiguousarray(d), origin, (s1, s2)) for d in dauto),
        psi_radius=radius,
    )


def _pose_parts(pose):
    """Return ``(angles[3], shift[2])`` from a Pose or a length-5 array."""
    if hasattr(pose, "as_array"):
        a = pose.as_array()
    else:
        a = np.asarray(pose, dtype=float)
    if a.shape == (3,):
        return a, np.zeros(2)
    return a[:3], a[3:5]


def project(c: np.ndarray, pose, tables: PsiTables) -> np.ndarray:
    """``g[j] = sum_k c[k] psi(Lambda j - M k - t)``."""
    c = np.ascontiguousarray(c, dtype=float)
    ang, t = _pose_parts(pose)
    g = tables.grid
    return K.project_one(
        c, projection_matrix(ang), float(t[0]), float(t[1]), tables.psi, tables.half,
        tables.oversampling, g.delta1, g.delta2, tables.psi_radius, g.m,
    )


def project_stack(c: np.ndarray, poses: np.ndarray, tables: PsiTables) -> np.ndarray:
    poses = np.asarray(poses, dtype=float)
    out = np.empty((len(poses), tables.grid.m, tables.grid.m))
    for p, pose in enumerate(poses):
        out[p] = project(c, pose, tables)
    return out


def backproject(images: np.ndarray, poses: np.ndarray, tables: PsiTables, n: int) -> np.ndarray:
    """``[H^T g]_k = sum_p T_p(M_p k + t_p)`` with tabulated ``T_p``.

    Projections are accumulated in index order, so the result does not depend
    on the number of threads.
    """
    images = np.asarray(images, dtype=float)
    poses = np.asarray(poses, dtype=float)
    if images.ndim == 2:
        images = images[None]
        poses = poses[None]
    if len(images) != len(poses):
        raise ValueError("images and poses differ in length")
    out = np.zeros((n, n, n))
    for img, pose in zip(images, poses):
        if not np.any(img):
            continue
        ang, t = _pose_parts(pose)
        tab = tables.image_table(img)
        K.backproject_accumulate(out, projection_matrix(ang), float(t[0]), float(t[1]), *tab.args)
    return out


@dataclass
class HthKernel:
    """Gram kernel ``w`` on offsets ``[-(n-1), n-1]^3`` plus its FFT for cyclic use."""

    w: np.ndarray
    n: int
    spectrum: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.w.shape != (2 * self.n - 1,) * 3:
            raise ValueError(f"kernel shape {self.w.shape} does not match n={self.n}")
        if self.spectrum is None:
            self.spectrum = kernel_spectrum(self.w, self.n)


def kernel_spectrum(w: np.ndarray, n: int) -> np.ndarray:
    size = 2 * n
    wrapped = np.zeros((size,) * 3)
    idx = np.arange(-(n - 1), n) % size
    wrapped[np.ix_(idx, idx, idx)] = w
    return scipy.fft.rfftn(wrapped)


def compute_hth_kernel(angles: np.ndarray, tables: PsiTables, n: int) -> HthKernel:
    """``w[d] = (1/det Lambda) sum_p (psi * psi^v)(M_p d)``.

    Only orientations enter; shifts are ignored by construction.
    """
    angles = np.asarray(angles, dtype=float)
    if angles.ndim == 1:
        angles = angles[None]
    mats = np.ascontiguousarray(np.stack([projection_matrix(a[:3]) for a in angles]))
    w = np.zeros((2 * n - 1,) * 3)
    K.kernel_accumulate(w, mats, *tables.auto.args, tables.auto_radius)
    w /= tables.grid.det
    return HthKernel(w, n)


def apply_hth(c: np.ndarray, kernel: HthKernel) -> np.ndarray:
    """Linear (zero-padded) convolution of ``c`` with the Gram kernel."""
    n = kernel.n
    if c.shape != (n, n, n):
        raise ValueError(f"coefficient shape {c.shape} does not match kernel n={n}")
    size = 2 * n
    fc = scipy.fft.rfftn(c, s=(size,) * 3)
    return scipy.fft.irfftn(fc * kernel.spectrum, s=(size,) * 3)[:n, :n, :n]


def hth_direct(c: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Reference O(N^2) evaluation of ``sum_k' w[k - k'] c[k']``."""
    n = c.shape[0]
    out = np.zeros_like(c, dtype=float)
    for idx in np.argwhere(c != 0):
        i, j, l = idx
        sl = w[n - 1 - i : 2 * n - 1 - i, n - 1 - j : 2 * n - 1 - j, n - 1 - l : 2 * n - 1 - l]
        out += c[i, j, l] * sl
    return out


def autocorrelation(c: np.ndarray) -> np.ndarray:
    """``A[d] = sum_k c[k] c[k + d]`` on offsets ``[-(n-1), n-1]^3``."""
    n = c.shape[0]
    size = 2 * n
    f = scipy.fft.rfftn(c, s=(size,) * 3)
    full = scipy.fft.irfftn(f * np.conj(f), s=(size,) * 3)
    idx = np.arange(-(n - 1), n) % size
    return np.ascontiguousarray(full[np.ix_(idx, idx, idx)])


def dense_matrix(pose, tables: PsiTables, n: int) -> np.ndarray:
    """Explicit ``M x N`` matrix of ``H(theta, t)`` (small ``n`` only)."""
    cols = []
    for idx in range(n**3):
        e = np.zeros(n**3)
        e[idx] = 1.0
        cols.append(project(e.reshape(n, n, n), pose, tables).ravel())
    return np.stack(cols, axis=1)
