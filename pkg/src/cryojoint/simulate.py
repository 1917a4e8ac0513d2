"""Synthetic phantoms, pose sampling, noisy projection stacks and pose perturbation.

Randomness is drawn from per-purpose, per-projection streams keyed by
``(seed, stream, p)``, so any subset of projections can be generated in any
order (or in parallel) with identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .admm import cg_solve
from .basis import DEFAULT_KBWF, KbwfParams, kbwf_value
from .forward import DetectorGrid, IDENTITY_PSF, Psf, PsiTables, build_psi_tables, project
from .geometry import canonicalize

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))

# Peak blob weight of the desk phantom.  Pose gradients scale with the square
# of the intensity while the default step sizes are absolute, so this sets
# the units in which those steps are meaningful.
DESK_AMPLITUDE = 100.0

# stream identifiers
_ORIENT, _SHIFT, _NOISE, _INIT1, _PHANTOM = 1, 2, 3, 4, 5


def stream_rng(seed: int, stream: int, p: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream, p)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(stream, p))))


def sample_orientations(P: int, seed: int) -> np.ndarray:
    """``(P, 3)`` canonical Euler triples with equi-distributed viewing directions.

    Viewing directions ``(theta3, theta2)`` (azimuth, polar) follow a
    spherical Fibonacci lattice; the in-plane angle ``theta1`` is uniform on
    ``[0, 2 pi)``.
    """
    if P < 1:
        raise ValueError(f"P must be >= 1, got {P}")
    i = np.arange(P)
    z = 1.0 - (2.0 * i + 1.0) / P
    polar = np.arccos(z)
    azim = np.mod(i * GOLDEN_ANGLE, 2.0 * math.pi)
    inplane = np.array([stream_rng(seed, _ORIENT, p).uniform(0.0, 2.0 * math.pi) for p in range(P)])
    return np.array([canonicalize(a, b, c) for a, b, c in zip(inplane, polar, azim)])


def sample_shifts(P: int, m_t: float, seed: int) -> np.ndarray:
    """``(P, 2)`` shifts, each component uniform on ``[-m_t, m_t]``."""
    if m_t < 0:
        raise ValueError(f"m_t must be >= 0, got {m_t}")
    if m_t == 0:
        return np.zeros((P, 2))
    return np.array([stream_rng(seed, _SHIFT, p).uniform(-m_t, m_t, 2) for p in range(P)])


def perturb_poses_init1(true_poses: np.ndarray, e_theta: float, seed: int) -> np.ndarray:
    """Add ``Unif(-e_theta, e_theta)`` to every Euler angle; zero the shifts."""
    if e_theta < 0:
        raise ValueError(f"e_theta must be >= 0, got {e_theta}")
    true_poses = np.asarray(true_poses, dtype=float)
    out = np.zeros((len(true_poses), 5))
    for p, pose in enumerate(true_poses):
        eps = stream_rng(seed, _INIT1, p).uniform(-e_theta, e_theta, 3) if e_theta > 0 else np.zeros(3)
        out[p, :3] = canonicalize(*(pose[:3] + eps))
    return out


# ----------------------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class Blob:
    center: tuple
    radii: tuple  # standard deviations along the rotated axes
    rotation: tuple  # 3x3 row-major
    weight: float


@dataclass(frozen=True)
class Shell:
    center: tuple
    radius: float
    thickness: float
    weight: float


@dataclass
class Phantom:
    """Procedural density (Gaussian blobs plus one off-centre shell) and its KBWF coefficients."""

    name: str
    n: int
    blobs: list
    shell: Shell
    density: np.ndarray = field(repr=False)  # fitted samples on the grid
    coeffs: np.ndarray = field(repr=False)
    fit_residual: float = 0.0
    extent: float = 0.0


def render_density(n: int, blobs, shell: Shell | None) -> np.ndarray:
    """Sample the analytic density at the integer grid points ``k = i - n//2``."""
    x = np.arange(n) - n // 2
    pts = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).astype(float)
    v = np.zeros((n, n, n))
    for b in blobs:
        d = (pts - np.asarray(b.center)) @ np.asarray(b.rotation).reshape(3, 3).T
        v += b.weight * np.exp(-0.5 * np.sum((d / np.asarray(b.radii)) ** 2, axis=-1))
    if shell is not None:
        r = np.linalg.norm(pts - np.asarray(shell.center), axis=-1)
        v += shell.weight * np.exp(-0.5 * ((r - shell.radius) / shell.thickness) ** 2)
    return v


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def kbwf_stencil(n_radius: int, basis: KbwfParams = DEFAULT_KBWF) -> np.ndarray:
    """``phi`` sampled at integer offsets ``[-n_radius, n_radius]^3``."""
    x = np.arange(-n_radius, n_radius + 1)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return kbwf_value(np.sqrt(X**2 + Y**2 + Z**2), basis)


def _synthesis_operator(n: int, basis: KbwfParams):
    """``B c = sum_k c[k] phi(x - k)`` at the grid points (zero-padded FFT convolution).

    The stencil is even, so ``B`` is symmetric.
    """
    rad = int(math.ceil(basis.a))
    shape = (scipy.fft.next_fast_len(n + 2 * rad),) * 3
    spec = scipy.fft.rfftn(kbwf_stencil(rad, basis), s=shape)

    def apply(c):
        full = scipy.fft.irfftn(scipy.fft.rfftn(c, s=shape) * spec, s=shape)
        return full[rad : rad + n, rad : rad + n, rad : rad + n]

    return apply


def synthesize(c: np.ndarray, basis: KbwfParams = DEFAULT_KBWF) -> np.ndarray:
    """Evaluate ``sum_k c[k] phi(x - k)`` at the grid points."""
    return _synthesis_operator(c.shape[0], basis)(np.asarray(c, dtype=float))


def fit_coefficients(v: np.ndarray, basis: KbwfParams = DEFAULT_KBWF, tol: float = 1e-8, max_iter: int = 500, support: np.ndarray | None = None):
    """Least-squares KBWF coefficients reproducing ``v`` at the grid points.

    ``support`` (boolean, optional) restricts which coefficients may be
    non-zero.  Returns ``(c, relative_residual)``; solved by CG on the normal
    equations ``S B^T B S c = S B^T v``.
    """
    fwd = _synthesis_operator(v.shape[0], basis)
    mask = np.ones(v.shape, dtype=bool) if support is None else np.asarray(support, dtype=bool)
    sol = cg_solve(lambda c: fwd(fwd(c * mask)) * mask, fwd(v) * mask, None, max_iter, tol)
    c = sol.x * mask
    res = float(np.linalg.norm(fwd(c) - v) / np.linalg.norm(v))
    return c, res


def make_phantom(n: int, seed: int = 0, amplitude: float = DESK_AMPLITUDE, n_blobs: int = 6, basis: KbwfParams = DEFAULT_KBWF, extent: float | None = None) -> Phantom:
    """The "desk" phantom: anisotropic Gaussian blobs and one off-centre shell.

    The density is tapered to zero outside a ball of radius ``extent``
    (default ``n/4``) and the coefficients are confined to radius
    ``extent + 2``.  With the basis support added, projections then fit on an
    ``n x n`` detector with room for two pixels of shift.  ``amplitude`` is
    the peak weight of the largest blob.
    """
    if n < 8:
        raise ValueError(f"phantom needs n >= 8, got {n}")
    rng = stream_rng(seed, _PHANTOM)
    R = 0.25 * n if extent is None else float(extent)
    blobs = []
    for i in range(n_blobs):
        # centre uniformly in a ball of radius R/2, size between R/8 and R/4
        d = rng.standard_normal(3)
        d *= 0.5 * R * rng.uniform() ** (1 / 3) / np.linalg.norm(d)
        radii = tuple(rng.uniform(R / 8, R / 4, 3))
        weight = amplitude * (1.0 if i == 0 else rng.uniform(0.4, 1.0))
        blobs.append(Blob(tuple(d), radii, tuple(_random_rotation(rng).ravel()), weight))
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    shell = Shell(tuple(0.45 * R * direction), 0.3 * R, max(1.0, R / 8), 0.6 * amplitude)
    v = render_density(n, blobs, shell)
    # taper to zero outside the ball so the support is exactly bounded
    x = np.arange(n) - n // 2
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    r = np.sqrt(X**2 + Y**2 + Z**2)
    taper = np.clip((R + 1.0 - r) / 2.0, 0.0, 1.0)
    taper = 0.5 - 0.5 * np.cos(np.pi * taper)
    v = v * taper
    c, res = fit_coefficients(v, basis, support=r <= R + 2.0)
    return Phantom("desk", n, blobs, shell, v, c, res, R)


# ----------------------------------------------------------------------------- datasets


SNR_MODES = ("data", "pixel")


@dataclass(frozen=True)
class SimConfig:
    """Data-generation settings.

    ``snr_db = inf`` gives noiseless data.  ``snr_mode = "data"`` uses
    ``SNR = (1/P) sum |g*_p|^2 / sigma^2``; ``"pixel"`` divides the image
    energy by the pixel count as well.
    """

    n: int = 32
    P: int = 500
    m: int | None = None  # detector side, defaults to n
    m_t: float = 0.0
    snr_db: float = 0.0
    snr_mode: str = "data"
    seed: int = 1
    psf_sigma: float = 0.0  # Gaussian PSF width in pixels, 0 for none
    amplitude: float = DESK_AMPLITUDE  # used when the phantom is built from this config

    def __post_init__(self):
        if self.P < 1:
            raise ValueError(f"P must be >= 1, got {self.P}")
        if self.n < 8:
            raise ValueError(f"n must be >= 8, got {self.n}")
        if self.m_t < 0:
            raise ValueError(f"m_t must be >= 0, got {self.m_t}")
        if self.snr_mode not in SNR_MODES:
            raise ValueError(f"snr_mode must be one of {SNR_MODES}")
        if math.isnan(self.snr_db):
            raise ValueError("snr_db is NaN")

    @property
    def detector(self) -> DetectorGrid:
        return DetectorGrid(self.m if self.m is not None else self.n)

    @property
    def psf(self) -> Psf:
        return IDENTITY_PSF if self.psf_sigma == 0 else Psf.gaussian(self.psf_sigma)


@dataclass
class Dataset:
    images: np.ndarray  # (P, m, m)
    true_poses: np.ndarray  # (P, 5)
    sigma: float
    clean_energy: float  # (1/P) sum |g*_p|^2
    config: SimConfig
    clean: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_images(self) -> int:
        return len(self.images)

    def measured_snr(self) -> float:
        """Achieved SNR (linear, in the configured convention) from the realised noise."""
        if self.clean is None or self.sigma == 0:
            return math.inf
        noise = self.images - self.clean
        var = float(np.mean(noise * noise))
        energy = self.clean_energy / (self.images[0].size if self.config.snr_mode == "pixel" else 1)
        return energy / var


def noise_sigma(clean_energy: float, snr_db: float, mode: str, pixels: int) -> float:
    if clean_energy <= 0:
        raise ValueError("clean images carry no energy; SNR is undefined")
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    snr = 10.0 ** (snr_db / 10.0)
    energy = clean_energy / pixels if mode == "pixel" else clean_energy
    return math.sqrt(energy / snr)


def generate_dataset(coeffs: np.ndarray, cfg: SimConfig, tables: PsiTables | None = None, keep_clean: bool = True) -> Dataset:
    """Project ``coeffs`` at sampled poses and add white Gaussian noise."""
    tables = tables if tables is not None else build_psi_tables(psf=cfg.psf, grid=cfg.detector)
    angles = sample_orientations(cfg.P, cfg.seed)
    shifts = sample_shifts(cfg.P, cfg.m_t, cfg.seed)
    poses = np.c_[angles, shifts]
    clean = np.stack([project(coeffs, pose, tables) for pose in poses])
    energy = float(np.mean(np.sum(clean * clean, axis=(1, 2))))
    m = tables.grid.m
    sigma = noise_sigma(energy, cfg.snr_db, cfg.snr_mode, m * m)
    images = clean.copy()
    if sigma > 0:
        for p in range(cfg.P):
            images[p] += sigma * stream_rng(cfg.seed, _NOISE, p).standard_normal((m, m))
    return Dataset(images, poses, sigma, energy, cfg, clean if keep_clean else None)
