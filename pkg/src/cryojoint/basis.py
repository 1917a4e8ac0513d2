"""Kaiser-Bessel window function (KBWF) basis.

Everything here is radial: the KBWF ``phi`` is isotropic in 3D, so its X-ray
transform ``P(phi)`` is the same 2D radial profile for every orientation.

Modified Bessel functions are evaluated in-house so that the basis does not
depend on a special-function library:

* integer order: power series below ``x = 15``, Hankel asymptotic expansion
  above;
* half-integer order: power series below ``x = 2``, elementary closed forms
  (``sinh``/``cosh`` plus the three-term recurrence) above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_INT_SWITCH = 15.0
_HALF_SWITCH = 2.0


def _series(nu: float, x: np.ndarray, terms: int = 80) -> np.ndarray:
    half = 0.5 * x
    q = half * half
    term = np.power(half, nu) / math.gamma(nu + 1.0)
    total = term.copy()
    for k in range(1, terms):
        term = term * q / (k * (k + nu))
        total = total + term
        if np.all(term <= 1e-17 * total):
            break
    return total


def _asymptotic(nu: float, x: np.ndarray, terms: int = 30) -> np.ndarray:
    mu = 4.0 * nu * nu
    term = np.ones_like(x)
    total = np.ones_like(x)
    for k in range(1, terms):
        term = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        total = total + term
        if np.all(np.abs(term) <= 1e-17 * np.abs(total)):
            break
    return np.exp(x) / np.sqrt(2.0 * math.pi * x) * total


def _half_closed(nu: float, x: np.ndarray) -> np.ndarray:
    # I_{-1/2} and I_{1/2}, then I_{k+1} = I_{k-1} - (2k/x) I_k
    pref = np.sqrt(2.0 / (math.pi * x))
    lo, hi = pref * np.cosh(x), pref * np.sinh(x)
    if nu == -0.5:
        return lo
    order = 0.5
    while order < nu:
        lo, hi = hi, lo - (2.0 * order / x) * hi
        order += 1.0
    return hi


def bessel_i(nu: float, x) -> np.ndarray:
    """Modified Bessel function of the first kind ``I_nu(x)`` for ``x >= 0``.

    ``nu`` must be a non-negative integer or a half-integer ``>= -1/2``.
    """
    x = np.asarray(x, dtype=float)
    two_nu = 2.0 * nu
    if two_nu != round(two_nu) or nu < -0.5:
        raise ValueError(f"unsupported order {nu}")
    out = np.empty_like(x)
    if float(nu).is_integer():
        small = x < _INT_SWITCH
        if np.any(small):
            out[small] = _series(nu, x[small])
        if np.any(~small):
            out[~small] = _asymptotic(nu, x[~small])
    else:
        small = x < _HALF_SWITCH
        if np.any(small):
            with np.errstate(divide="ignore"):
                out[small] = _series(nu, x[small])
        if np.any(~small):
            out[~small] = _half_closed(nu, x[~small])
    return out


@dataclass(frozen=True)
class KbwfParams:
    """KBWF support radius ``a``, taper ``alpha`` and order ``m``."""

    a: float = 4.0
    alpha: float = 19.0
    m: int = 2

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"support radius must be positive, got {self.a}")
        if not self.alpha > 0:
            raise ValueError(f"taper must be positive, got {self.alpha}")
        if int(self.m) != self.m or self.m < 1:
            # the X-ray gradient needs I_{m-1/2} with m >= 1
            raise ValueError(f"order m must be an integer >= 1, got {self.m}")

    @property
    def xray_scale(self) -> float:
        """``A = sqrt(2 pi / alpha) / I_m(alpha)``."""
        return math.sqrt(2.0 * math.pi / self.alpha) / float(bessel_i(self.m, np.array([self.alpha]))[0])

    def to_dict(self) -> dict:
        return {"a": self.a, "alpha": self.alpha, "m": self.m}


DEFAULT_KBWF = KbwfParams()


def _beta(r: np.ndarray, a: float) -> np.ndarray:
    return np.sqrt(np.clip(1.0 - (r / a) ** 2, 0.0, None))


def kbwf_value(r, params: KbwfParams = DEFAULT_KBWF) -> np.ndarray:
    """KBWF ``phi(r)`` at radial distance ``r``."""
    r = np.abs(np.asarray(r, dtype=float))
    b = _beta(r, params.a)
    i_alpha = bessel_i(params.m, np.array([params.alpha]))[0]
    val = b**params.m * bessel_i(params.m, params.alpha * b) / i_alpha
    return np.where(r < params.a, val, 0.0)


def kbwf_xray_radial(r, params: KbwfParams = DEFAULT_KBWF) -> np.ndarray:
    """X-ray transform of the KBWF as a function of ``||y||``."""
    r = np.abs(np.asarray(r, dtype=float))
    b = _beta(r, params.a)
    nu = params.m + 0.5
    val = params.a * params.xray_scale * b**nu * bessel_i(nu, params.alpha * b)
    return np.where(r < params.a, val, 0.0)


def kbwf_xray(y, params: KbwfParams = DEFAULT_KBWF) -> np.ndarray:
    """X-ray transform ``P(phi)(y)`` at 2D points ``y`` of shape ``(..., 2)``."""
    y = np.asarray(y, dtype=float)
    return kbwf_xray_radial(np.hypot(y[..., 0], y[..., 1]), params)


def kbwf_xray_gradient(y, params: KbwfParams = DEFAULT_KBWF) -> np.ndarray:
    """Gradient of ``P(phi)`` at points ``y`` (shape ``(..., 2)``), zero outside the support."""
    y = np.asarray(y, dtype=float)
    r = np.hypot(y[..., 0], y[..., 1])
    b = _beta(r, params.a)
    nu = params.m - 0.5
    radial = -(params.alpha * params.xray_scale / params.a) * b**nu * bessel_i(nu, params.alpha * b)
    radial = np.where(r < params.a, radial, 0.0)
    return radial[..., None] * y
