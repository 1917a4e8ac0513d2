"""Numba loops behind the forward model and the pose gradients.

Tables are 2D arrays sampled on a uniform grid; ``(o1, o2)`` is the coordinate
of node ``[0, 0]`` and ``(s1, s2)`` the node spacing.  All interpolation is
Catmull-Rom; values outside a table are zero.
"""

import math

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _crw(f):
    f2 = f * f
    f3 = f2 * f
    return (
        0.5 * (-f3 + 2.0 * f2 - f),
        0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
        0.5 * (-3.0 * f3 + 4.0 * f2 + f),
        0.5 * (f3 - f2),
    )


@njit(cache=True, inline="always")
def _crd(f):
    # derivative of the Catmull-Rom weights with respect to f
    f2 = f * f
    return (
        0.5 * (-3.0 * f2 + 4.0 * f - 1.0),
        0.5 * (9.0 * f2 - 10.0 * f),
        0.5 * (-9.0 * f2 + 8.0 * f + 1.0),
        0.5 * (3.0 * f2 - 2.0 * f),
    )


@njit(cache=True, nogil=True)
def interp2(tab, o1, o2, s1, s2, y1, y2):
    u1 = (y1 - o1) / s1
    u2 = (y2 - o2) / s2
    i1 = int(math.floor(u1))
    i2 = int(math.floor(u2))
    if i1 < 1 or i2 < 1 or i1 + 2 >= tab.shape[0] or i2 + 2 >= tab.shape[1]:
        return 0.0
    a0, a1, a2, a3 = _crw(u1 - i1)
    b0, b1, b2, b3 = _crw(u2 - i2)
    acc = 0.0
    for r, wa in ((i1 - 1, a0), (i1, a1), (i1 + 1, a2), (i1 + 2, a3)):
        acc += wa * (b0 * tab[r, i2 - 1] + b1 * tab[r, i2] + b2 * tab[r, i2 + 1] + b3 * tab[r, i2 + 2])
    return acc


@njit(cache=True, nogil=True)
def interp2_grad(tab, o1, o2, s1, s2, y1, y2):
    """Gradient of the Catmull-Rom interpolant of :func:`interp2`."""
    u1 = (y1 - o1) / s1
    u2 = (y2 - o2) / s2
    i1 = int(math.floor(u1))
    i2 = int(math.floor(u2))
    if i1 < 1 or i2 < 1 or i1 + 2 >= tab.shape[0] or i2 + 2 >= tab.shape[1]:
        return 0.0, 0.0
    a0, a1, a2, a3 = _crw(u1 - i1)
    b0, b1, b2, b3 = _crw(u2 - i2)
    da0, da1, da2, da3 = _crd(u1 - i1)
    db0, db1, db2, db3 = _crd(u2 - i2)
    g1 = 0.0
    g2 = 0.0
    for r, wa, dwa in ((i1 - 1, a0, da0), (i1, a1, da1), (i1 + 1, a2, da2), (i1 + 2, a3, da3)):
        row = b0 * tab[r, i2 - 1] + b1 * tab[r, i2] + b2 * tab[r, i2 + 1] + b3 * tab[r, i2 + 2]
        drow = db0 * tab[r, i2 - 1] + db1 * tab[r, i2] + db2 * tab[r, i2 + 1] + db3 * tab[r, i2 + 2]
        g1 += dwa * row
        g2 += wa * drow
    return g1 / s1, g2 / s2


@njit(cache=True, nogil=True)
def interp2_many(tab, o1, o2, s1, s2, pts):
    out = np.empty(pts.shape[0])
    for i in range(pts.shape[0]):
        out[i] = interp2(tab, o1, o2, s1, s2, pts[i, 0], pts[i, 1])
    return out


@njit(cache=True, nogil=True)
def project_one(c, mat, t1, t2, psi, half, ov, d1, d2, radius, m):
    """Splat every coefficient onto the detector.

    ``psi`` has node spacing ``(d1/ov, d2/ov)`` with node ``[half, half]`` at
    the origin, so detector pixels fall exactly on nodes and the Catmull-Rom
    weights are shared by all pixels touched by one coefficient.
    """
    n = c.shape[0]
    cn = n // 2
    cm = m // 2
    s1 = d1 / ov
    s2 = d2 / ov
    img = np.zeros((m, m))
    L = psi.shape[0]
    for i in range(n):
        k1 = i - cn
        for j in range(n):
            k2 = j - cn
            for l in range(n):
                ck = c[i, j, l]
                if ck == 0.0:
                    continue
                k3 = l - cn
                u1 = mat[0, 0] * k1 + mat[0, 1] * k2 + mat[0, 2] * k3 + t1
                u2 = mat[1, 0] * k1 + mat[1, 1] * k2 + mat[1, 2] * k3 + t2
                # table index of pixel jc: ov*jc + half - u/s
                v1 = half - u1 / s1
                v2 = half - u2 / s2
                b1 = int(math.floor(v1))
                b2 = int(math.floor(v2))
                a0, a1, a2, a3 = _crw(v1 - b1)
                e0, e1, e2, e3 = _crw(v2 - b2)
                lo1 = max(int(math.ceil((u1 - radius) / d1)), -cm)
                hi1 = min(int(math.floor((u1 + radius) / d1)), m - 1 - cm)
                lo2 = max(int(math.ceil((u2 - radius) / d2)), -cm)
                hi2 = min(int(math.floor((u2 + radius) / d2)), m - 1 - cm)
                for p1 in range(lo1, hi1 + 1):
                    r = ov * p1 + b1
                    if r < 1 or r + 2 >= L:
                        continue
                    for p2 in range(lo2, hi2 + 1):
                        q = ov * p2 + b2
                        if q < 1 or q + 2 >= L:
                            continue
                        acc = 0.0
                        for rr, wa in ((r - 1, a0), (r, a1), (r + 1, a2), (r + 2, a3)):
                            acc += wa * (e0 * psi[rr, q - 1] + e1 * psi[rr, q] + e2 * psi[rr, q + 1] + e3 * psi[rr, q + 2])
                        img[p1 + cm, p2 + cm] += ck * acc
    return img


@njit(cache=True, parallel=True)
def backproject_accumulate(out, mat, t1, t2, tab, o1, o2, s1, s2):
    """``out[k] += T(M k + t)`` for every voxel (parallel over voxels)."""
    n = out.shape[0]
    cn = n // 2
    for i in prange(n):
        k1 = i - cn
        for j in range(n):
            k2 = j - cn
            for l in range(n):
                k3 = l - cn
                y1 = mat[0, 0] * k1 + mat[0, 1] * k2 + mat[0, 2] * k3 + t1
                y2 = mat[1, 0] * k1 + mat[1, 1] * k2 + mat[1, 2] * k3 + t2
                out[i, j, l] += interp2(tab, o1, o2, s1, s2, y1, y2)


@njit(cache=True, nogil=True)
def _d3_range(y01, y02, v1, v2, r2, lim):
    """Integer ``d3`` range with ``|y0 + d3 v|^2 < r2`` clipped to ``[-lim, lim]``."""
    vv = v1 * v1 + v2 * v2
    yy = y01 * y01 + y02 * y02
    if vv < 1e-14:
        if yy < r2:
            return -lim, lim
        return 1, 0
    b = y01 * v1 + y02 * v2
    disc = b * b - vv * (yy - r2)
    if disc <= 0.0:
        return 1, 0
    sq = math.sqrt(disc)
    lo = int(math.ceil((-b - sq) / vv))
    hi = int(math.floor((-b + sq) / vv))
    return max(lo, -lim), min(hi, lim)


@njit(cache=True, parallel=True)
def kernel_accumulate(w, mats, tab, o1, o2, s1, s2, radius):
    """``w[d] += sum_p K(M_p d)``; ``w`` has shape ``(2n-1,)*3`` centred at ``n-1``.

    Parallel over the first offset axis, sequential over projections, so the
    summation order never depends on the thread count.
    """
    L = w.shape[0]
    lim = (L - 1) // 2
    r2 = radius * radius
    for a in prange(L):
        d1 = a - lim
        for p in range(mats.shape[0]):
            mt = mats[p]
            for b in range(L):
                d2 = b - lim
                y01 = mt[0, 0] * d1 + mt[0, 1] * d2
                y02 = mt[1, 0] * d1 + mt[1, 1] * d2
                lo, hi = _d3_range(y01, y02, mt[0, 2], mt[1, 2], r2, lim)
                for d3 in range(lo, hi + 1):
                    w[a, b, d3 + lim] += interp2(tab, o1, o2, s1, s2, y01 + mt[0, 2] * d3, y02 + mt[1, 2] * d3)


@njit(cache=True, nogil=True)
def quad_term(acorr, mat, tab, o1, o2, s1, s2, radius):
    """``sum_d A[d] K(M d)`` restricted to the support cylinder of ``K``."""
    L = acorr.shape[0]
    lim = (L - 1) // 2
    r2 = radius * radius
    acc = 0.0
    for a in range(L):
        d1 = a - lim
        for b in range(L):
            d2 = b - lim
            y01 = mat[0, 0] * d1 + mat[0, 1] * d2
            y02 = mat[1, 0] * d1 + mat[1, 1] * d2
            lo, hi = _d3_range(y01, y02, mat[0, 2], mat[1, 2], r2, lim)
            for d3 in range(lo, hi + 1):
                acc += acorr[a, b, d3 + lim] * interp2(tab, o1, o2, s1, s2, y01 + mat[0, 2] * d3, y02 + mat[1, 2] * d3)
    return acc


@njit(cache=True, nogil=True)
def quad_grad(acorr, mat, dmats, tab, o1, o2, s1, s2, radius):
    """``sum_d A[d] (dM_i d) . grad K(M d)`` for the three Euler angles (``K`` interpolated)."""
    L = acorr.shape[0]
    lim = (L - 1) // 2
    r2 = radius * radius
    out = np.zeros(3)
    for a in range(L):
        d1 = a - lim
        for b in range(L):
            d2 = b - lim
            y01 = mat[0, 0] * d1 + mat[0, 1] * d2
            y02 = mat[1, 0] * d1 + mat[1, 1] * d2
            lo, hi = _d3_range(y01, y02, mat[0, 2], mat[1, 2], r2, lim)
            for d3 in range(lo, hi + 1):
                av = acorr[a, b, d3 + lim]
                if av == 0.0:
                    continue
                y1 = y01 + mat[0, 2] * d3
                y2 = y02 + mat[1, 2] * d3
                gx, gy = interp2_grad(tab, o1, o2, s1, s2, y1, y2)
                for ax in range(3):
                    dm = dmats[ax]
                    z1 = dm[0, 0] * d1 + dm[0, 1] * d2 + dm[0, 2] * d3
                    z2 = dm[1, 0] * d1 + dm[1, 1] * d2 + dm[1, 2] * d3
                    out[ax] += av * (z1 * gx + z2 * gy)
    return out


@njit(cache=True, nogil=True)
def cross_term(c, mat, t1, t2, tab, o1, o2, s1, s2):
    """``sum_k c[k] T(M k + t)``."""
    n = c.shape[0]
    cn = n // 2
    acc = 0.0
    for i in range(n):
        k1 = i - cn
        for j in range(n):
            k2 = j - cn
            for l in range(n):
                ck = c[i, j, l]
                if ck == 0.0:
                    continue
                k3 = l - cn
                y1 = mat[0, 0] * k1 + mat[0, 1] * k2 + mat[0, 2] * k3 + t1
                y2 = mat[1, 0] * k1 + mat[1, 1] * k2 + mat[1, 2] * k3 + t2
                acc += ck * interp2(tab, o1, o2, s1, s2, y1, y2)
    return acc


@njit(cache=True, nogil=True)
def cross_grad(c, mat, dmats, t1, t2, tab, o1, o2, s1, s2, with_theta):
    """Gradient of :func:`cross_term` w.r.t. ``(theta1, theta2, theta3, t1, t2)``."""
    n = c.shape[0]
    cn = n // 2
    out = np.zeros(5)
    for i in range(n):
        k1 = i - cn
        for j in range(n):
            k2 = j - cn
            for l in range(n):
                ck = c[i, j, l]
                if ck == 0.0:
                    continue
                k3 = l - cn
                y1 = mat[0, 0] * k1 + mat[0, 1] * k2 + mat[0, 2] * k3 + t1
                y2 = mat[1, 0] * k1 + mat[1, 1] * k2 + mat[1, 2] * k3 + t2
                gx, gy = interp2_grad(tab, o1, o2, s1, s2, y1, y2)
                gx *= ck
                gy *= ck
                out[3] += gx
                out[4] += gy
                if with_theta:
                    for ax in range(3):
                        dm = dmats[ax]
                        z1 = dm[0, 0] * k1 + dm[0, 1] * k2 + dm[0, 2] * k3
                        z2 = dm[1, 0] * k1 + dm[1, 1] * k2 + dm[1, 2] * k3
                        out[ax] += z1 * gx + z2 * gy
    return out



@njit(cache=True, nogil=True)
def project_grad_one(c, mat, dmats, t1, t2, resid, psi, half, ov, d1, d2, radius, with_theta):
    """Exact gradient of ``1/2 |r|^2`` with ``r = g - project_one(...)``.

    Returns ``[dJ/dtheta1..3, dJ/dt1, dJ/dt2]`` for the interpolated forward
    model of :func:`project_one`, given the current residual ``resid``.
    """
    n = c.shape[0]
    m = resid.shape[0]
    cn = n // 2
    cm = m // 2
    s1 = d1 / ov
    s2 = d2 / ov
    L = psi.shape[0]
    out = np.zeros(5)
    for i in range(n):
        k1 = i - cn
        for j in range(n):
            k2 = j - cn
            for l in range(n):
                ck = c[i, j, l]
                if ck == 0.0:
                    continue
                k3 = l - cn
                u1 = mat[0, 0] * k1 + mat[0, 1] * k2 + mat[0, 2] * k3 + t1
                u2 = mat[1, 0] * k1 + mat[1, 1] * k2 + mat[1, 2] * k3 + t2
                v1 = half - u1 / s1
                v2 = half - u2 / s2
                b1 = int(math.floor(v1))
                b2 = int(math.floor(v2))
                a0, a1, a2, a3 = _crw(v1 - b1)
                e0, e1, e2, e3 = _crw(v2 - b2)
                da0, da1, da2, da3 = _crd(v1 - b1)
                de0, de1, de2, de3 = _crd(v2 - b2)
                lo1 = max(int(math.ceil((u1 - radius) / d1)), -cm)
                hi1 = min(int(math.floor((u1 + radius) / d1)), m - 1 - cm)
                lo2 = max(int(math.ceil((u2 - radius) / d2)), -cm)
                hi2 = min(int(math.floor((u2 + radius) / d2)), m - 1 - cm)
                # sum_j r_j dPsi/dv at this coefficient
                gv1 = 0.0
                gv2 = 0.0
                for p1 in range(lo1, hi1 + 1):
                    r = ov * p1 + b1
                    if r < 1 or r + 2 >= L:
                        continue
                    for p2 in range(lo2, hi2 + 1):
                        q = ov * p2 + b2
                        if q < 1 or q + 2 >= L:
                            continue
                        rv = resid[p1 + cm, p2 + cm]
                        if rv == 0.0:
                            continue
                        h1 = 0.0
                        h2 = 0.0
                        for rr, wa, dwa in ((r - 1, a0, da0), (r, a1, da1), (r + 1, a2, da2), (r + 2, a3, da3)):
                            row = e0 * psi[rr, q - 1] + e1 * psi[rr, q] + e2 * psi[rr, q + 1] + e3 * psi[rr, q + 2]
                            drow = de0 * psi[rr, q - 1] + de1 * psi[rr, q] + de2 * psi[rr, q + 1] + de3 * psi[rr, q + 2]
                            h1 += dwa * row
                            h2 += wa * drow
                        gv1 += rv * h1
                        gv2 += rv * h2
                # dJ/du = -ck * sum_j r_j dPsi/du, and dv/du = -1/s
                gu1 = ck * gv1 / s1
                gu2 = ck * gv2 / s2
                out[3] += gu1
                out[4] += gu2
                if with_theta:
                    for ax in range(3):
                        dm = dmats[ax]
                        z1 = dm[0, 0] * k1 + dm[0, 1] * k2 + dm[0, 2] * k3
                        z2 = dm[1, 0] * k1 + dm[1, 1] * k2 + dm[1, 2] * k3
                        out[ax] += z1 * gu1 + z2 * gu2
    return out
