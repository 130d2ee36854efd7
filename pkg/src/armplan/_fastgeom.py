"""Compiled single-configuration collision kernels.

They mirror the vectorised numpy routines in ``scene`` (which remain the
reference implementation) but exit early and avoid per-call array overhead,
which matters inside planner loops.
"""

import math

import numba as nb
import numpy as np


@nb.njit(cache=True)
def frames_into(q, off, d, a, ca, sa, base, tool, out):
    n = q.shape[0]
    out[0] = base
    for i in range(n):
        th = q[i] + off[i]
        ct = math.cos(th)
        st = math.sin(th)
        # columns of Rz(th) Tz(d) Tx(a) Rx(alpha)
        c0x, c0y = ct, st
        c1x, c1y, c1z = -st * ca[i], ct * ca[i], sa[i]
        c2x, c2y, c2z = st * sa[i], -ct * sa[i], ca[i]
        tx, ty, tz = a[i] * ct, a[i] * st, d[i]
        for r in range(3):
            p0 = out[i, r, 0]
            p1 = out[i, r, 1]
            p2 = out[i, r, 2]
            out[i + 1, r, 0] = p0 * c0x + p1 * c0y
            out[i + 1, r, 1] = p0 * c1x + p1 * c1y + p2 * c1z
            out[i + 1, r, 2] = p0 * c2x + p1 * c2y + p2 * c2z
            out[i + 1, r, 3] = p0 * tx + p1 * ty + p2 * tz + out[i, r, 3]
        out[i + 1, 3, 0] = 0.0
        out[i + 1, 3, 1] = 0.0
        out[i + 1, 3, 2] = 0.0
        out[i + 1, 3, 3] = 1.0
    for r in range(4):
        for c in range(4):
            s = 0.0
            for k in range(4):
                s += out[n, r, k] * tool[k, c]
            out[n + 1, r, c] = s


@nb.njit(cache=True, inline="always")
def _d2_at(t, a0, a1, a2, u0, u1, u2, h0, h1, h2):
    s = 0.0
    v = abs(a0 + t * u0) - h0
    if v > 0.0:
        s += v * v
    v = abs(a1 + t * u1) - h1
    if v > 0.0:
        s += v * v
    v = abs(a2 + t * u2) - h2
    if v > 0.0:
        s += v * v
    return s


@nb.njit(cache=True, inline="always")
def _clip01(t):
    return 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)


@nb.njit(cache=True)
def seg_box_distance(p, q, c, R, h, knots):
    """Exact segment-to-oriented-box distance; ``knots`` is an 8-slot scratch array."""
    dx, dy, dz = p[0] - c[0], p[1] - c[1], p[2] - c[2]
    ex, ey, ez = q[0] - p[0], q[1] - p[1], q[2] - p[2]
    a0 = dx * R[0, 0] + dy * R[1, 0] + dz * R[2, 0]
    a1 = dx * R[0, 1] + dy * R[1, 1] + dz * R[2, 1]
    a2 = dx * R[0, 2] + dy * R[1, 2] + dz * R[2, 2]
    u0 = ex * R[0, 0] + ey * R[1, 0] + ez * R[2, 0]
    u1 = ex * R[0, 1] + ey * R[1, 1] + ez * R[2, 1]
    u2 = ex * R[0, 2] + ey * R[1, 2] + ez * R[2, 2]
    h0, h1, h2 = h[0], h[1], h[2]
    knots[0] = 0.0
    knots[1] = 1.0
    k = 2
    for i in range(3):
        ai = a0 if i == 0 else (a1 if i == 1 else a2)
        ui = u0 if i == 0 else (u1 if i == 1 else u2)
        hi = h0 if i == 0 else (h1 if i == 1 else h2)
        if abs(ui) < 1e-15:
            ui = 1e-15 if ui >= 0 else -1e-15
        knots[k] = _clip01((hi - ai) / ui)
        knots[k + 1] = _clip01((-hi - ai) / ui)
        k += 2
    # insertion sort, 8 entries
    for i in range(1, 8):
        v = knots[i]
        j = i - 1
        while j >= 0 and knots[j] > v:
            knots[j + 1] = knots[j]
            j -= 1
        knots[j + 1] = v
    best = 1e300
    for i in range(8):
        v = _d2_at(knots[i], a0, a1, a2, u0, u1, u2, h0, h1, h2)
        if v < best:
            best = v
    for i in range(7):
        lo = knots[i]
        hi = knots[i + 1]
        mid = 0.5 * (lo + hi)
        num = 0.0
        den = 0.0
        pm = a0 + mid * u0
        if abs(pm) > h0:
            num += u0 * ((h0 if pm > 0 else -h0) - a0)
            den += u0 * u0
        pm = a1 + mid * u1
        if abs(pm) > h1:
            num += u1 * ((h1 if pm > 0 else -h1) - a1)
            den += u1 * u1
        pm = a2 + mid * u2
        if abs(pm) > h2:
            num += u2 * ((h2 if pm > 0 else -h2) - a2)
            den += u2 * u2
        t = num / den if den > 0 else mid
        t = hi if t > hi else (lo if t < lo else t)
        v = _d2_at(t, a0, a1, a2, u0, u1, u2, h0, h1, h2)
        if v < best:
            best = v
    return math.sqrt(best)


@nb.njit(cache=True)
def seg_seg_distance(p1, q1, p2, q2):
    eps = 1e-12
    d1x, d1y, d1z = q1[0] - p1[0], q1[1] - p1[1], q1[2] - p1[2]
    d2x, d2y, d2z = q2[0] - p2[0], q2[1] - p2[1], q2[2] - p2[2]
    rx, ry, rz = p1[0] - p2[0], p1[1] - p2[1], p1[2] - p2[2]
    a = d1x * d1x + d1y * d1y + d1z * d1z
    e = d2x * d2x + d2y * d2y + d2z * d2z
    f = d2x * rx + d2y * ry + d2z * rz
    c = d1x * rx + d1y * ry + d1z * rz
    b = d1x * d2x + d1y * d2y + d1z * d2z
    denom = a * e - b * b
    s = _clip01((b * f - c * e) / denom) if denom > eps else 0.0
    if a <= eps:
        s = 0.0
    t = (b * s + f) / e if e > eps else 0.0
    t_c = _clip01(t)
    if t != t_c:
        s = _clip01((t_c * b - c) / a) if a > eps else 0.0
    t = t_c
    if e <= eps:
        s = _clip01(-c / a) if a > eps else 0.0
    x = rx + s * d1x - t * d2x
    y = ry + s * d1y - t * d2y
    z = rz + s * d1z - t * d2z
    return math.sqrt(x * x + y * y + z * z)


@nb.njit(cache=True)
def config_free(q, off, d, a, ca, sa, base, tool, links, p0, p1, radii, pairs,
                centers, rots, halves, box_radii, check_self, frames, A, B, knots):
    frames_into(q, off, d, a, ca, sa, base, tool, frames)
    C = links.shape[0]
    for k in range(C):
        F = frames[links[k]]
        for r in range(3):
            A[k, r] = F[r, 0] * p0[k, 0] + F[r, 1] * p0[k, 1] + F[r, 2] * p0[k, 2] + F[r, 3]
            B[k, r] = F[r, 0] * p1[k, 0] + F[r, 1] * p1[k, 1] + F[r, 2] * p1[k, 2] + F[r, 3]
    K = centers.shape[0]
    for k in range(C):
        mx = 0.5 * (A[k, 0] + B[k, 0])
        my = 0.5 * (A[k, 1] + B[k, 1])
        mz = 0.5 * (A[k, 2] + B[k, 2])
        lx, ly, lz = B[k, 0] - A[k, 0], B[k, 1] - A[k, 1], B[k, 2] - A[k, 2]
        hl = 0.5 * math.sqrt(lx * lx + ly * ly + lz * lz)
        for j in range(K):
            vx, vy, vz = mx - centers[j, 0], my - centers[j, 1], mz - centers[j, 2]
            gap = math.sqrt(vx * vx + vy * vy + vz * vz) - hl - radii[k] - box_radii[j]
            if gap <= 0.0:
                if seg_box_distance(A[k], B[k], centers[j], rots[j], halves[j],
                                    knots) - radii[k] <= 0.0:
                    return False
    if check_self:
        for m in range(pairs.shape[0]):
            i = pairs[m, 0]
            j = pairs[m, 1]
            if seg_seg_distance(A[i], B[i], A[j], B[j]) - radii[i] - radii[j] <= 0.0:
                return False
    return True


@nb.njit(cache=True)
def batch_free(Q, off, d, a, ca, sa, base, tool, links, p0, p1, radii, pairs,
               centers, rots, halves, box_radii, check_self):
    frames = np.empty((Q.shape[1] + 2, 4, 4))
    A = np.empty((links.shape[0], 3))
    B = np.empty((links.shape[0], 3))
    knots = np.empty(8)
    out = np.empty(Q.shape[0], np.bool_)
    for i in range(Q.shape[0]):
        out[i] = config_free(Q[i], off, d, a, ca, sa, base, tool, links, p0, p1, radii, pairs,
                             centers, rots, halves, box_radii, check_self, frames, A, B, knots)
    return out


@nb.njit(cache=True)
def path_free(Q, off, d, a, ca, sa, base, tool, links, p0, p1, radii, pairs,
              centers, rots, halves, box_radii, check_self):
    """True when every row of Q is collision-free; stops at the first hit."""
    frames = np.empty((Q.shape[1] + 2, 4, 4))
    A = np.empty((links.shape[0], 3))
    B = np.empty((links.shape[0], 3))
    knots = np.empty(8)
    for i in range(Q.shape[0]):
        if not config_free(Q[i], off, d, a, ca, sa, base, tool, links, p0, p1, radii, pairs,
                           centers, rots, halves, box_radii, check_self, frames, A, B, knots):
            return False
    return True


# --- damped least squares IK -------------------------------------------------------

@nb.njit(cache=True)
def _pose_error(Td, Tc, w, out):
    for r in range(3):
        out[r] = (Td[r, 3] - Tc[r, 3]) * w[r]
    R = np.empty((3, 3))
    for r in range(3):
        for c in range(3):
            R[r, c] = Td[r, 0] * Tc[c, 0] + Td[r, 1] * Tc[c, 1] + Td[r, 2] * Tc[c, 2]
    cos_a = (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) * 0.5
    cos_a = max(-1.0, min(1.0, cos_a))
    angle = math.acos(cos_a)
    v0, v1, v2 = R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]
    if angle < 1e-6:
        s = 0.5 * (1.0 + angle * angle / 6.0)
        r0, r1, r2 = v0 * s, v1 * s, v2 * s
    elif angle < math.pi - 1e-6:
        s = angle / (2.0 * math.sin(angle))
        r0, r1, r2 = v0 * s, v1 * s, v2 * s
    else:
        i = 0
        best = -1e300
        for k in range(3):
            bk = R[k, k] - cos_a
            if bk > best:
                best, i = bk, k
        b = np.empty(3)
        for k in range(3):
            b[k] = (R[k, i] + R[i, k]) * 0.5 - (cos_a if k == i else 0.0)
        sc = math.sqrt(max(b[i], 1e-300))
        nrm = math.sqrt((b[0] / sc) ** 2 + (b[1] / sc) ** 2 + (b[2] / sc) ** 2)
        r0, r1, r2 = b[0] / sc / nrm, b[1] / sc / nrm, b[2] / sc / nrm
        if r0 * v0 + r1 * v1 + r2 * v2 < 0.0:
            r0, r1, r2 = -r0, -r1, -r2
        r0, r1, r2 = r0 * angle, r1 * angle, r2 * angle
    out[3] = r0 * w[3]
    out[4] = r1 * w[4]
    out[5] = r2 * w[5]
    s = 0.0
    for k in range(6):
        s += out[k] * out[k]
    return math.sqrt(s)


@nb.njit(cache=True)
def dls_solve(q, Td, off, d, a, ca, sa, base, tool, lo, hi, w, lam2, delta_int, delta_dif,
              eps, max_iters, frames):
    """In-place DLS loop on ``q``; returns (converged, residual). ``frames`` ends at q."""
    n = q.shape[0]
    J = np.empty((6, n))
    M = np.empty((6, 6))
    L = np.zeros((6, 6))
    err = np.empty(6)
    y = np.empty(6)
    frames_into(q, off, d, a, ca, sa, base, tool, frames)
    res = _pose_error(Td, frames[n + 1], w, err)
    for _ in range(max_iters):
        pe0, pe1, pe2 = frames[n + 1, 0, 3], frames[n + 1, 1, 3], frames[n + 1, 2, 3]
        for i in range(n):
            z0, z1, z2 = frames[i, 0, 2], frames[i, 1, 2], frames[i, 2, 2]
            r0, r1, r2 = pe0 - frames[i, 0, 3], pe1 - frames[i, 1, 3], pe2 - frames[i, 2, 3]
            J[0, i] = (z1 * r2 - z2 * r1) * w[0]
            J[1, i] = (z2 * r0 - z0 * r2) * w[1]
            J[2, i] = (z0 * r1 - z1 * r0) * w[2]
            J[3, i] = z0 * w[3]
            J[4, i] = z1 * w[4]
            J[5, i] = z2 * w[5]
        for r in range(6):
            for c in range(r + 1):
                s = lam2 if r == c else 0.0
                for k in range(n):
                    s += J[r, k] * J[c, k]
                M[r, c] = s
        # Cholesky of the symmetric positive definite damped matrix
        for r in range(6):
            for c in range(r + 1):
                s = M[r, c]
                for k in range(c):
                    s -= L[r, k] * L[c, k]
                if r == c:
                    L[r, r] = math.sqrt(s)
                else:
                    L[r, c] = s / L[c, c]
        for r in range(6):
            s = err[r] / delta_dif
            for k in range(r):
                s -= L[r, k] * y[k]
            y[r] = s / L[r, r]
        for r in range(5, -1, -1):
            s = y[r]
            for k in range(r + 1, 6):
                s -= L[k, r] * y[k]
            y[r] = s / L[r, r]
        for i in range(n):
            s = 0.0
            for r in range(6):
                s += J[r, i] * y[r]
            v = q[i] + s * delta_int
            q[i] = lo[i] if v < lo[i] else (hi[i] if v > hi[i] else v)
        frames_into(q, off, d, a, ca, sa, base, tool, frames)
        res = _pose_error(Td, frames[n + 1], w, err)
        if res <= eps:
            return True, res
    return False, res


# --- rays -----------------------------------------------------------------------------

@nb.njit(cache=True)
def rays_into(origins, dirs, centers, rots, halves, max_range, frac, hits):
    """Slab test of every ray against every oriented box; nearest hit fraction per ray."""
    for r in range(origins.shape[0]):
        best = np.inf
        for k in range(centers.shape[0]):
            rx = origins[r, 0] - centers[k, 0]
            ry = origins[r, 1] - centers[k, 1]
            rz = origins[r, 2] - centers[k, 2]
            tnear = -np.inf
            tfar = np.inf
            for i in range(3):
                lo = rx * rots[k, 0, i] + ry * rots[k, 1, i] + rz * rots[k, 2, i]
                ld = dirs[r, 0] * rots[k, 0, i] + dirs[r, 1] * rots[k, 1, i] + dirs[r, 2] * rots[k, 2, i]
                if abs(ld) < 1e-15:
                    ld = -1e-15 if ld < 0 else 1e-15
                inv = 1.0 / ld
                h = halves[k, i]
                t1 = (-h - lo) * inv
                t2 = (h - lo) * inv
                tnear = max(tnear, min(t1, t2))
                tfar = min(tfar, max(t1, t2))
            if tnear <= tfar and tfar >= 0.0 and tnear <= max_range:
                t = max(tnear, 0.0)
                if t < best:
                    best = t
        if best < np.inf:
            hits[r] = True
            frac[r] = min(best / max_range, 1.0)
        else:
            hits[r] = False
            frac[r] = 1.0
