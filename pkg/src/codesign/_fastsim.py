"""Compiled per-environment substep loop.

Same model, contact law and leapfrog scheme as the array code in
``physics``; the loops run per environment in machine code instead of as
many small numpy calls. Results agree with the array path to rounding.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np


@nb.njit(cache=True)
def _quat_to_mat(q, out):
    w, x, y, z = q[0], q[1], q[2], q[3]
    out[0, 0] = 1 - 2 * (y * y + z * z)
    out[0, 1] = 2 * (x * y - w * z)
    out[0, 2] = 2 * (x * z + w * y)
    out[1, 0] = 2 * (x * y + w * z)
    out[1, 1] = 1 - 2 * (x * x + z * z)
    out[1, 2] = 2 * (y * z - w * x)
    out[2, 0] = 2 * (x * z - w * y)
    out[2, 1] = 2 * (y * z + w * x)
    out[2, 2] = 1 - 2 * (x * x + y * y)


@nb.njit(cache=True)
def _axis_rot(a, q, out):
    s, c = math.sin(q), math.cos(q)
    C = 1.0 - c
    x, y, z = a[0], a[1], a[2]
    # I + s K + (1 - c) K^2 written out
    out[0, 0] = 1 + C * (-(y * y + z * z))
    out[0, 1] = -s * z + C * x * y
    out[0, 2] = s * y + C * x * z
    out[1, 0] = s * z + C * x * y
    out[1, 1] = 1 + C * (-(x * x + z * z))
    out[1, 2] = -s * x + C * y * z
    out[2, 0] = -s * y + C * x * z
    out[2, 1] = s * x + C * y * z
    out[2, 2] = 1 + C * (-(x * x + y * y))


@nb.njit(cache=True)
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@nb.njit(cache=True)
def _solve_spd6(A, b, out):
    """Cholesky solve of a 6x6 symmetric positive definite system."""
    L = np.zeros((6, 6))
    for i in range(6):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                L[i, i] = math.sqrt(s) if s > 0 else math.nan
            else:
                L[i, j] = s / L[j, j]
    y = np.zeros(6)
    for i in range(6):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    for i in range(5, -1, -1):
        s = y[i]
        for k in range(i + 1, 6):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@nb.njit(cache=True)
def _dynamics(e, parent, mass, com, inertia, seg, radius, offset, axis, friction,
              rp, rq, rv, q, qd, tau, gravity, fixed_base,
              c_on, c_k, c_c, c_td, c_h, a0_out, qdd_out):
    N = parent.shape[0]
    rot = np.empty((N, 3, 3))
    pos = np.empty((N, 3))
    vel = np.zeros((N, 6))
    bias = np.zeros((N, 6))
    X = np.zeros((N, 6, 6))
    R = np.empty((3, 3))
    tmp3 = np.empty(3)
    tmp3b = np.empty(3)
    _quat_to_mat(rq, rot[0])
    pos[0] = rp
    vel[0] = rv
    for i in range(1, N):
        p = parent[i]
        _axis_rot(axis[e, i - 1], q[i - 1], R)
        off = offset[e, i]
        # X = [[R^T, 0], [-R^T skew(off), R^T]]
        for r in range(3):
            for c in range(3):
                X[i, r, c] = R[c, r]
                X[i, r + 3, c + 3] = R[c, r]
        for r in range(3):
            # row r of -R^T skew(off) is off x R[:, r]
            col0, col1, col2 = R[0, r], R[1, r], R[2, r]
            X[i, r + 3, 0] = off[1] * col2 - off[2] * col1
            X[i, r + 3, 1] = off[2] * col0 - off[0] * col2
            X[i, r + 3, 2] = off[0] * col1 - off[1] * col0
        for r in range(3):
            for c in range(3):
                s = 0.0
                for k in range(3):
                    s += rot[p, r, k] * R[k, c]
                rot[i, r, c] = s
            s = 0.0
            for k in range(3):
                s += rot[p, r, k] * off[k]
            pos[i, r] = pos[p, r] + s
        for r in range(6):
            s = 0.0
            for c in range(6):
                s += X[i, r, c] * vel[p, c]
            vel[i, r] = s
        ax = axis[e, i - 1]
        for r in range(3):
            vel[i, r] += ax[r] * qd[i - 1]
        # bias = v x (S qd) with S = (axis, 0)
        w0, w1, w2 = vel[i, 0], vel[i, 1], vel[i, 2]
        l0, l1, l2 = vel[i, 3], vel[i, 4], vel[i, 5]
        m0, m1, m2 = ax[0] * qd[i - 1], ax[1] * qd[i - 1], ax[2] * qd[i - 1]
        bias[i, 0] = w1 * m2 - w2 * m1
        bias[i, 1] = w2 * m0 - w0 * m2
        bias[i, 2] = w0 * m1 - w1 * m0
        bias[i, 3] = l1 * m2 - l2 * m1
        bias[i, 4] = l2 * m0 - l0 * m2
        bias[i, 5] = l0 * m1 - l1 * m0

    # external forces in body coordinates
    fext = np.zeros((N, 6))
    for i in range(N):
        fg0 = -gravity * rot[i, 2, 0] * mass[e, i]
        fg1 = -gravity * rot[i, 2, 1] * mass[e, i]
        fg2 = -gravity * rot[i, 2, 2] * mass[e, i]
        cx, cy, cz = com[e, i, 0], com[e, i, 1], com[e, i, 2]
        fext[i, 0] = cy * fg2 - cz * fg1
        fext[i, 1] = cz * fg0 - cx * fg2
        fext[i, 2] = cx * fg1 - cy * fg0
        fext[i, 3] = fg0
        fext[i, 4] = fg1
        fext[i, 5] = fg2
        if not c_on:
            continue
        rad = radius[e, i]
        for k in range(2):
            for r in range(3):
                tmp3[r] = seg[e, i, r] if k == 1 else 0.0
            zw = pos[i, 2]
            for c in range(3):
                zw += rot[i, 2, c] * tmp3[c]
            depth = c_h + rad - zw
            if depth <= 0:
                continue
            # point velocity in body then world coordinates
            _cross(vel[i, :3], tmp3, tmp3b)
            vb0 = vel[i, 3] + tmp3b[0]
            vb1 = vel[i, 4] + tmp3b[1]
            vb2 = vel[i, 5] + tmp3b[2]
            vw0 = rot[i, 0, 0] * vb0 + rot[i, 0, 1] * vb1 + rot[i, 0, 2] * vb2
            vw1 = rot[i, 1, 0] * vb0 + rot[i, 1, 1] * vb1 + rot[i, 1, 2] * vb2
            vw2 = rot[i, 2, 0] * vb0 + rot[i, 2, 1] * vb1 + rot[i, 2, 2] * vb2
            fn = c_k * depth - c_c * vw2
            if fn < 0:
                fn = 0.0
            speed = math.sqrt(vw0 * vw0 + vw1 * vw1)
            mag = min(c_td * speed, friction[e, i] * fn)
            scale = mag / max(speed, 1e-12)
            fw0, fw1, fw2 = -vw0 * scale, -vw1 * scale, fn
            # contact point relative to the body origin, in world coordinates
            d0 = rot[i, 0, 0] * tmp3[0] + rot[i, 0, 1] * tmp3[1] + rot[i, 0, 2] * tmp3[2]
            d1 = rot[i, 1, 0] * tmp3[0] + rot[i, 1, 1] * tmp3[1] + rot[i, 1, 2] * tmp3[2]
            d2 = rot[i, 2, 0] * tmp3[0] + rot[i, 2, 1] * tmp3[1] + rot[i, 2, 2] * tmp3[2] - rad
            fb0 = rot[i, 0, 0] * fw0 + rot[i, 1, 0] * fw1 + rot[i, 2, 0] * fw2
            fb1 = rot[i, 0, 1] * fw0 + rot[i, 1, 1] * fw1 + rot[i, 2, 1] * fw2
            fb2 = rot[i, 0, 2] * fw0 + rot[i, 1, 2] * fw1 + rot[i, 2, 2] * fw2
            rb0 = rot[i, 0, 0] * d0 + rot[i, 1, 0] * d1 + rot[i, 2, 0] * d2
            rb1 = rot[i, 0, 1] * d0 + rot[i, 1, 1] * d1 + rot[i, 2, 1] * d2
            rb2 = rot[i, 0, 2] * d0 + rot[i, 1, 2] * d1 + rot[i, 2, 2] * d2
            fext[i, 0] += rb1 * fb2 - rb2 * fb1
            fext[i, 1] += rb2 * fb0 - rb0 * fb2
            fext[i, 2] += rb0 * fb1 - rb1 * fb0
            fext[i, 3] += fb0
            fext[i, 4] += fb1
            fext[i, 5] += fb2

    IA = inertia[e].copy()
    pA = np.empty((N, 6))
    h6 = np.empty(6)
    for i in range(N):
        for r in range(6):
            s = 0.0
            for c in range(6):
                s += inertia[e, i, r, c] * vel[i, c]
            h6[r] = s
        w0, w1, w2 = vel[i, 0], vel[i, 1], vel[i, 2]
        l0, l1, l2 = vel[i, 3], vel[i, 4], vel[i, 5]
        n0, n1, n2 = h6[0], h6[1], h6[2]
        f0, f1, f2 = h6[3], h6[4], h6[5]
        pA[i, 0] = (w1 * n2 - w2 * n1) + (l1 * f2 - l2 * f1) - fext[i, 0]
        pA[i, 1] = (w2 * n0 - w0 * n2) + (l2 * f0 - l0 * f2) - fext[i, 1]
        pA[i, 2] = (w0 * n1 - w1 * n0) + (l0 * f1 - l1 * f0) - fext[i, 2]
        pA[i, 3] = (w1 * f2 - w2 * f1) - fext[i, 3]
        pA[i, 4] = (w2 * f0 - w0 * f2) - fext[i, 4]
        pA[i, 5] = (w0 * f1 - w1 * f0) - fext[i, 5]

    U = np.zeros((N, 6))
    D = np.ones(N)
    u = np.zeros(N)
    Ia = np.empty((6, 6))
    tmp66 = np.empty((6, 6))
    pa = np.empty(6)
    for i in range(N - 1, 0, -1):
        p = parent[i]
        ax = axis[e, i - 1]
        for r in range(6):
            U[i, r] = IA[i, r, 0] * ax[0] + IA[i, r, 1] * ax[1] + IA[i, r, 2] * ax[2]
        D[i] = ax[0] * U[i, 0] + ax[1] * U[i, 1] + ax[2] * U[i, 2]
        u[i] = tau[i - 1] - (ax[0] * pA[i, 0] + ax[1] * pA[i, 1] + ax[2] * pA[i, 2])
        for r in range(6):
            for c in range(6):
                Ia[r, c] = IA[i, r, c] - U[i, r] * U[i, c] / D[i]
        for r in range(6):
            s = 0.0
            for c in range(6):
                s += Ia[r, c] * bias[i, c]
            pa[r] = pA[i, r] + s + U[i, r] * (u[i] / D[i])
        # IA[p] += X^T Ia X ; pA[p] += X^T pa
        for r in range(6):
            for c in range(6):
                s = 0.0
                for k in range(6):
                    s += Ia[r, k] * X[i, k, c]
                tmp66[r, c] = s
        for r in range(6):
            for c in range(6):
                s = 0.0
                for k in range(6):
                    s += X[i, k, r] * tmp66[k, c]
                IA[p, r, c] += s
            s = 0.0
            for k in range(6):
                s += X[i, k, r] * pa[k]
            pA[p, r] += s

    acc = np.zeros((N, 6))
    if not fixed_base:
        rhs = np.empty(6)
        for r in range(6):
            rhs[r] = -pA[0, r]
        _solve_spd6(IA[0], rhs, acc[0])
    a6 = np.empty(6)
    for i in range(1, N):
        p = parent[i]
        for r in range(6):
            s = 0.0
            for c in range(6):
                s += X[i, r, c] * acc[p, c]
            a6[r] = s + bias[i, r]
        s = 0.0
        for r in range(6):
            s += U[i, r] * a6[r]
        qdd = (u[i] - s) / D[i]
        qdd_out[i - 1] = qdd
        ax = axis[e, i - 1]
        for r in range(6):
            acc[i, r] = a6[r]
        for r in range(3):
            acc[i, r] += ax[r] * qdd
    for r in range(6):
        a0_out[r] = acc[0, r]


@nb.njit(cache=True)
def _drift(rp, rq, rv, q, qd, h):
    R = np.empty((3, 3))
    _quat_to_mat(rq, R)
    for j in range(q.shape[0]):
        q[j] += qd[j] * h
    for r in range(3):
        rp[r] += (R[r, 0] * rv[3] + R[r, 1] * rv[4] + R[r, 2] * rv[5]) * h
    wx, wy, wz = rv[0] * h, rv[1] * h, rv[2] * h
    theta = math.sqrt(wx * wx + wy * wy + wz * wz)
    half = 0.5 * theta
    k = math.sin(half) / theta if theta > 1e-8 else 0.5 - theta * theta / 48.0
    bw, bx, by, bz = math.cos(half), k * wx, k * wy, k * wz
    aw, ax, ay, az = rq[0], rq[1], rq[2], rq[3]
    nw = aw * bw - ax * bx - ay * by - az * bz
    nx = aw * bx + ax * bw + ay * bz - az * by
    ny = aw * by - ax * bz + ay * bw + az * bx
    nz = aw * bz + ax * by - ay * bx + az * bw
    n = math.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
    rq[0], rq[1], rq[2], rq[3] = nw / n, nx / n, ny / n, nz / n
    # counter-rotate the linear velocity so it stays fixed in world axes
    T = np.empty((3, 3))
    _quat_to_mat(np.array([bw, bx, by, bz]), T)
    v0, v1, v2 = rv[3], rv[4], rv[5]
    for r in range(3):
        rv[3 + r] = T[0, r] * v0 + T[1, r] * v1 + T[2, r] * v2


@nb.njit(cache=True)
def substeps(parent, mass, com, inertia, seg, radius, offset, axis, friction,
             lo, hi, kp, kd, effort, applied, targets, use_pd,
             q, qd, rp, rq, rv, h, n_sub, gravity, lim_k, lim_d, fixed_base,
             c_on, c_k, c_c, c_td, c_h):
    """Advance every environment ``n_sub`` leapfrog substeps, in place."""
    E, J = q.shape
    tau = np.empty(J)
    qdd = np.empty(J)
    a0 = np.empty(6)
    for e in range(E):
        for _ in range(n_sub):
            if fixed_base:
                for j in range(J):
                    q[e, j] += qd[e, j] * 0.5 * h
            else:
                _drift(rp[e], rq[e], rv[e], q[e], qd[e], 0.5 * h)
            for j in range(J):
                t = applied[e, j]
                over = q[e, j] - hi[e, j]
                under = lo[e, j] - q[e, j]
                if over > 0:
                    t += -lim_k * over - lim_d * max(qd[e, j], 0.0)
                if under > 0:
                    t += lim_k * under - lim_d * min(qd[e, j], 0.0)
                if use_pd:
                    pd = kp[e, j] * (targets[e, j] - q[e, j]) - kd[e, j] * qd[e, j]
                    t += min(max(pd, -effort[e, j]), effort[e, j])
                tau[j] = t
            _dynamics(e, parent, mass, com, inertia, seg, radius, offset, axis, friction,
                      rp[e], rq[e], rv[e], q[e], qd[e], tau, gravity, fixed_base,
                      c_on, c_k, c_c, c_td, c_h, a0, qdd)
            for j in range(J):
                qd[e, j] += qdd[j] * h
            if fixed_base:
                for j in range(J):
                    q[e, j] += qd[e, j] * 0.5 * h
            else:
                w, v = rv[e, :3], rv[e, 3:]
                a0[3] += w[1] * v[2] - w[2] * v[1]
                a0[4] += w[2] * v[0] - w[0] * v[2]
                a0[5] += w[0] * v[1] - w[1] * v[0]
                for r in range(6):
                    rv[e, r] += a0[r] * h
                _drift(rp[e], rq[e], rv[e], q[e], qd[e], 0.5 * h)
