# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kinematics kernels; see _kin_py for the reference semantics."""

from libc.math cimport sin, cos

import numpy as np

BACKEND = "compiled"


cdef inline void _rot(double w, double x, double y, double z,
                      double vx, double vy, double vz, double* out) noexcept nogil:
    cdef double tx = 2.0 * (y * vz - z * vy)
    cdef double ty = 2.0 * (z * vx - x * vz)
    cdef double tz = 2.0 * (x * vy - y * vx)
    out[0] = vx + w * tx + (y * tz - z * ty)
    out[1] = vy + w * ty + (z * tx - x * tz)
    out[2] = vz + w * tz + (x * ty - y * tx)


def fk_links(int[::1] jparent, int[::1] jchild, int[::1] jtype, int[::1] jqidx,
             double[:, ::1] origins, double[:, ::1] axes, double[::1] q, int n_links):
    cdef int nj = jtype.shape[0]
    poses_arr = np.zeros((n_links, 7))
    axis_w_arr = np.zeros((nj, 3))
    anchor_arr = np.zeros((nj, 3))
    cdef double[:, ::1] poses = poses_arr
    cdef double[:, ::1] axis_w = axis_w_arr
    cdef double[:, ::1] anchor = anchor_arr
    poses[0, 0] = 1.0

    cdef int j, p, c, t
    cdef double pw, px, py, pz, ow, ox, oy, oz
    cdef double fw, fx, fy, fz, ftx, fty, ftz
    cdef double ax, ay, az, half, s, d
    cdef double mw, mx, my, mz, cw, cx, cy, cz, ctx, cty, ctz
    cdef double r[3]
    cdef double wv[3]

    with nogil:
        for j in range(nj):
            p = jparent[j]
            pw = poses[p, 0]; px = poses[p, 1]; py = poses[p, 2]; pz = poses[p, 3]
            ow = origins[j, 0]; ox = origins[j, 1]; oy = origins[j, 2]; oz = origins[j, 3]

            fw = pw * ow - px * ox - py * oy - pz * oz
            fx = pw * ox + px * ow + py * oz - pz * oy
            fy = pw * oy - px * oz + py * ow + pz * ox
            fz = pw * oz + px * oy - py * ox + pz * ow
            _rot(pw, px, py, pz, origins[j, 4], origins[j, 5], origins[j, 6], r)
            ftx = r[0] + poses[p, 4]; fty = r[1] + poses[p, 5]; ftz = r[2] + poses[p, 6]

            ax = axes[j, 0]; ay = axes[j, 1]; az = axes[j, 2]
            _rot(fw, fx, fy, fz, ax, ay, az, wv)
            axis_w[j, 0] = wv[0]; axis_w[j, 1] = wv[1]; axis_w[j, 2] = wv[2]
            anchor[j, 0] = ftx; anchor[j, 1] = fty; anchor[j, 2] = ftz

            t = jtype[j]
            if t == 0:
                half = 0.5 * q[jqidx[j]]
                s = sin(half)
                mw = cos(half); mx = ax * s; my = ay * s; mz = az * s
                cw = fw * mw - fx * mx - fy * my - fz * mz
                cx = fw * mx + fx * mw + fy * mz - fz * my
                cy = fw * my - fx * mz + fy * mw + fz * mx
                cz = fw * mz + fx * my - fy * mx + fz * mw
                ctx = ftx; cty = fty; ctz = ftz
            elif t == 1:
                d = q[jqidx[j]]
                cw = fw; cx = fx; cy = fy; cz = fz
                ctx = ftx + wv[0] * d; cty = fty + wv[1] * d; ctz = ftz + wv[2] * d
            else:
                cw = fw; cx = fx; cy = fy; cz = fz
                ctx = ftx; cty = fty; ctz = ftz

            c = jchild[j]
            poses[c, 0] = cw; poses[c, 1] = cx; poses[c, 2] = cy; poses[c, 3] = cz
            poses[c, 4] = ctx; poses[c, 5] = cty; poses[c, 6] = ctz

    return poses_arr, axis_w_arr, anchor_arr
