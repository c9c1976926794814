"""Pure-numpy kinematics kernels (fallback backend).

Mirrors the compiled `_kin_c` extension: same signatures, same numerics.
Scalar float math is used in the joint loop on purpose; it beats
small-ndarray quaternion ops by a wide margin at these sizes.

Layout shared with the compiled kernel:
  - joints arrive in topological order (parent link computed first),
  - jtype: 0 revolute, 1 prismatic, 2 fixed,
  - jqidx: index into q for non-fixed joints, -1 for fixed,
  - poses are 7-vectors (w, x, y, z, tx, ty, tz), root link = row 0 = identity.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "python"


def fk_links(jparent, jchild, jtype, jqidx, origins, axes, q, n_links):
    """Forward kinematics for every link; also returns per-joint world frames.

    Returns (poses[n_links,7], axis_w[nj,3], anchor[nj,3]) where axis_w and
    anchor describe each joint's axis direction and anchor point in root
    coordinates (what the Jacobian assembly needs).
    """
    nj = len(jtype)
    poses = np.zeros((n_links, 7))
    poses[0, 0] = 1.0
    axis_w = np.zeros((nj, 3))
    anchor = np.zeros((nj, 3))

    for j in range(nj):
        p = jparent[j]
        pw, px, py, pz = poses[p, 0], poses[p, 1], poses[p, 2], poses[p, 3]
        ptx, pty, ptz = poses[p, 4], poses[p, 5], poses[p, 6]
        ow, ox, oy, oz = origins[j, 0], origins[j, 1], origins[j, 2], origins[j, 3]
        otx, oty, otz = origins[j, 4], origins[j, 5], origins[j, 6]

        # joint frame F = parent_pose * origin
        fw = pw * ow - px * ox - py * oy - pz * oz
        fx = pw * ox + px * ow + py * oz - pz * oy
        fy = pw * oy - px * oz + py * ow + pz * ox
        fz = pw * oz + px * oy - py * ox + pz * ow
        rtx, rty, rtz = _rot(pw, px, py, pz, otx, oty, otz)
        ftx, fty, ftz = rtx + ptx, rty + pty, rtz + ptz

        ax, ay, az = axes[j, 0], axes[j, 1], axes[j, 2]
        wx, wy, wz = _rot(fw, fx, fy, fz, ax, ay, az)
        axis_w[j, 0], axis_w[j, 1], axis_w[j, 2] = wx, wy, wz
        anchor[j, 0], anchor[j, 1], anchor[j, 2] = ftx, fty, ftz

        t = jtype[j]
        if t == 0:  # revolute: rotate about local axis by q
            half = 0.5 * q[jqidx[j]]
            s = math.sin(half)
            mw, mx, my, mz = math.cos(half), ax * s, ay * s, az * s
            cw = fw * mw - fx * mx - fy * my - fz * mz
            cx = fw * mx + fx * mw + fy * mz - fz * my
            cy = fw * my - fx * mz + fy * mw + fz * mx
            cz = fw * mz + fx * my - fy * mx + fz * mw
            ctx, cty, ctz = ftx, fty, ftz
        elif t == 1:  # prismatic: translate along local axis by q
            d = q[jqidx[j]]
            cw, cx, cy, cz = fw, fx, fy, fz
            ctx, cty, ctz = ftx + wx * d, fty + wy * d, ftz + wz * d
        else:  # fixed
            cw, cx, cy, cz = fw, fx, fy, fz
            ctx, cty, ctz = ftx, fty, ftz

        c = jchild[j]
        poses[c, 0], poses[c, 1], poses[c, 2], poses[c, 3] = cw, cx, cy, cz
        poses[c, 4], poses[c, 5], poses[c, 6] = ctx, cty, ctz

    return poses, axis_w, anchor


def _rot(w, x, y, z, vx, vy, vz):
    """Rotate (vx,vy,vz) by quaternion (w,x,y,z); scalar Rodrigues form."""
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    rx = vx + w * tx + (y * tz - z * ty)
    ry = vy + w * ty + (z * tx - x * tz)
    rz = vz + w * tz + (x * ty - y * tx)
    return rx, ry, rz
