"""Kinematic chains: description parsing, FK, Jacobians, damped-least-squares IK.

Chain description grammar (line oriented, `#` comments, exact floats):

    link <name>
    joint <name> <revolute|prismatic|fixed> <parent> <child> \
        origin <w x y z tx ty tz> axis <x y z> limits <lo> <hi>

`axis`/`limits` are required for non-fixed joints and optional for fixed
ones. Joint ordering in configuration vectors is document order of the
non-fixed joints. A URDF-subset importer covers links plus
revolute/prismatic/fixed joints with origin xyz/rpy, axis, and limits;
anything that would silently change kinematics raises UnsupportedElement.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from . import geom, kernels
from .geom import Se3Pose

_JTYPE_CODES = {"revolute": 0, "prismatic": 1, "fixed": 2}


class ParseError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class CycleError(ValueError):
    """Joint graph is not a tree rooted at a single link."""


class UnknownLink(KeyError):
    pass


class UnsupportedElement(ValueError):
    def __init__(self, name: str):
        super().__init__(f"unsupported element: {name}")
        self.name = name


class NotConverged(RuntimeError):
    """Iterative solve ended without meeting tolerances.

    Carries the best iterate, its residual, and the (non-increasing)
    residual trace so callers can degrade gracefully.
    """

    def __init__(self, q_best: np.ndarray, residual: float, trace: list[float],
                 iterations: int, detail: str = ""):
        super().__init__(
            f"not converged after {iterations} iterations, residual {residual:.3e}"
            + (f" ({detail})" if detail else "")
        )
        self.q_best = q_best
        self.residual = residual
        self.trace = trace
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class Joint:
    name: str
    jtype: str
    parent: str
    child: str
    origin: Se3Pose
    axis: np.ndarray
    limits: tuple[float, float]


class KinematicChain:
    """Immutable joint tree with packed arrays for the FK kernels."""

    def __init__(self, link_names: list[str], joints: list[Joint]):
        if len(set(link_names)) != len(link_names):
            raise CycleError("duplicate link names")
        self.link_names = list(link_names)
        self.joints = list(joints)

        known = set(link_names)
        children: dict[str, Joint] = {}
        for j in joints:
            if j.parent not in known:
                raise UnknownLink(j.parent)
            if j.child not in known:
                raise UnknownLink(j.child)
            if j.child in children:
                raise CycleError(f"link {j.child!r} has two parent joints")
            children[j.child] = j
            if j.jtype not in _JTYPE_CODES:
                raise ValueError(f"unknown joint type {j.jtype!r}")
            if j.jtype != "fixed":
                lo, hi = j.limits
                if not lo <= hi:
                    raise ValueError(f"joint {j.name!r}: limits lo > hi")
                n = float(np.linalg.norm(j.axis))
                if abs(n - 1.0) > 1e-9:
                    raise ValueError(f"joint {j.name!r}: axis is not unit length")

        roots = [name for name in link_names if name not in children]
        if len(roots) != 1:
            raise CycleError(f"expected exactly one root link, found {roots}")
        self.root = roots[0]

        # topological computation order (document order for config indices)
        self._link_index = {self.root: 0}
        order: list[Joint] = []
        pending = list(joints)
        while pending:
            placed = [j for j in pending if j.parent in self._link_index]
            if not placed:
                raise CycleError(
                    "cycle or disconnected subtree at joints "
                    + ", ".join(j.name for j in pending)
                )
            placed_ids = {id(j) for j in placed}
            for j in placed:
                self._link_index[j.child] = len(self._link_index)
                order.append(j)
            pending = [j for j in pending if id(j) not in placed_ids]
        for name in link_names:
            self._link_index.setdefault(name, len(self._link_index))

        self.moving_joints = [j for j in joints if j.jtype != "fixed"]
        self.joint_names = [j.name for j in self.moving_joints]
        qidx = {j.name: i for i, j in enumerate(self.moving_joints)}
        self.lower = np.array([j.limits[0] for j in self.moving_joints])
        self.upper = np.array([j.limits[1] for j in self.moving_joints])

        nj = len(order)
        self._jparent = np.zeros(nj, dtype=np.int32)
        self._jchild = np.zeros(nj, dtype=np.int32)
        self._jtype = np.zeros(nj, dtype=np.int32)
        self._jqidx = np.full(nj, -1, dtype=np.int32)
        self._origins = np.zeros((nj, 7))
        self._axes = np.zeros((nj, 3))
        for k, j in enumerate(order):
            self._jparent[k] = self._link_index[j.parent]
            self._jchild[k] = self._link_index[j.child]
            self._jtype[k] = _JTYPE_CODES[j.jtype]
            if j.jtype != "fixed":
                self._jqidx[k] = qidx[j.name]
            self._origins[k] = j.origin.as_7vec()
            self._axes[k] = j.axis

        # per-link list of supporting joint rows (root -> link path)
        parent_row = {int(self._jchild[k]): k for k in range(nj)}
        self._support: dict[int, np.ndarray] = {0: np.zeros(0, dtype=np.int32)}
        for k, j in enumerate(order):
            li = self._link_index[j.child]
            pi = self._link_index[j.parent]
            self._support[li] = np.append(self._support[pi], np.int32(k))

    @property
    def n_joints(self) -> int:
        return len(self.moving_joints)

    @property
    def n_links(self) -> int:
        return len(self.link_names)

    def mid_config(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.lower, self.upper)

    def _check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.n_joints:
            raise ValueError(f"expected {self.n_joints} joint values, got {q.shape[0]}")
        return q

    def _link_id(self, frame: str) -> int:
        try:
            return self._link_index[frame]
        except KeyError:
            raise UnknownLink(frame) from None

    def _fk_raw(self, q: np.ndarray):
        return kernels.fk_links(
            self._jparent, self._jchild, self._jtype, self._jqidx,
            self._origins, self._axes, q, self.n_links,
        )

    def fk(self, q, frame: str) -> Se3Pose:
        """Pose of `frame` in root coordinates."""
        q = self._check_q(q)
        li = self._link_id(frame)
        poses, _, _ = self._fk_raw(q)
        return Se3Pose(poses[li, :4], poses[li, 4:])

    def fk_frames(self, q, frames: list[str]) -> list[Se3Pose]:
        """Poses of several frames from a single FK pass."""
        q = self._check_q(q)
        ids = [self._link_id(f) for f in frames]
        poses, _, _ = self._fk_raw(q)
        return [Se3Pose(poses[i, :4], poses[i, 4:]) for i in ids]

    def jacobian(self, q, frame: str) -> np.ndarray:
        """Geometric Jacobian, 6 x n_joints, rows stacked (linear; angular).

        Columns are spatial twists in the root frame, i.e. they match the
        finite difference (log(fk(q + eps*e_i) o fk(q)^-1)) / eps.
        """
        q = self._check_q(q)
        li = self._link_id(frame)
        _, axis_w, anchor = self._fk_raw(q)
        J = np.zeros((6, self.n_joints))
        for k in self._support[li]:
            qi = self._jqidx[k]
            if qi < 0:
                continue
            a = axis_w[k]
            if self._jtype[k] == 0:  # revolute
                J[:3, qi] = np.cross(anchor[k], a)
                J[3:, qi] = a
            else:  # prismatic
                J[:3, qi] = a
        return J

    def fk_points_and_jacobians(self, q, frames: list[str]):
        """Positions of `frames` plus their 3 x n_joints point Jacobians.

        Shares one FK pass across all frames; this is the inner loop of
        fingertip retargeting.
        """
        q = self._check_q(q)
        ids = [self._link_id(f) for f in frames]
        poses, axis_w, anchor = self._fk_raw(q)
        pts = np.stack([poses[i, 4:] for i in ids])
        jacs = np.zeros((len(ids), 3, self.n_joints))
        for row, li in enumerate(ids):
            p = poses[li, 4:]
            for k in self._support[li]:
                qi = self._jqidx[k]
                if qi < 0:
                    continue
                a = axis_w[k]
                if self._jtype[k] == 0:
                    jacs[row, :, qi] = np.cross(a, p - anchor[k])
                else:
                    jacs[row, :, qi] = a
        return pts, jacs


@dataclass(frozen=True)
class IkConfig:
    damping: float = 1e-2
    max_iters: int = 100
    tol_pos: float = 1e-4
    tol_rot: float = 1e-3
    step_clamp: float = 0.2


def _pose_errors(target: Se3Pose, cur: Se3Pose):
    rel = geom.compose(target, geom.inverse(cur))
    e = geom.log(rel).as_vector()
    pos_err = float(np.linalg.norm(target.trans - cur.trans))
    rot_err = rel.rotation_angle()
    return e, pos_err, rot_err


def ik_dls(chain: KinematicChain, target: Se3Pose, frame: str, q0,
           cfg: IkConfig = IkConfig()) -> np.ndarray:
    """Damped-least-squares IK: find q with fk(q, frame) ~ target.

    Update dq = J^T (J J^T + damping^2 I)^-1 e with e = log(target o fk^-1)
    stacked (linear; angular), inf-norm step clamp, and limit clamping
    after each step. Joints saturated at a limit whose update points
    further out are dropped from the solve for that iteration, which keeps
    the remaining joints productive against the walls.

    Raises NotConverged carrying q_best, its residual, and the trace of
    best-so-far residuals when tolerances are not met.
    """
    q = chain._check_q(q0)
    if np.any(q < chain.lower - 1e-9) or np.any(q > chain.upper + 1e-9):
        raise ValueError("q0 violates joint limits")
    if not np.all(np.isfinite(target.trans)):
        raise ValueError("target is not finite")
    chain._link_id(frame)  # UnknownLink before any work

    lam2 = cfg.damping * cfg.damping
    e, pos_err, rot_err = _pose_errors(target, chain.fk(q, frame))
    res = float(np.linalg.norm(e))
    best_q, best_res = q, res
    trace: list[float] = [res]
    if pos_err < cfg.tol_pos and rot_err < cfg.tol_rot:
        return q

    if chain.n_joints == 0:
        raise NotConverged(q, res, trace, 0, "chain has no movable joints")

    eye6 = np.eye(6)
    for it in range(cfg.max_iters):
        J = chain.jacobian(q, frame)
        dq = J.T @ np.linalg.solve(J @ J.T + lam2 * eye6, e)
        at_lo = np.abs(q - chain.lower) < 1e-12
        at_hi = np.abs(q - chain.upper) < 1e-12
        drop = (at_lo & (dq < 0)) | (at_hi & (dq > 0))
        if np.any(drop):
            Jm = J.copy()
            Jm[:, drop] = 0.0
            dq = Jm.T @ np.linalg.solve(Jm @ Jm.T + lam2 * eye6, e)
        peak = float(np.max(np.abs(dq)))
        if peak > cfg.step_clamp:
            dq *= cfg.step_clamp / peak

        q = chain.clamp(q + dq)
        e, pos_err, rot_err = _pose_errors(target, chain.fk(q, frame))
        res = float(np.linalg.norm(e))
        if res < best_res:
            best_q, best_res = q, res
        trace.append(best_res)
        if pos_err < cfg.tol_pos and rot_err < cfg.tol_rot:
            return q

    raise NotConverged(best_q, best_res, trace, cfg.max_iters)


# ---------------------------------------------------------------------------
# native chain description format


def parse_chain(text: str) -> KinematicChain:
    links: list[str] = []
    joints: list[Joint] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "link":
            if len(tok) != 2:
                raise ParseError(lineno, "expected: link <name>")
            links.append(tok[1])
        elif tok[0] == "joint":
            joints.append(_parse_joint_line(tok, lineno))
        else:
            raise ParseError(lineno, f"unknown directive {tok[0]!r}")
    try:
        return KinematicChain(links, joints)
    except CycleError:
        raise
    except UnknownLink:
        raise
    except ValueError as exc:
        raise ParseError(0, str(exc)) from exc


def _parse_joint_line(tok: list[str], lineno: int) -> Joint:
    if len(tok) < 5:
        raise ParseError(lineno, "expected: joint <name> <type> <parent> <child> ...")
    name, jtype, parent, child = tok[1], tok[2], tok[3], tok[4]
    if jtype not in _JTYPE_CODES:
        raise ParseError(lineno, f"unknown joint type {jtype!r}")
    fields: dict[str, list[float]] = {}
    i = 5
    widths = {"origin": 7, "axis": 3, "limits": 2}
    while i < len(tok):
        key = tok[i]
        if key not in widths:
            raise ParseError(lineno, f"unexpected token {key!r}")
        if key in fields:
            raise ParseError(lineno, f"duplicate field {key!r}")
        n = widths[key]
        vals = tok[i + 1 : i + 1 + n]
        if len(vals) != n:
            raise ParseError(lineno, f"{key} expects {n} numbers")
        try:
            fields[key] = [float(v) for v in vals]
        except ValueError:
            raise ParseError(lineno, f"bad number in {key}") from None
        i += 1 + n
    if "origin" not in fields:
        raise ParseError(lineno, "joint is missing origin")
    if jtype != "fixed" and ("axis" not in fields or "limits" not in fields):
        raise ParseError(lineno, f"{jtype} joint needs axis and limits")
    origin = Se3Pose(np.array(fields["origin"][:4]), np.array(fields["origin"][4:]))
    axis = np.array(fields.get("axis", [0.0, 0.0, 1.0]))
    n = float(np.linalg.norm(axis))
    if jtype != "fixed":
        if abs(n - 1.0) > 1e-3:
            raise ParseError(lineno, "axis must be unit length")
        axis = axis / n
    lo, hi = fields.get("limits", [0.0, 0.0])
    return Joint(name, jtype, parent, child, origin, axis, (lo, hi))


def export_native(chain: KinematicChain) -> str:
    """Serialize to the native grammar; parse_chain inverts it."""
    out = [f"link {name}" for name in chain.link_names]
    for j in chain.joints:
        o = " ".join(repr(float(v)) for v in j.origin.as_7vec())
        a = " ".join(repr(float(v)) for v in j.axis)
        lo, hi = j.limits
        out.append(
            f"joint {j.name} {j.jtype} {j.parent} {j.child} "
            f"origin {o} axis {a} limits {lo!r} {hi!r}"
        )
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# URDF subset importer

_URDF_JOINT_TYPES = {"revolute", "prismatic", "fixed"}
# kinematically inert, safe to skip
_URDF_IGNORED_LINK_CHILDREN = {"visual", "collision", "inertial"}
_URDF_IGNORED_JOINT_CHILDREN = {"dynamics"}


def import_urdf_subset(xml_text: str) -> KinematicChain:
    """Import the kinematic subset of a URDF document.

    Supported: <link>, <joint type=revolute|prismatic|fixed> with origin
    xyz/rpy, axis, and limit lower/upper. Elements that would alter
    kinematics if dropped (mimic, calibration, safety_controller, other
    joint types, unknown robot-level elements) raise UnsupportedElement.
    Purely visual/inertial elements are skipped.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise ParseError(getattr(exc, "position", (0,))[0], str(exc)) from exc
    if root.tag != "robot":
        raise ParseError(0, f"expected <robot> root, got <{root.tag}>")

    links: list[str] = []
    joints: list[Joint] = []
    for el in root:
        if el.tag == "link":
            name = el.get("name")
            if name is None:
                raise ParseError(0, "<link> missing name")
            for child in el:
                if child.tag not in _URDF_IGNORED_LINK_CHILDREN:
                    raise UnsupportedElement(f"link/{child.tag}")
            links.append(name)
        elif el.tag == "joint":
            joints.append(_import_urdf_joint(el))
        elif el.tag == "material":
            continue
        else:
            raise UnsupportedElement(el.tag)
    return KinematicChain(links, joints)


def _import_urdf_joint(el: ET.Element) -> Joint:
    name = el.get("name")
    jtype = el.get("type")
    if name is None or jtype is None:
        raise ParseError(0, "<joint> missing name or type")
    if jtype not in _URDF_JOINT_TYPES:
        raise UnsupportedElement(f"joint type {jtype}")

    parent = child = None
    xyz = np.zeros(3)
    rpy = np.zeros(3)
    axis = np.array([1.0, 0.0, 0.0])
    lo = hi = 0.0
    have_limit = False
    for sub in el:
        if sub.tag == "parent":
            parent = sub.get("link")
        elif sub.tag == "child":
            child = sub.get("link")
        elif sub.tag == "origin":
            xyz = _floats(sub.get("xyz", "0 0 0"), 3)
            rpy = _floats(sub.get("rpy", "0 0 0"), 3)
        elif sub.tag == "axis":
            axis = _floats(sub.get("xyz", "1 0 0"), 3)
        elif sub.tag == "limit":
            lo = float(sub.get("lower", "0"))
            hi = float(sub.get("upper", "0"))
            have_limit = True
        elif sub.tag in _URDF_IGNORED_JOINT_CHILDREN:
            continue
        else:
            raise UnsupportedElement(f"joint/{sub.tag}")
    if parent is None or child is None:
        raise ParseError(0, f"joint {name!r} missing parent or child link")
    if jtype != "fixed":
        if not have_limit:
            raise ParseError(0, f"{jtype} joint {name!r} missing <limit>")
        n = float(np.linalg.norm(axis))
        if abs(n - 1.0) > 1e-3:
            raise ParseError(0, f"joint {name!r}: axis must be unit length")
        axis = axis / n
    origin = Se3Pose(_rpy_to_quat(rpy), xyz)
    return Joint(name, jtype, parent, child, origin, axis, (lo, hi))


def _floats(s: str, n: int) -> np.ndarray:
    vals = [float(v) for v in s.split()]
    if len(vals) != n:
        raise ParseError(0, f"expected {n} floats in {s!r}")
    return np.array(vals)


def _rpy_to_quat(rpy: np.ndarray) -> np.ndarray:
    """URDF fixed-axis roll/pitch/yaw: R = Rz(y) Ry(p) Rx(r)."""
    qx = geom.quat_from_axis_angle(np.array([1.0, 0, 0]), float(rpy[0]))
    qy = geom.quat_from_axis_angle(np.array([0, 1.0, 0]), float(rpy[1]))
    qz = geom.quat_from_axis_angle(np.array([0, 0, 1.0]), float(rpy[2]))
    return geom.quat_mul(qz, geom.quat_mul(qy, qx))
