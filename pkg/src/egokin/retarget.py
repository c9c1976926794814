"""Human-centric state-action frames and robot <-> unified conversions.

A UnifiedFrame is one timestamped sample of the shared state-action space:
head pose in world, head-relative wrist poses, wrist-relative fingertip
keypoints in fixed [thumb, index, middle, ring, little] order, and
optional gripper openings. Human captures ARE this space; robot joint
data is converted into and out of it through a RobotBinding.

Numeric storage is float32 so frames survive episode serialization
bit-for-bit; pose accessors renormalize into Se3Pose for math.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom
from .geom import Se3Pose
from .kinchain import IkConfig, KinematicChain, NotConverged, ik_dls, parse_chain

FINGER_ORDER = ("thumb", "index", "middle", "ring", "little")
FINGER_BOUND_M = 0.5
STATE_DIM = 53


def _canon_quat7_f32(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float32).reshape(7).copy()
    if not np.all(np.isfinite(v)):
        raise ValueError("pose values must be finite")
    if v[0] < 0:
        v[:4] = -v[:4]
    return v


@dataclass(eq=False)
class UnifiedFrame:
    """One sample of the unified space. Pose vectors are (w,x,y,z,tx,ty,tz)."""

    t_ns: int
    embodiment: str
    instruction: str
    head: np.ndarray
    l_wrist: np.ndarray
    r_wrist: np.ndarray
    l_fingers: np.ndarray
    r_fingers: np.ndarray
    l_grip: float | None = None
    r_grip: float | None = None

    def __post_init__(self):
        self.t_ns = int(self.t_ns)
        if not (self.embodiment == "human" or self.embodiment.startswith("robot:")):
            raise ValueError(f"embodiment must be 'human' or 'robot:<name>', got {self.embodiment!r}")
        self.head = _canon_quat7_f32(self.head)
        self.l_wrist = _canon_quat7_f32(self.l_wrist)
        self.r_wrist = _canon_quat7_f32(self.r_wrist)
        for attr in ("l_fingers", "r_fingers"):
            f = np.asarray(getattr(self, attr), dtype=np.float32).reshape(5, 3).copy()
            if not np.all(np.isfinite(f)):
                raise ValueError(f"{attr} must be finite")
            if np.any(np.abs(f) >= FINGER_BOUND_M):
                raise ValueError(f"{attr} outside the {FINGER_BOUND_M} m plausibility bound")
            setattr(self, attr, f)
        for attr in ("l_grip", "r_grip"):
            g = getattr(self, attr)
            if g is not None:
                setattr(self, attr, float(np.float32(g)))

    def head_pose(self) -> Se3Pose:
        return Se3Pose(self.head[:4], self.head[4:])

    def wrist_pose(self, side: str) -> Se3Pose:
        v = self.l_wrist if side == "left" else self.r_wrist
        return Se3Pose(v[:4], v[4:])

    def fingers(self, side: str) -> np.ndarray:
        return self.l_fingers if side == "left" else self.r_fingers

    def grips(self) -> tuple[float, float]:
        """Gripper openings, derived from thumb-index distance when absent."""
        l = self.l_grip if self.l_grip is not None else gripper_from_fingers(self.l_fingers)
        r = self.r_grip if self.r_grip is not None else gripper_from_fingers(self.r_fingers)
        return float(np.float32(l)), float(np.float32(r))

    def state_vector(self) -> np.ndarray:
        """53-dim layout: head 7 | l_wrist 7 | r_wrist 7 | l_fingers 15 |
        r_fingers 15 | l_grip 1 | r_grip 1."""
        l, r = self.grips()
        return np.concatenate(
            [
                self.head, self.l_wrist, self.r_wrist,
                self.l_fingers.reshape(-1), self.r_fingers.reshape(-1),
                np.array([l, r], dtype=np.float32),
            ]
        ).astype(np.float32)

    def __eq__(self, other):
        if not isinstance(other, UnifiedFrame):
            return NotImplemented
        return (
            self.t_ns == other.t_ns
            and self.embodiment == other.embodiment
            and self.instruction == other.instruction
            and np.array_equal(self.head, other.head)
            and np.array_equal(self.l_wrist, other.l_wrist)
            and np.array_equal(self.r_wrist, other.r_wrist)
            and np.array_equal(self.l_fingers, other.l_fingers)
            and np.array_equal(self.r_fingers, other.r_fingers)
            and self.l_grip == other.l_grip
            and self.r_grip == other.r_grip
        )


def gripper_from_fingers(fingers) -> float:
    """Euclidean thumb-index fingertip distance; rigid-motion invariant."""
    f = np.asarray(fingers, dtype=np.float64).reshape(5, 3)
    return float(np.linalg.norm(f[0] - f[1]))


@dataclass(eq=False)
class RobotBinding:
    """Chains + constants needed to convert one robot's joints to/from
    the unified space. Hand chain roots sit at the arm wrist frames."""

    name: str
    l_arm: KinematicChain
    r_arm: KinematicChain
    l_hand: KinematicChain
    r_hand: KinematicChain
    l_wrist_frame: str
    r_wrist_frame: str
    offset: Se3Pose
    l_fingertips: tuple[str, ...]
    r_fingertips: tuple[str, ...]
    l_alpha: float
    r_alpha: float

    def __post_init__(self):
        if self.l_alpha <= 0 or self.r_alpha <= 0:
            raise ValueError("scale factors must be positive")
        self.l_arm._link_id(self.l_wrist_frame)
        self.r_arm._link_id(self.r_wrist_frame)
        if len(self.l_fingertips) != 5 or len(self.r_fingertips) != 5:
            raise ValueError("need 5 fingertip frames per hand")
        for f in self.l_fingertips:
            self.l_hand._link_id(f)
        for f in self.r_fingertips:
            self.r_hand._link_id(f)

    def arm(self, side: str) -> KinematicChain:
        return self.l_arm if side == "left" else self.r_arm

    def hand(self, side: str) -> KinematicChain:
        return self.l_hand if side == "left" else self.r_hand

    def wrist_frame(self, side: str) -> str:
        return self.l_wrist_frame if side == "left" else self.r_wrist_frame

    def fingertips(self, side: str) -> tuple[str, ...]:
        return self.l_fingertips if side == "left" else self.r_fingertips

    def alpha(self, side: str) -> float:
        return self.l_alpha if side == "left" else self.r_alpha


def load_binding(path) -> RobotBinding:
    """Parse a binding file; chain paths resolve relative to it."""
    path = Path(path)
    base = path.parent
    name = None
    chains: dict[tuple[str, str], KinematicChain] = {}
    wrist: dict[str, str] = {}
    tips: dict[str, tuple[str, ...]] = {}
    alpha: dict[str, float] = {}
    offset = Se3Pose.identity()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "robot":
                name = tok[1]
            elif tok[0] in ("arm", "hand"):
                chains[(tok[0], tok[1])] = parse_chain((base / tok[2]).read_text())
            elif tok[0] == "wrist":
                wrist[tok[1]] = tok[2]
            elif tok[0] == "offset":
                v = np.array([float(x) for x in tok[1:8]])
                offset = Se3Pose(v[:4], v[4:])
            elif tok[0] == "fingertips":
                if len(tok) != 7:
                    raise ValueError("fingertips expects side + 5 frame names")
                tips[tok[1]] = tuple(tok[2:])
            elif tok[0] == "alpha":
                alpha[tok[1]] = float(tok[2])
            else:
                raise ValueError(f"unknown directive {tok[0]!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"{path.name} line {lineno}: {exc}") from exc
    missing = [k for k in ("left", "right") if ("arm", k) not in chains or ("hand", k) not in chains]
    if name is None or missing or set(wrist) != {"left", "right"} or set(tips) != {"left", "right"} or set(alpha) != {"left", "right"}:
        raise ValueError(f"{path.name}: binding file is incomplete")
    return RobotBinding(
        name=name,
        l_arm=chains[("arm", "left")], r_arm=chains[("arm", "right")],
        l_hand=chains[("hand", "left")], r_hand=chains[("hand", "right")],
        l_wrist_frame=wrist["left"], r_wrist_frame=wrist["right"],
        offset=offset,
        l_fingertips=tips["left"], r_fingertips=tips["right"],
        l_alpha=alpha["left"], r_alpha=alpha["right"],
    )


@dataclass(eq=False)
class JointState:
    """Per-limb joint configurations for one robot."""

    l_arm: np.ndarray
    r_arm: np.ndarray
    l_hand: np.ndarray
    r_hand: np.ndarray

    @staticmethod
    def mid_range(binding: RobotBinding) -> "JointState":
        return JointState(
            binding.l_arm.mid_config(), binding.r_arm.mid_config(),
            binding.l_hand.mid_config(), binding.r_hand.mid_config(),
        )

    def arm(self, side: str) -> np.ndarray:
        return self.l_arm if side == "left" else self.r_arm

    def hand(self, side: str) -> np.ndarray:
        return self.l_hand if side == "left" else self.r_hand


@dataclass
class LimbReport:
    converged: bool
    residual: float
    iterations: int


@dataclass
class RetargetResult:
    joints: JointState
    reports: dict[str, LimbReport]

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.reports.values())


def to_unified(binding: RobotBinding, joints: JointState, head_world: Se3Pose,
               t_ns: int, instruction: str) -> UnifiedFrame:
    """Robot joints -> unified frame.

    Wrists are expressed relative to compose(head_world, binding.offset);
    fingertips are hand-chain FK positions (hand root = wrist) divided by
    the per-hand scale factor. Gripper openings are materialized from the
    scaled thumb-index distance.
    """
    head_eff = geom.compose(head_world, binding.offset)
    wrists = {}
    fingers = {}
    for side in ("left", "right"):
        arm = binding.arm(side)
        wrist_world = arm.fk(joints.arm(side), binding.wrist_frame(side))
        wrists[side] = geom.relative_to(wrist_world, head_eff)
        hand = binding.hand(side)
        pts = np.stack([p.trans for p in hand.fk_frames(joints.hand(side), list(binding.fingertips(side)))])
        fingers[side] = pts / binding.alpha(side)
    return UnifiedFrame(
        t_ns=t_ns,
        embodiment=f"robot:{binding.name}",
        instruction=instruction,
        head=head_world.as_7vec(),
        l_wrist=wrists["left"].as_7vec(),
        r_wrist=wrists["right"].as_7vec(),
        l_fingers=fingers["left"],
        r_fingers=fingers["right"],
        l_grip=gripper_from_fingers(fingers["left"]),
        r_grip=gripper_from_fingers(fingers["right"]),
    )


@dataclass(frozen=True)
class FingerIkConfig:
    max_iters: int = 50
    reg: float = 1e-3
    weights: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    tol_step: float = 1e-9


def retarget_fingers(hand_chain: KinematicChain, fingertip_targets, alpha: float,
                     q_prev, cfg: FingerIkConfig = FingerIkConfig(),
                     fingertip_frames: tuple[str, ...] | None = None) -> np.ndarray:
    """Gauss-Newton fingertip retargeting.

    Minimizes sum_i w_i ||alpha*v_i - p_i(q)||^2 + reg ||q - q_prev||^2
    subject to joint limits, using the positional rows of per-fingertip
    Jacobians. The returned q never has a worse objective than q_prev.
    """
    targets = np.asarray(fingertip_targets, dtype=np.float64).reshape(5, 3)
    if not np.all(np.isfinite(targets)):
        raise ValueError("fingertip targets must be finite")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    frames = list(fingertip_frames) if fingertip_frames is not None else _default_tip_frames(hand_chain)
    goals = alpha * targets
    w = np.asarray(cfg.weights, dtype=np.float64)
    q_prev = hand_chain._check_q(q_prev)

    def objective(q):
        pts, _ = hand_chain.fk_points_and_jacobians(q, frames)
        resid = goals - pts
        pos = float(np.sum(w * np.sum(resid * resid, axis=1)))
        return pos + cfg.reg * float(np.sum((q - q_prev) ** 2)), pos

    q = q_prev.copy()
    obj, pos_res = objective(q)
    best_q, best_obj, best_pos = q, obj, pos_res
    n = hand_chain.n_joints
    for it in range(cfg.max_iters):
        pts, jacs = hand_chain.fk_points_and_jacobians(q, frames)
        resid = goals - pts
        H = cfg.reg * np.eye(n)
        g = -cfg.reg * (q - q_prev)
        for i in range(5):
            H += w[i] * (jacs[i].T @ jacs[i])
            g += w[i] * (jacs[i].T @ resid[i])
        dq = np.linalg.solve(H, g)

        accepted = False
        for _ in range(10):
            q_new = hand_chain.clamp(q + dq)
            obj_new, pos_new = objective(q_new)
            if obj_new <= obj:
                accepted = True
                break
            dq = 0.5 * dq
        if not accepted:
            return best_q
        step = float(np.max(np.abs(q_new - q)))
        q, obj, pos_res = q_new, obj_new, pos_new
        if obj < best_obj:
            best_q, best_obj, best_pos = q, obj, pos_res
        if step <= cfg.tol_step:
            return best_q
    raise NotConverged(best_q, best_pos, [], cfg.max_iters, "fingertip solve")


def _default_tip_frames(hand_chain: KinematicChain) -> list[str]:
    """Leaf links in document order stand in when frames are not given."""
    children = {j.child for j in hand_chain.joints}
    parents = {j.parent for j in hand_chain.joints}
    leaves = [n for n in hand_chain.link_names if n in children and n not in parents]
    if len(leaves) != 5:
        raise ValueError("hand chain needs exactly 5 fingertip leaf links")
    return leaves


def from_unified(binding: RobotBinding, frame: UnifiedFrame, q_prev: JointState,
                 arm_cfg: IkConfig = IkConfig(),
                 hand_cfg: FingerIkConfig = FingerIkConfig()) -> RetargetResult:
    """Unified frame -> robot joints; inverse of to_unified.

    Arms solve ik_dls toward compose(head*offset, wrist_rel) seeded at
    q_prev; hands run retarget_fingers. Per-limb failures are non-fatal:
    the report carries best-effort configs and convergence flags.
    """
    head_eff = geom.compose(frame.head_pose(), binding.offset)
    configs = {}
    reports = {}
    for side, key in (("left", "l"), ("right", "r")):
        arm = binding.arm(side)
        target = geom.compose(head_eff, frame.wrist_pose(side))
        try:
            q_arm = ik_dls(arm, target, binding.wrist_frame(side), q_prev.arm(side), arm_cfg)
            e, _, _ = _arm_residual(arm, target, binding.wrist_frame(side), q_arm)
            reports[f"{key}_arm"] = LimbReport(True, e, 0)
        except NotConverged as exc:
            q_arm = exc.q_best
            reports[f"{key}_arm"] = LimbReport(False, exc.residual, exc.iterations)
        configs[f"{key}_arm"] = q_arm

        hand = binding.hand(side)
        try:
            q_hand = retarget_fingers(
                hand, frame.fingers(side), binding.alpha(side), q_prev.hand(side),
                hand_cfg, binding.fingertips(side),
            )
            pts, _ = hand.fk_points_and_jacobians(q_hand, list(binding.fingertips(side)))
            res = float(np.sum((binding.alpha(side) * frame.fingers(side) - pts) ** 2))
            reports[f"{key}_hand"] = LimbReport(True, res, 0)
        except NotConverged as exc:
            q_hand = exc.q_best
            reports[f"{key}_hand"] = LimbReport(False, exc.residual, exc.iterations)
        configs[f"{key}_hand"] = q_hand

    joints = JointState(configs["l_arm"], configs["r_arm"], configs["l_hand"], configs["r_hand"])
    return RetargetResult(joints=joints, reports=reports)


def _arm_residual(arm, target, frame_name, q):
    cur = arm.fk(q, frame_name)
    e = geom.log(geom.compose(target, geom.inverse(cur))).as_vector()
    return float(np.linalg.norm(e)), None, None
