#!/usr/bin/env python3
"""Benchmark the compiled kinematics core against the pure-numpy fallback.

Times FK, Jacobian, and full IK solves on the bundled 7-DoF arm, plus the
fingertip Gauss-Newton on the 6-DoF hand. Run after `python setup.py
build_ext --inplace` (or an installed wheel); without the extension only
the python backend is reported.

    python benchmarks/bench_kernels.py [--repeat 2000]
"""

import argparse
import importlib
import os
import statistics
import subprocess
import sys
import time

import numpy as np


def _bench(fn, repeat: int) -> float:
    best = []
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best.append((time.perf_counter() - t0) / repeat)
    return min(best)


def run_backend(repeat: int) -> dict:
    from egokin import kernels
    from egokin.fixtures import load_arm_chain, load_hand_chain
    from egokin.kinchain import IkConfig, NotConverged, ik_dls
    from egokin.retarget import retarget_fingers

    arm = load_arm_chain()
    hand = load_hand_chain()
    rng = np.random.default_rng(0)
    q = rng.uniform(arm.lower, arm.upper)
    target = arm.fk(rng.uniform(arm.lower, arm.upper), "tool")
    qh = rng.uniform(hand.lower, hand.upper)
    tips = ("th_tip", "ix_tip", "mi_tip", "ri_tip", "li_tip")
    pts, _ = hand.fk_points_and_jacobians(qh, list(tips))
    targets = pts / 1.1
    q0h = hand.clamp(qh + rng.uniform(-0.1, 0.1, hand.n_joints))

    def one_ik():
        try:
            ik_dls(arm, target, "tool", arm.mid_config())
        except NotConverged:
            pass

    out = {
        "backend": kernels.backend_name(),
        "fk_us": _bench(lambda: arm.fk(q, "tool"), repeat) * 1e6,
        "jacobian_us": _bench(lambda: arm.jacobian(q, "tool"), repeat) * 1e6,
        "ik_ms": _bench(one_ik, max(1, repeat // 50)) * 1e3,
        "fingers_ms": _bench(
            lambda: retarget_fingers(hand, targets, 1.1, q0h, fingertip_frames=tips),
            max(1, repeat // 50),
        ) * 1e3,
    }
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--backend", choices=["py", "c"], default=None,
                    help=argparse.SUPPRESS)  # internal: run one backend
    args = ap.parse_args()

    if args.backend is not None:
        os.environ["EGOKIN_KERNELS"] = args.backend
        row = run_backend(args.repeat)
        print("|".join(f"{k}={v}" for k, v in row.items()))
        return

    from egokin import kernels

    rows = []
    for backend in kernels.available_backends():
        flag = "c" if backend == "compiled" else "py"
        proc = subprocess.run(
            [sys.executable, __file__, "--repeat", str(args.repeat), "--backend", flag],
            capture_output=True, text=True, check=True,
        )
        row = dict(kv.split("=", 1) for kv in proc.stdout.strip().split("|"))
        rows.append(row)

    print(f"{'backend':<10} {'fk (us)':>10} {'jacobian (us)':>14} {'ik (ms)':>10} {'fingers (ms)':>13}")
    for row in rows:
        print(f"{row['backend']:<10} {float(row['fk_us']):>10.1f} "
              f"{float(row['jacobian_us']):>14.1f} {float(row['ik_ms']):>10.2f} "
              f"{float(row['fingers_ms']):>13.2f}")
    if len(rows) == 2:
        s = float(rows[1]["fk_us"]) / float(rows[0]["fk_us"])
        base = rows[0]["backend"]
        print(f"\nfk speedup ({base} vs {rows[1]['backend']}): {1/s if s < 1 else s:.1f}x")


if __name__ == "__main__":
    main()
