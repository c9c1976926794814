"""Bundled chain/binding fixture files and loaders for them."""

from __future__ import annotations

from pathlib import Path

_HERE = Path(__file__).resolve().parent


def fixture_path(name: str) -> Path:
    p = _HERE / name
    if not p.exists():
        raise FileNotFoundError(name)
    return p


def load_arm_chain():
    from ..kinchain import parse_chain

    return parse_chain(fixture_path("arm7.chain").read_text())


def load_hand_chain():
    from ..kinchain import parse_chain

    return parse_chain(fixture_path("hand6.chain").read_text())


def load_robot_binding():
    from ..retarget import load_binding

    return load_binding(fixture_path("robot.binding"))
