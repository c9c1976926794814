"""egokin: human-centric state-action space toolkit.

Subpackages cover SE(3) math (geom), kinematic chains and IK (kinchain),
unified-frame retargeting (retarget), the episode data pipeline
(episodes), weighted source mixing (mixer), a minimal reverse-mode
autodiff engine (autodiff), the desk-scale flow-matching policy (policy),
the embodiment linear-probing diagnostic (probe), and the CLI (cli).
"""

__version__ = "0.1.0"
