"""Kernel backend selection: compiled extension if present, numpy fallback.

Set EGOKIN_KERNELS=py or EGOKIN_KERNELS=c to force a backend (the latter
raises if the extension was not built). `benchmarks/bench_kernels.py`
compares the two.
"""

from __future__ import annotations

import os

from . import _kin_py

_forced = os.environ.get("EGOKIN_KERNELS", "").strip().lower()

if _forced == "py":
    _impl = _kin_py
elif _forced == "c":
    from . import _kin_c as _impl  # type: ignore[no-redef]
else:
    try:
        from . import _kin_c as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kin_py

fk_links = _impl.fk_links


def backend_name() -> str:
    return _impl.BACKEND


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _kin_c  # noqa: F401

        names.append("compiled")
    except ImportError:
        pass
    return names
