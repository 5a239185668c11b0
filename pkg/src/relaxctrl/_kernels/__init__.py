"""Hot-loop kernels with a compiled core and a pure-Python fallback.

The compiled extension ``_core`` is used when importable; set
``RELAXCTRL_PURE_PYTHON=1`` to force the fallback. ``BACKEND`` names the
selected implementation and ``backends()`` returns both (when available) for
cross-checking.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

if _core is not None and os.environ.get("RELAXCTRL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    _impl: ModuleType = _core
    BACKEND = "compiled"
else:
    _impl = _fallback
    BACKEND = "python"

thomas_factor = _impl.thomas_factor
thomas_solve = _impl.thomas_solve
imex_sweep = _impl.imex_sweep
apportion = _impl.apportion
interleave = _impl.interleave


def backends() -> dict[str, ModuleType]:
    out = {"python": _fallback}
    if _core is not None:
        out["compiled"] = _core
    return out


__all__ = ["BACKEND", "backends", "thomas_factor", "thomas_solve", "imex_sweep", "apportion", "interleave"]
