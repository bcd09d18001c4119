"""Backend selection for the Monte-Carlo kernels.

The compiled extension is used when it imports; otherwise, or when
``TWOSTAGE_PURE_PYTHON=1`` is set, the numpy fallback runs instead.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _pykernels

_FUNCS = (
    "gating_features",
    "gating_moments",
    "mixture_responsibilities",
    "mixture_scores",
    "fisher_moment",
    "pair_fourth_moment",
)


def _load_compiled() -> ModuleType | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


def get_backend(name: str = "auto") -> ModuleType:
    """Return the kernel module: "auto", "compiled" or "python"."""
    if name == "python":
        return _pykernels
    compiled = _load_compiled()
    if name == "compiled":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    if os.environ.get("TWOSTAGE_PURE_PYTHON", "") not in ("", "0"):
        return _pykernels
    return compiled if compiled is not None else _pykernels


_impl = get_backend()
BACKEND = "compiled" if _impl is not _pykernels else "python"

gating_features = _impl.gating_features
gating_moments = _impl.gating_moments
mixture_responsibilities = _impl.mixture_responsibilities
mixture_scores = _impl.mixture_scores
fisher_moment = _impl.fisher_moment
# the BLAS product in the fallback beats the compiled loop for this one
pair_fourth_moment = _pykernels.pair_fourth_moment
