"""Kernel backend selection.

The hot per-batch kernels (fused forward/backward, sign alignment) exist
twice: a compiled Cython extension (``fedsim.backends._core``) and a pure
numpy fallback (``fedsim.backends.numpy_backend``). One of them is picked
once at import time:

* ``FEDSIM_BACKEND=compiled``  require the extension (raise if missing)
* ``FEDSIM_BACKEND=python``    force the numpy fallback
* unset / ``auto``             compiled if importable, else numpy

Both are deterministic. Their floating-point results can differ at
rounding level, so replay digests are comparable only between runs that
used the same backend (the run metadata records which one was active).
"""

from __future__ import annotations

import os

from . import numpy_backend

_requested = os.environ.get("FEDSIM_BACKEND", "auto").lower()

if _requested not in ("auto", "compiled", "python"):
    raise ImportError(
        f"FEDSIM_BACKEND must be 'compiled', 'python' or 'auto', got {_requested!r}"
    )

_active = None
if _requested in ("auto", "compiled"):
    try:
        from . import _core as _compiled  # noqa: F401

        _active = _compiled
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "FEDSIM_BACKEND=compiled but the fedsim.backends._core extension "
                "is not built; reinstall without FEDSIM_PURE_PYTHON=1"
            )
if _active is None:
    _active = numpy_backend


def get_backend():
    """The active kernel module (has forward, loss_and_grad, sign_align_count)."""
    return _active


def backend_name() -> str:
    return _active.NAME


def available_backends() -> list[str]:
    names = [numpy_backend.NAME]
    try:
        from . import _core

        names.insert(0, _core.NAME)
    except ImportError:
        pass
    return names
