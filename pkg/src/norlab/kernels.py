"""Kernel backend selection.

The compiled extension is used when it was built and imported cleanly;
otherwise the numpy implementations are used. Set ``NORLAB_PURE_PYTHON=1``
to force the fallback.
"""
import os

from . import _pykernels

BACKENDS = {"python": _pykernels}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels

if _ckernels is not None and os.environ.get("NORLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    backend = _ckernels
    BACKEND_NAME = "cython"
else:
    backend = _pykernels
    BACKEND_NAME = "python"


def get_backend(name=None):
    """Return the named backend module, or the active one."""
    if name is None:
        return backend
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None
