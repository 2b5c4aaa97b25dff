"""Kernel backend selection.

The hot kernels exist twice: a compiled Cython extension (``dyrex._ckernels``)
and a pure-Python numpy fallback (``dyrex._pykernels``) with the same call
surface. Selection happens once at import:

  DYREX_BACKEND=auto  (default) compiled if importable, else fallback
  DYREX_BACKEND=ext   require the compiled kernels, fail otherwise
  DYREX_BACKEND=py    force the pure-Python kernels

``use()`` switches at runtime; tests and the benchmark rely on it. Code must
access kernels through ``active()`` (or ``backend.kernels``), never by holding
on to the module object.
"""

import os

from . import _pykernels
from .errors import ConfigError

_CHOICES = ("auto", "ext", "py")


def _load_ext():
    from . import _ckernels

    return _ckernels


def _select(name):
    if name not in _CHOICES:
        raise ConfigError(f"DYREX_BACKEND must be one of {_CHOICES}, got {name!r}")
    if name == "py":
        return _pykernels, "py"
    try:
        return _load_ext(), "ext"
    except ImportError:
        if name == "ext":
            raise ConfigError(
                "DYREX_BACKEND=ext but the compiled kernels are not built; "
                "reinstall without DYREX_SKIP_EXT or use DYREX_BACKEND=py"
            ) from None
        return _pykernels, "py"


kernels, BACKEND = _select(os.environ.get("DYREX_BACKEND", "auto").lower())


def active():
    """Kernel module currently in use."""
    return kernels


def name():
    """'ext' or 'py'."""
    return BACKEND


def use(backend_name):
    """Switch backends at runtime. Returns the previous backend name."""
    global kernels, BACKEND
    previous = BACKEND
    kernels, BACKEND = _select(backend_name)
    return previous
