"""Backend selection for the numerical kernels.

The compiled ``_ckernels`` extension is used when it has been built;
otherwise the numpy implementations in ``_pykernels`` are used. Setting
``NESH_PURE_PYTHON=1`` forces the fallback.
"""

import importlib
import os

from nesh import _pykernels

__all__ = ["BACKEND", "load_backend", "sh_basis", "catmull_rom_lines", "sym_eig3"]


def load_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        return importlib.import_module("nesh._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select():
    if os.environ.get("NESH_PURE_PYTHON", "") not in ("", "0"):
        return "python", _pykernels
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", _pykernels


BACKEND, _impl = _select()

sh_basis = _impl.sh_basis
catmull_rom_lines = _impl.catmull_rom_lines
sym_eig3 = _impl.sym_eig3
