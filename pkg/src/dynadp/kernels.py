"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise, or
when ``DYNADP_PURE_PYTHON=1`` is set, the numpy versions in ``_pykernels`` are
used. Both expose the same functions.
"""
import os

from . import _pykernels
from ._pykernels import derive_key, mix64

_impl = _pykernels
if os.environ.get("DYNADP_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND
uniform_fill = _impl.uniform_fill
gaussian_fill = _impl.gaussian_fill
rdp_subsampled_gaussian = _impl.rdp_subsampled_gaussian


def available_backends():
    """Map backend name to kernel module for every backend importable here."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


__all__ = [
    "BACKEND",
    "available_backends",
    "derive_key",
    "gaussian_fill",
    "mix64",
    "rdp_subsampled_gaussian",
    "uniform_fill",
]
