"""Backend selection for the likelihood kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Setting ``STRATPART_BACKEND=python`` forces the fallback.
"""

import os
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def available_backends() -> list:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


_choice = os.environ.get("STRATPART_BACKEND", "").lower()
if _choice == "python" or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "cython"
_impl = get_backend(BACKEND)

probit_derivs = _impl.probit_derivs
cf_joint_derivs = _impl.cf_joint_derivs
