"""Import-time selection between the compiled and numpy fitting kernels.

The compiled extension is preferred when present. Set NQS_BACKEND=python
to force the numpy lane, or NQS_BACKEND=compiled to require the extension
(raising if it is missing). The pack builder is always the python one:
both lanes consume the same layout.
"""

from __future__ import annotations

import os

from . import _kernels_py

build_pack = _kernels_py.build_pack
theta_from_z = _kernels_py.theta_from_z
z_from_theta = _kernels_py.z_from_theta
KIND_HUBER = _kernels_py.KIND_HUBER
KIND_MSE = _kernels_py.KIND_MSE

_choice = os.environ.get("NQS_BACKEND", "").strip().lower()
COMPILED = False
if _choice in ("python", "py", "pure"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        COMPILED = True
    except ImportError:
        if _choice in ("compiled", "c", "cython"):
            raise ImportError(
                "NQS_BACKEND=compiled but the nqs._kernels extension is not built"
            ) from None
        _impl = _kernels_py

adam_fit = _impl.adam_fit
objective_batch = _impl.objective_batch


def backend_name() -> str:
    return "compiled" if COMPILED else "python"
