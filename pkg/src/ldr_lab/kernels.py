"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``LDR_LAB_PURE=1`` to force the fallback.  Both backends
return bit-identical results, so the choice never changes a training run.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("LDR_LAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "compiled"
    except ImportError:
        pass

matmul = _impl.matmul


def available_backends():
    out = {"python": _pykernels}
    try:
        from . import _kernels
        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
