"""Hot-kernel backend selection.

The compiled extension is preferred; set ``TELESTAGE_PURE_PYTHON=1`` to force
the pure-Python fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["compiled"] = _ckernels

if _ckernels is not None and os.environ.get("TELESTAGE_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]
qoi16_encode_chunks = _impl.qoi16_encode_chunks
qoi16_decode_chunks = _impl.qoi16_decode_chunks
splat_unit = _impl.splat_unit
