"""Pick the compiled kernel module if it was built, else the numpy fallback.

Set ``UNROLLCAM_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

log = logging.getLogger(__name__)

if os.environ.get("UNROLLCAM_PURE_PYTHON", "") not in ("", "0"):
    from unrollcam import _kernels_py as kernels

    BACKEND = "python"
else:
    try:
        from unrollcam import _kernels as kernels

        BACKEND = "native"
    except ImportError:  # extension not built
        from unrollcam import _kernels_py as kernels

        BACKEND = "python"
        log.debug("compiled kernels unavailable, using numpy fallback")

__all__ = ["kernels", "BACKEND"]
