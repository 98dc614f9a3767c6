"""Select the HNSW kernel backend at import time.

The compiled extension is used when it was built; ``VISREC_KERNEL=python``
forces the pure-Python fallback.
"""
import logging
import os

logger = logging.getLogger(__name__)


def load_backend(name: str | None = None):
    name = (name or os.environ.get("VISREC_KERNEL", "auto")).lower()
    if name not in ("auto", "cython", "python"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name in ("auto", "cython"):
        try:
            from . import _hnsw_kernels as mod
            return mod
        except ImportError:
            if name == "cython":
                raise
            logger.info("compiled HNSW kernel not available, using pure Python")
    from . import _hnsw_py as mod
    return mod


def available_backends() -> list[str]:
    out = ["python"]
    try:
        from . import _hnsw_kernels  # noqa: F401
    except ImportError:
        pass
    else:
        out.insert(0, "cython")
    return out


backend = load_backend()
BACKEND = backend.BACKEND
