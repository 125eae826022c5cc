"""Backend selection for the SGD step.

The compiled extension is used when importable; set ``NEATREC_PURE_PYTHON=1``
to force the numpy fallback.
"""

from __future__ import annotations

import os

from neatrec import _kernels_py

python_sgd_batch = _kernels_py.sgd_batch

try:
    if os.environ.get("NEATREC_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python backend requested")
    from neatrec._kernels import sgd_batch as compiled_sgd_batch
except ImportError:
    compiled_sgd_batch = None

BACKEND = "compiled" if compiled_sgd_batch is not None else "python"
sgd_batch = compiled_sgd_batch or python_sgd_batch


def get_backend(name: str | None = None):
    """Return the SGD step function for ``name`` (``compiled``, ``python`` or default)."""
    if name in (None, "auto"):
        return sgd_batch
    if name == "python":
        return python_sgd_batch
    if name == "compiled":
        if compiled_sgd_batch is None:
            raise RuntimeError("compiled kernel not built; run `pip install -e .`")
        return compiled_sgd_batch
    raise ValueError(f"unknown backend {name!r}")
