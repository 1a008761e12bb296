"""Scoring/selection kernels with a compiled core and a numpy fallback.

The compiled extension (`_ckern`, Cython) is preferred when importable; the
numpy module (`_npkern`) is the fallback. Set KMIPS_KERNELS=numpy or
KMIPS_KERNELS=compiled to force one (the latter raises if the extension is
missing). Both backends implement the same contract and agree within 1e-6
relative on scores; outputs are deterministic within a backend.
"""
import os

from . import _npkern

_requested = os.environ.get("KMIPS_KERNELS", "auto").lower()

if _requested == "numpy":
    _impl = _npkern
else:
    try:
        from . import _ckern as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _npkern

BACKEND = "compiled" if _impl is not _npkern else "numpy"

scores = _impl.scores
subset_scores = _impl.subset_scores
topk_from_scores = _impl.topk_from_scores
exact_topk = _impl.exact_topk
assign_rows = _impl.assign_rows


def available_backends():
    """Names of importable kernel backends (for tests and benchmarks)."""
    names = ["numpy"]
    try:
        from . import _ckern  # noqa: F401

        names.insert(0, "compiled")
    except ImportError:
        pass
    return names


def get_backend(name: str):
    """Return the kernel module for `name` ('compiled' or 'numpy')."""
    if name == "numpy":
        return _npkern
    if name == "compiled":
        from . import _ckern

        return _ckern
    raise ValueError(f"unknown kernel backend: {name!r}")
