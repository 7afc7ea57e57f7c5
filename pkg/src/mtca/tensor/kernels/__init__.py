"""Kernel backend selection.

The hot kernels exist twice: a compiled Cython extension and a numpy
fallback with identical semantics (``benchmarks/bench_kernels.py`` compares
them).  Composition note: convolution is bound to the numpy implementation
in every mode, because its per-tap matrix products ride BLAS and beat plain
compiled loops by 10-100x at production widths; the extension accelerates
the pooling kernels, whose window scans are loop-bound in numpy (observed
7-300x).  Since pooling moves values without arithmetic, both modes produce
bit-identical results.

* ``MTCA_BACKEND=compiled`` requires the extension and fails loudly if absent;
* ``MTCA_BACKEND=python`` forces the pure fallback;
* unset or ``auto`` prefers the extension when importable.
"""

import os

from . import numpy_backend

_choice = os.environ.get("MTCA_BACKEND", "auto").strip().lower()

if _choice not in ("auto", "compiled", "python"):
    raise RuntimeError(f"MTCA_BACKEND must be auto, compiled or python, got {_choice!r}")

if _choice == "python":
    _pool_impl = numpy_backend
else:
    try:
        from . import _ckernels as _pool_impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise RuntimeError(
                "MTCA_BACKEND=compiled but the extension is not built; "
                "run `pip install -e .` with Cython available"
            ) from None
        _pool_impl = numpy_backend

BACKEND = _pool_impl.NAME
conv1d_forward = numpy_backend.conv1d_forward
conv1d_backward = numpy_backend.conv1d_backward
maxpool2_forward = _pool_impl.maxpool2_forward
maxpool2_backward = _pool_impl.maxpool2_backward
