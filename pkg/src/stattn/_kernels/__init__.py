"""Hot-kernel dispatch: compiled core when available, numpy fallback otherwise.

The compiled extension is optional. Selection happens once at import time:
set STATTN_NO_EXT=1 to force the numpy backend, or call set_backend() to
switch explicitly (tests and the kernel benchmark do this). Both backends
implement the identical layout contract documented in numpy_backend.py.
"""

import os

import numpy as np

from stattn._kernels import numpy_backend

try:
    from stattn._kernels import _fastcore
    HAS_FASTCORE = True
except ImportError:
    _fastcore = None
    HAS_FASTCORE = False

conv_out_extent = numpy_backend.conv_out_extent

_BACKENDS = {"numpy": numpy_backend}
if HAS_FASTCORE:
    _BACKENDS["fast"] = _fastcore

if os.environ.get("STATTN_NO_EXT"):
    _active_name = "numpy"
else:
    _active_name = "fast" if HAS_FASTCORE else "numpy"


def backend_name() -> str:
    return _active_name


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    global _active_name
    _active_name = name


def _as_kernel_array(a: np.ndarray) -> np.ndarray:
    if a.dtype not in (np.float32, np.float64):
        raise TypeError(f"kernels support float32/float64 only, got {a.dtype}")
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, stride, pad):
    return _BACKENDS[_active_name].im2col(
        _as_kernel_array(x), int(kh), int(kw), int(stride), int(pad)
    )


def col2im(cols, h, w, kh, kw, stride, pad):
    return _BACKENDS[_active_name].col2im(
        _as_kernel_array(cols), int(h), int(w), int(kh), int(kw), int(stride), int(pad)
    )


def depthwise3x3_forward(x, w):
    return _BACKENDS[_active_name].depthwise3x3_forward(
        _as_kernel_array(x), _as_kernel_array(w)
    )


def depthwise3x3_grad_input(gy, w):
    return _BACKENDS[_active_name].depthwise3x3_grad_input(
        _as_kernel_array(gy), _as_kernel_array(w)
    )


def depthwise3x3_grad_weight(x, gy):
    return _BACKENDS[_active_name].depthwise3x3_grad_weight(
        _as_kernel_array(x), _as_kernel_array(gy)
    )
