"""Hot numeric kernels: cascaded biquad (SOS) filtering along time.

The forward-backward band-pass applied per filter-bank band is the one
sequential inner loop in the decode path, so it carries a numba ``@njit``
kernel with a pure-numpy fallback.  Set ``CORTEXLOOP_PURE_NUMPY=1`` to
force the fallback; otherwise numba is used when importable.  Both
implementations run the identical recursion and agree to rounding error;
``benchmarks/bench_kernels.py`` compares them.
"""

from __future__ import annotations

import os
from functools import lru_cache

import numpy as np

_FORCE_NUMPY = os.environ.get("CORTEXLOOP_PURE_NUMPY", "").strip() in ("1", "true", "yes")


def _sosfilt_numpy(sos: np.ndarray, x: np.ndarray, zi: np.ndarray) -> np.ndarray:
    """Direct form II transposed cascade; filters x (n, c) in place.

    zi has shape (n_sections, 2, c) and is consumed/updated in place.
    """
    n = x.shape[0]
    for s in range(sos.shape[0]):
        b0, b1, b2, _, a1, a2 = sos[s]
        z0 = zi[s, 0]
        z1 = zi[s, 1]
        for i in range(n):
            xn = x[i]
            yn = b0 * xn + z0
            z0 = b1 * xn - a1 * yn + z1
            z1 = b2 * xn - a2 * yn
            x[i] = yn
        zi[s, 0] = z0
        zi[s, 1] = z1
    return x


try:  # pragma: no cover - exercised indirectly through backend dispatch
    if _FORCE_NUMPY:
        raise ImportError("pure-numpy backend forced by CORTEXLOOP_PURE_NUMPY")
    from numba import njit

    @njit(cache=True)
    def _sosfilt_numba(sos, x, zi):
        n_sections = sos.shape[0]
        n, c = x.shape
        for s in range(n_sections):
            b0 = sos[s, 0]
            b1 = sos[s, 1]
            b2 = sos[s, 2]
            a1 = sos[s, 4]
            a2 = sos[s, 5]
            for ch in range(c):
                z0 = zi[s, 0, ch]
                z1 = zi[s, 1, ch]
                for i in range(n):
                    xn = x[i, ch]
                    yn = b0 * xn + z0
                    z0 = b1 * xn - a1 * yn + z1
                    z1 = b2 * xn - a2 * yn
                    x[i, ch] = yn
                zi[s, 0, ch] = z0
                zi[s, 1, ch] = z1
        return x

    _sosfilt_active = _sosfilt_numba
    BACKEND = "numba"
except ImportError:
    _sosfilt_numba = None
    _sosfilt_active = _sosfilt_numpy
    BACKEND = "numpy"


def backend_name() -> str:
    return BACKEND


@lru_cache(maxsize=64)
def _steady_state_zi(sos_bytes: bytes, n_sections: int) -> np.ndarray:
    from scipy.signal import sosfilt_zi

    sos = np.frombuffer(sos_bytes, dtype=np.float64).reshape(n_sections, 6)
    return sosfilt_zi(sos)  # (n_sections, 2)


def sosfilt(sos: np.ndarray, x: np.ndarray, zi: np.ndarray | None = None) -> np.ndarray:
    """Filter x (n_samples, n_channels) through an SOS cascade; returns a copy."""
    sos = np.ascontiguousarray(sos, dtype=np.float64)
    work = np.array(x, dtype=np.float64, order="C", copy=True)
    if work.ndim != 2:
        raise ValueError(f"expected (n_samples, n_channels), got shape {work.shape}")
    if zi is None:
        zi = np.zeros((sos.shape[0], 2, work.shape[1]))
    else:
        zi = np.ascontiguousarray(zi, dtype=np.float64).copy()
    return _sosfilt_active(sos, work, zi)


def sosfiltfilt(sos: np.ndarray, x: np.ndarray, padlen: int) -> np.ndarray:
    """Zero-phase forward-backward SOS filter with odd edge extension."""
    sos = np.ascontiguousarray(sos, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (n_samples, n_channels), got shape {x.shape}")
    n = x.shape[0]
    if padlen < 0:
        raise ValueError("padlen must be non-negative")
    if n <= padlen:
        raise ValueError(f"input of {n} samples is too short for padlen {padlen}")
    if padlen:
        top = 2.0 * x[0] - x[padlen:0:-1]
        bottom = 2.0 * x[-1] - x[-2:-padlen - 2:-1]
        ext = np.concatenate([top, x, bottom])
    else:
        ext = x.copy()
    zi = _steady_state_zi(sos.tobytes(), sos.shape[0])  # (ns, 2)
    work = np.ascontiguousarray(ext)
    fwd_zi = zi[:, :, None] * work[0]
    y = _sosfilt_active(sos, work, np.ascontiguousarray(fwd_zi))
    y = np.ascontiguousarray(y[::-1])
    bwd_zi = zi[:, :, None] * y[0]
    y = _sosfilt_active(sos, y, np.ascontiguousarray(bwd_zi))
    y = y[::-1]
    return np.ascontiguousarray(y[padlen:padlen + n])
