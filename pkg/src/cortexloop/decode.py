"""Common average referencing, filter-bank log band-power features, and
two-class shrinkage LDA -- the decoding chain behind the closed-loop demo.

The filter bank defaults to eight non-overlapping 4 Hz bands from 8 to
40 Hz.  Per band, a 4th-order zero-phase band-pass is followed by the log
of the per-channel variance; features are ordered band-major,
channel-minor.  CSP is deliberately replaced by these band-power features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import DegenerateError, ModelFileError, NyquistError

FILTER_ORDER = 4

DEFAULT_BANDS = tuple((lo, lo + 4.0) for lo in np.arange(8.0, 40.0, 4.0))


def default_bands() -> tuple[tuple[float, float], ...]:
    return DEFAULT_BANDS


@dataclass(frozen=True)
class FilterBankSpec:
    """Ascending, non-overlapping band-pass edges in Hz."""

    bands: tuple[tuple[float, float], ...] = DEFAULT_BANDS

    def __post_init__(self):
        object.__setattr__(self, "bands",
                           tuple((float(lo), float(hi)) for lo, hi in self.bands))
        prev_hi = 0.0
        for lo, hi in self.bands:
            if not 0.0 < lo < hi:
                raise ValueError(f"bad band ({lo}, {hi})")
            if lo < prev_hi:
                raise ValueError("bands must be ascending and non-overlapping")
            prev_hi = hi

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    def validate_rate(self, fs: float) -> None:
        for _, hi in self.bands:
            if hi >= fs / 2:
                raise NyquistError(f"band edge {hi} Hz >= Nyquist {fs / 2} Hz")


def car(x: np.ndarray) -> np.ndarray:
    """Common average reference: zero the channel mean of every sample."""
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=1, keepdims=True)


@lru_cache(maxsize=128)
def _design_band(fs: float, lo: float, hi: float) -> tuple[np.ndarray, int]:
    from scipy.signal import butter

    sos = butter(FILTER_ORDER, (lo, hi), btype="bandpass", fs=fs, output="sos")
    padlen = 3 * 2 * sos.shape[0]  # 3x the effective filter order
    return np.ascontiguousarray(sos), padlen


def bandpass(x: np.ndarray, fs: float, lo: float, hi: float) -> np.ndarray:
    """Zero-phase 4th-order band-pass of an (n_samples, n_channels) array."""
    if hi >= fs / 2:
        raise NyquistError(f"band edge {hi} Hz >= Nyquist {fs / 2} Hz")
    sos, padlen = _design_band(float(fs), float(lo), float(hi))
    return _kernels.sosfiltfilt(sos, x, padlen)


def bandpower_features(x: np.ndarray, fs: float,
                       spec: FilterBankSpec | None = None) -> np.ndarray:
    """Log band-power feature vector of length n_bands * n_channels."""
    spec = spec or FilterBankSpec()
    spec.validate_rate(fs)
    x = np.asarray(x, dtype=np.float64)
    feats = np.empty(spec.n_bands * x.shape[1])
    for b, (lo, hi) in enumerate(spec.bands):
        y = bandpass(x, fs, lo, hi)
        var = y.var(axis=0)
        feats[b * x.shape[1]:(b + 1) * x.shape[1]] = np.log(np.maximum(var, 1e-300))
    return feats


def make_feature_fn(fs: float, spec: FilterBankSpec | None = None):
    """Epoch -> features callable for pipeline map stages (CAR then band power)."""
    spec = spec or FilterBankSpec()

    def feature_fn(epoch_data: np.ndarray) -> np.ndarray:
        return bandpower_features(car(epoch_data), fs, spec)

    return feature_fn


# --- LDA ----------------------------------------------------------------------

CLASS_POS = 1  # positive decision side
CLASS_NEG = 2

_MODEL_MAGIC = b"CLMD"
_MODEL_VERSION = 1


@dataclass
class LdaModel:
    """Two-class linear discriminant; sign(w.x + b) > 0 maps to class 1."""

    w: np.ndarray
    b: float
    shrinkage: float

    def decision(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return X @ self.w + self.b

    def predict(self, X: np.ndarray):
        """Class label(s) in {1, 2}; scalar for a single feature vector."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        scores = self.decision(X)
        labels = np.where(scores > 0, CLASS_POS, CLASS_NEG)
        return int(labels[0]) if single else labels


def lda_fit(X: np.ndarray, y: np.ndarray, shrinkage: float | None = None) -> LdaModel:
    """Fit shrinkage LDA on features X (n, d) with labels y in {1, 2}.

    w = (S_pooled + lambda I)^-1 (mu1 - mu2), b = -w.(mu1 + mu2)/2;
    lambda defaults to 1e-3 * trace(S)/d.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X {X.shape} does not match y {y.shape}")
    present = set(np.unique(y).tolist())
    if present != {CLASS_POS, CLASS_NEG}:
        raise DegenerateError(
            f"need both classes {{1, 2}} present, got labels {sorted(present)}")
    X1, X2 = X[y == CLASS_POS], X[y == CLASS_NEG]
    if len(X1) < 2 or len(X2) < 2:
        raise DegenerateError("need at least 2 epochs per class")
    mu1, mu2 = X1.mean(axis=0), X2.mean(axis=0)
    n1, n2 = len(X1), len(X2)
    s1 = np.cov(X1, rowvar=False, ddof=1)
    s2 = np.cov(X2, rowvar=False, ddof=1)
    pooled = ((n1 - 1) * s1 + (n2 - 1) * s2) / (n1 + n2 - 2)
    pooled = np.atleast_2d(pooled)
    d = X.shape[1]
    lam = 1e-3 * np.trace(pooled) / d if shrinkage is None else float(shrinkage)
    try:
        w = np.linalg.solve(pooled + lam * np.eye(d), mu1 - mu2)
    except np.linalg.LinAlgError as exc:
        raise DegenerateError(f"singular pooled covariance: {exc}") from exc
    b = -float(w @ (mu1 + mu2)) / 2.0
    return LdaModel(w=w, b=b, shrinkage=float(lam))


def save_model(model: LdaModel, path) -> None:
    """Write CLMD v1: magic, version u16, dims u32, lambda f64, w f64[d], b f64."""
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<HI", _MODEL_VERSION, model.w.shape[0]))
        fh.write(struct.pack("<d", model.shrinkage))
        fh.write(np.ascontiguousarray(model.w, dtype=np.float64).tobytes())
        fh.write(struct.pack("<d", model.b))


def load_model(path) -> LdaModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MODEL_MAGIC:
        raise ModelFileError("not a CLMD model file")
    try:
        version, dims = struct.unpack_from("<HI", raw, 4)
        if version != _MODEL_VERSION:
            raise ModelFileError(f"unsupported model version {version}")
        (lam,) = struct.unpack_from("<d", raw, 10)
        w = np.frombuffer(raw, dtype="<f8", count=dims, offset=18).copy()
        (b,) = struct.unpack_from("<d", raw, 18 + 8 * dims)
    except struct.error as exc:
        raise ModelFileError(f"truncated model file: {exc}") from exc
    if len(raw) != 18 + 8 * dims + 8:
        raise ModelFileError("model file length does not match dims")
    return LdaModel(w=w, b=float(b), shrinkage=float(lam))
