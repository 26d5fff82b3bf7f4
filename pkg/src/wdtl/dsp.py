"""Raw vibration record -> 1000-bin normalized magnitude spectrum."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError

SEGMENT_LENGTH = 2000
SAMPLE_RATE_HZ = 12000.0


@dataclass(frozen=True)
class RawRecord:
    samples: np.ndarray
    sample_rate_hz: float = SAMPLE_RATE_HZ

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")


def segment(record, segment_length=SEGMENT_LENGTH, hop=None) -> list[np.ndarray]:
    """Cut a record into fixed-length segments, dropping the trailing remainder."""
    samples = record.samples if isinstance(record, RawRecord) else np.asarray(record)
    hop = segment_length if hop is None else hop
    if hop < 1 or segment_length < 1:
        raise ValueError("segment_length and hop must be >= 1")
    if samples.size < segment_length:
        warnings.warn(f"record of {samples.size} samples is shorter than one segment "
                      f"({segment_length}); no segments produced", stacklevel=2)
        return []
    count = (samples.size - segment_length) // hop + 1
    return [samples[i * hop:i * hop + segment_length].copy() for i in range(count)]


def _smallest_factor(n):
    for p in (2, 3, 5, 7):
        if n % p == 0:
            return p
    p = 11
    while p * p <= n:
        if n % p == 0:
            return p
        p += 2
    return n


def dft(x) -> np.ndarray:
    """Direct O(N^2) DFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    # reduce k*t mod n before scaling keeps the phase exact for large n
    phase = np.outer(k, k) % n
    return x @ np.exp(-2j * np.pi * phase / n).T


def fft(x) -> np.ndarray:
    """Mixed-radix decimation-in-time FFT along the last axis, any length.

    A length n = p*m transform splits into p interleaved length-m transforms,
    twiddles them and finishes with a length-p DFT across the sub-transforms.
    Prime lengths fall back to the direct DFT.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    p = _smallest_factor(n)
    if p == n:
        return dft(x) if n > 1 else x.copy()
    m = n // p
    sub = fft(np.stack([x[..., r::p] for r in range(p)], axis=-2))  # [..., p, m]
    r = np.arange(p)[:, None]
    k = np.arange(m)[None, :]
    sub = sub * np.exp(-2j * np.pi * (r * k) / n)
    q = np.arange(p)
    fp = np.exp(-2j * np.pi * (np.outer(q, q) % p) / p)              # [q, r]
    out = np.einsum("qr,...rk->...qk", fp, sub)                       # X[k + m*q]
    return out.reshape(*x.shape[:-1], n)


def fft_magnitude(seg, length=SEGMENT_LENGTH) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.float64)
    if seg.shape[-1] != length:
        raise DimensionError(f"expected {length} samples, got {seg.shape[-1]}")
    return np.abs(fft(seg))


def clip_left_half(mags) -> np.ndarray:
    mags = np.asarray(mags)
    n = mags.shape[-1]
    if n % 2:
        raise DimensionError(f"spectrum length {n} is odd")
    return mags[..., : n // 2].copy()


def normalize(spectrum, mode="max") -> np.ndarray:
    """Scale so the largest bin is exactly 1; ``mode='none'`` passes through."""
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if mode == "none":
        return spectrum.copy()
    if mode != "max":
        raise ValueError(f"unknown normalize mode {mode!r}")
    peak = np.abs(spectrum).max(axis=-1, keepdims=True)
    if np.any(peak == 0):
        raise ValueError("cannot normalize an all-zero spectrum")
    return spectrum / peak


def preprocess(segments, normalize_mode="max") -> np.ndarray:
    """[n, 2000] raw segments -> [n, 1000] spectra."""
    segs = np.atleast_2d(np.asarray(segments, dtype=np.float64))
    return normalize(clip_left_half(fft_magnitude(segs)), normalize_mode)
