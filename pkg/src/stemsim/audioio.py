"""WAV reading/writing and basic level measurement."""

from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import IngestionError


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a RIFF WAV file as float32 in [-1, 1]; stereo is kept as-is."""
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read audio file {path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    else:
        data = data.astype(np.float32)
    return data, int(sr)


def write_wav(path, data: np.ndarray, sample_rate: int) -> None:
    """Write mono float32 samples as a float32 WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), sample_rate, np.asarray(data, dtype=np.float32))


def to_mono(data: np.ndarray) -> np.ndarray:
    if data.ndim == 1:
        return data
    return data.mean(axis=1, dtype=np.float64).astype(np.float32)


def resample(data: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return np.asarray(data, dtype=np.float32)
    ratio = Fraction(sr_out, sr_in)
    out = resample_poly(data.astype(np.float64), ratio.numerator, ratio.denominator)
    return out.astype(np.float32)


def rms(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def rms_dbfs(x: np.ndarray) -> float:
    """RMS level in dB relative to full scale; -inf for silence."""
    r = rms(x)
    if r <= 0.0:
        return -math.inf
    return 20.0 * math.log10(r)


def peak(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(x)))
