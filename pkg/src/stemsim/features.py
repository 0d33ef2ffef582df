"""Fixed-length segmentation and normalized log-mel spectrograms."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audioio
from .dataset import DEFAULT_SILENCE_DB
from .errors import ParameterError

DEFAULT_SEGMENT_S = 3.0
DEFAULT_OVERLAP = 0.5
DEFAULT_MAX_SEGMENTS = 40


@dataclass
class MelParams:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-6

    def to_json(self) -> dict:
        return {
            "sample_rate": self.sample_rate, "n_fft": self.n_fft, "hop": self.hop,
            "n_mels": self.n_mels, "fmin": self.fmin, "fmax": self.fmax,
            "log_floor": self.log_floor,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MelParams":
        return cls(**d)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.n_fft:
            return 0
        return (n_samples - self.n_fft) // self.hop + 1


@dataclass
class SegmentRecord:
    """A windowed slice of a source waveform with its provenance."""

    source_id: str
    music_id_label: object  # int for pieces, {condition: music_id} for pseudo-mixes
    start_s: float
    length_s: float
    waveform: np.ndarray = field(repr=False)


@dataclass
class MelSegment:
    """Log-mel matrix (n_mels, n_frames) plus the normalization stats applied."""

    data: np.ndarray
    mean: float = 0.0
    std: float = 1.0
    normalized: bool = False
    record: SegmentRecord = None


def segment_waveform(
    wave: np.ndarray,
    sample_rate: int,
    source_id: str = "",
    music_id_label=None,
    length_s: float = DEFAULT_SEGMENT_S,
    overlap: float = DEFAULT_OVERLAP,
    max_segments: int = DEFAULT_MAX_SEGMENTS,
    silence_threshold_db: float = DEFAULT_SILENCE_DB,
) -> list[SegmentRecord]:
    """Cut a waveform into fixed-length windows on a hop grid.

    Silent windows are skipped before counting; at most max_segments are
    returned, in temporal order. A wave shorter than one window yields [].
    """
    if length_s <= 0:
        raise ParameterError(f"segment length must be positive, got {length_s}")
    if not (0.0 <= overlap < 1.0):
        raise ParameterError(f"overlap must be in [0, 1), got {overlap}")
    seg_n = int(round(length_s * sample_rate))
    hop_n = int(round(seg_n * (1.0 - overlap)))
    records = []
    start = 0
    while start + seg_n <= len(wave):
        sl = wave[start:start + seg_n]
        if audioio.rms_dbfs(sl) > silence_threshold_db:
            records.append(SegmentRecord(
                source_id=source_id,
                music_id_label=music_id_label,
                start_s=start / sample_rate,
                length_s=seg_n / sample_rate,
                waveform=sl,
            ))
            if max_segments is not None and len(records) >= max_segments:
                break
        start += hop_n
    return records


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params: MelParams) -> np.ndarray:
    """Triangular, area-normalized mel filterbank of shape (n_mels, n_fft//2+1)."""
    nyquist = params.sample_rate / 2.0
    if params.fmax > nyquist:
        raise ParameterError(f"fmax {params.fmax} above Nyquist {nyquist}")
    if not (0.0 <= params.fmin < params.fmax):
        raise ParameterError(f"invalid band [{params.fmin}, {params.fmax}]")
    mel_pts = np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), params.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fft_freqs = np.linspace(0.0, nyquist, params.n_fft // 2 + 1)
    bank = np.zeros((params.n_mels, len(fft_freqs)))
    for i in range(params.n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - center, 1e-12)
        tri = np.maximum(0.0, np.minimum(up, down))
        bank[i] = tri * (2.0 / (hi - lo))
    return bank


def band_centers_hz(params: MelParams) -> np.ndarray:
    mel_pts = np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), params.n_mels + 2)
    return mel_to_hz(mel_pts)[1:-1]


def _frame(wave: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    n_frames = (len(wave) - n_fft) // hop + 1
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return wave[idx]


def mel_spectrogram(wave, params: MelParams, bank: np.ndarray = None,
                    record: SegmentRecord = None) -> MelSegment:
    """Magnitude STFT -> mel filterbank -> log(x + log_floor)."""
    if isinstance(wave, SegmentRecord):
        record = wave
        wave = wave.waveform
    wave = np.asarray(wave, dtype=np.float64)
    if len(wave) < params.n_fft:
        raise ParameterError(f"segment of {len(wave)} samples shorter than n_fft {params.n_fft}")
    if bank is None:
        bank = mel_filterbank(params)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(params.n_fft) / params.n_fft)
    frames = _frame(wave, params.n_fft, params.hop) * window
    mag = np.abs(np.fft.rfft(frames, axis=1))
    mel = bank @ mag.T
    return MelSegment(data=np.log(mel + params.log_floor), record=record)


def normalize(mel: MelSegment) -> MelSegment:
    """Standardize to zero mean / unit variance over all bins; constant input
    maps to all zeros."""
    data = np.asarray(mel.data, dtype=np.float64)
    m = float(data.mean())
    s = float(data.std())
    if s <= 1e-10 * max(1.0, abs(m)):
        return MelSegment(data=np.zeros_like(data), mean=m, std=0.0,
                          normalized=True, record=mel.record)
    return MelSegment(data=(data - m) / s, mean=m, std=s,
                      normalized=True, record=mel.record)


def mel_for_segment(record: SegmentRecord, params: MelParams, bank: np.ndarray = None) -> MelSegment:
    return normalize(mel_spectrogram(record.waveform, params, bank=bank, record=record))


_CACHE_MAGIC = b"SSF1"


def save_feature_cache(path, arrays: np.ndarray, params: MelParams, provenance: dict) -> None:
    """Write stacked (n_segments, n_mels, n_frames) features: JSON header +
    row-major float32 little-endian payload."""
    arrays = np.ascontiguousarray(np.asarray(arrays, dtype="<f4"))
    header = json.dumps({
        "shape": list(arrays.shape),
        "params": params.to_json(),
        "provenance": provenance,
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(arrays.tobytes())


def load_feature_cache(path) -> tuple[np.ndarray, MelParams, dict]:
    with open(path, "rb") as f:
        if f.read(4) != _CACHE_MAGIC:
            raise ParameterError(f"{path} is not a feature cache file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arr = np.frombuffer(payload, dtype="<f4").reshape(header["shape"])
    return arr, MelParams.from_json(header["params"]), header["provenance"]
