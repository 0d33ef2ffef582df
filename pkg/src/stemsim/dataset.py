"""Multi-stem pieces: procedural synthesis, directory ingestion, manifests, mixing.

Condition indices are fixed: 0=drums, 1=bass, 2=piano, 3=guitar, 4=others.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import audioio
from .errors import EmptyDatasetError, EmptyMixError, IngestionError, ParameterError

CONDITION_NAMES = ("drums", "bass", "piano", "guitar", "others")
N_CONDITIONS = 5

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_SILENCE_DB = -60.0
DEFAULT_TEMPOS = (90.0, 120.0, 150.0)
# Test pieces cycle over two tempo values so that ten test pieces form
# groups large enough for the four-donor pseudo-mix protocol.
DEFAULT_TEST_TEMPOS = (90.0, 120.0)

MIN_TEMPO_BPM = 40.0
MAX_TEMPO_BPM = 240.0
MIN_DURATION_S = 12.0
STEM_PEAK = 0.45
MIX_PEAK_CEILING = 0.99

PENTATONIC = (0, 3, 5, 7, 10)


def midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69) / 12.0)


@dataclass
class Piece:
    """One multi-stem piece; stems share a sample rate and length."""

    music_id: int
    tempo_bpm: float
    sample_rate: int
    stems: dict[int, np.ndarray]
    first_onset_s: float
    present: frozenset[int] = field(default=None)
    silence_threshold_db: float = DEFAULT_SILENCE_DB

    def __post_init__(self):
        lengths = {len(w) for w in self.stems.values()}
        if len(lengths) != 1:
            raise ParameterError(f"stems of piece {self.music_id} differ in length: {lengths}")
        if self.present is None:
            self.present = frozenset(
                c for c, w in self.stems.items()
                if audioio.rms_dbfs(w) > self.silence_threshold_db
            )

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.stems.values())))

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def first_onset_samples(self) -> int:
        return int(round(self.first_onset_s * self.sample_rate))


@dataclass
class Mix:
    """A peak-safe sum of stems together with the scalar gain that was applied."""

    waveform: np.ndarray
    gain: float


def _place(out: np.ndarray, start: int, clip: np.ndarray) -> None:
    """Add `clip` into `out` beginning at sample `start`, clipping at the edges."""
    if start >= len(out):
        return
    end = min(len(out), start + len(clip))
    if start < 0:
        clip = clip[-start:]
        start = 0
        end = min(len(out), start + len(clip))
    out[start:end] += clip[: end - start]


def _synth_drums(rng, n: int, sr: int, beat_s: float, onset: int) -> np.ndarray:
    out = np.zeros(n)
    burst_len = int(0.12 * sr)
    t = np.arange(burst_len) / sr
    decay = rng.uniform(35.0, 80.0)
    lowpass = rng.uniform(0.15, 0.75)
    main = rng.standard_normal(burst_len) * np.exp(-decay * t)
    main = lfilter([1.0 - lowpass], [1.0, -lowpass], main)
    off = rng.standard_normal(burst_len) * np.exp(-1.8 * decay * t) * 0.45
    k = 0
    while True:
        pos = onset + int(round(k * beat_s * sr))
        if pos >= n:
            break
        _place(out, pos, main)
        _place(out, pos + int(round(0.5 * beat_s * sr)), off)
        k += 1
    return out


def _synth_bass(rng, n: int, sr: int, beat_s: float, onset: int) -> np.ndarray:
    out = np.zeros(n)
    root = rng.integers(28, 41)  # E1..E2 region
    pattern = rng.choice(PENTATONIC, size=8)
    slot_s = beat_s / 2.0
    note_len = int(0.85 * slot_s * sr)
    t = np.arange(note_len) / sr
    env = np.exp(-2.5 * t / slot_s) * np.minimum(t / 0.005, 1.0)
    k = 0
    while True:
        pos = onset + int(round(k * slot_s * sr))
        if pos >= n:
            break
        f = midi_to_hz(root + pattern[k % len(pattern)])
        saw = 2.0 * ((f * t) % 1.0) - 1.0
        _place(out, pos, saw * env)
        k += 1
    return out


def _chord_tone(freqs, t, harmonic_tilt: float, decay_rate: float) -> np.ndarray:
    tone = np.zeros_like(t)
    for f in freqs:
        for h in range(1, 5):
            tone += (h ** -harmonic_tilt) * np.sin(2.0 * np.pi * f * h * t)
    return tone * np.exp(-decay_rate * t)


def _synth_piano(rng, n: int, sr: int, beat_s: float, onset: int) -> np.ndarray:
    out = np.zeros(n)
    root = rng.integers(55, 68)
    progression = rng.integers(-5, 8, size=4)
    third = 3 if rng.random() < 0.5 else 4
    tilt = rng.uniform(0.7, 1.5)
    decay = rng.uniform(1.5, 4.0)
    chord_len = int(2.0 * beat_s * sr)
    t = np.arange(chord_len) / sr
    k = 0
    while True:
        pos = onset + int(round(k * 2.0 * beat_s * sr))
        if pos >= n:
            break
        base = root + progression[k % 4]
        freqs = [midi_to_hz(base + iv) for iv in (0, third, 7)]
        _place(out, pos, _chord_tone(freqs, t, tilt, decay))
        k += 1
    return out


def _synth_guitar(rng, n: int, sr: int, beat_s: float, onset: int) -> np.ndarray:
    out = np.zeros(n)
    root = rng.integers(52, 65)
    mask = rng.random(8) < 0.65
    mask[0] = True
    notes = rng.choice(PENTATONIC, size=8)
    base_decay = rng.uniform(2.5, 6.0)
    slot_s = beat_s / 2.0
    pluck_len = int(min(2.5 * slot_s, 0.8) * sr)
    t = np.arange(pluck_len) / sr
    attack = np.minimum(t / 0.003, 1.0)
    k = 0
    while True:
        pos = onset + int(round(k * slot_s * sr))
        if pos >= n:
            break
        if mask[k % 8]:
            f = midi_to_hz(root + notes[k % 8])
            pluck = np.zeros_like(t)
            for h in range(1, 6):
                pluck += (1.0 / h) * np.sin(2.0 * np.pi * f * h * t) * np.exp(-(base_decay + 1.3 * h) * t)
            _place(out, pos, pluck * attack)
        k += 1
    return out


def _synth_others(rng, n: int, sr: int, beat_s: float, onset: int) -> np.ndarray:
    root = rng.integers(60, 73)
    intervals = (0, 4, 7, 11) if rng.random() < 0.5 else (0, 3, 7, 10)
    detune = rng.uniform(-0.004, 0.004, size=len(intervals))
    lfo_hz = rng.uniform(0.08, 0.3)
    t = np.arange(n) / sr
    pad = np.zeros(n)
    for iv, d in zip(intervals, detune):
        f = midi_to_hz(root + iv) * (1.0 + d)
        pad += np.sin(2.0 * np.pi * f * t) + 0.3 * np.sin(2.0 * np.pi * 2.0 * f * t)
    lfo = 1.0 + 0.4 * np.sin(2.0 * np.pi * lfo_hz * t)
    attack = np.minimum(t / 1.5, 1.0)
    return pad * lfo * attack


_SYNTHESIZERS = (_synth_drums, _synth_bass, _synth_piano, _synth_guitar, _synth_others)


def synthesize_piece(
    music_id: int,
    tempo_bpm: float,
    duration_s: float,
    seed: int,
    n_conditions: int = N_CONDITIONS,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    silence_threshold_db: float = DEFAULT_SILENCE_DB,
) -> Piece:
    """Procedurally generate a multi-stem piece on a beat grid.

    Deterministic for fixed (music_id, seed); every stem is peak-normalized
    below full scale so that sums stay testable against the recorded gain.
    """
    if not (MIN_TEMPO_BPM <= tempo_bpm <= MAX_TEMPO_BPM):
        raise ParameterError(f"tempo {tempo_bpm} BPM outside [{MIN_TEMPO_BPM}, {MAX_TEMPO_BPM}]")
    if duration_s < MIN_DURATION_S:
        raise ParameterError(f"duration {duration_s}s below minimum {MIN_DURATION_S}s")
    if n_conditions != N_CONDITIONS:
        raise ParameterError(f"n_conditions must be {N_CONDITIONS}, got {n_conditions}")

    rng = np.random.default_rng([int(seed), int(music_id)])
    n = int(round(duration_s * sample_rate))
    onset = int(round(rng.uniform(0.0, 0.4) * sample_rate))
    beat_s = 60.0 / tempo_bpm

    stems = {}
    for c, synth in enumerate(_SYNTHESIZERS):
        wave = synth(rng, n, sample_rate, beat_s, onset)
        pk = audioio.peak(wave)
        if pk > 0:
            wave = wave * (STEM_PEAK / pk)
        stems[c] = wave.astype(np.float32)

    return Piece(
        music_id=music_id,
        tempo_bpm=tempo_bpm,
        sample_rate=sample_rate,
        stems=stems,
        first_onset_s=onset / sample_rate,
        silence_threshold_db=silence_threshold_db,
    )


def mix_full(piece: Piece) -> Mix:
    """Sum all stems with a recorded peak-safe gain."""
    if not piece.present:
        raise EmptyMixError(f"piece {piece.music_id} has no non-silent stems")
    total = np.zeros(piece.n_samples, dtype=np.float64)
    for wave in piece.stems.values():
        total += wave
    pk = audioio.peak(total)
    gain = min(1.0, MIX_PEAK_CEILING / pk) if pk > 0 else 1.0
    return Mix(waveform=(gain * total).astype(np.float32), gain=gain)


@dataclass
class PieceEntry:
    """Manifest row describing one piece on disk."""

    music_id: int
    tempo_bpm: float
    split: str
    first_onset_s: float
    duration_s: float
    present: list[int]
    stem_paths: dict[str, str]

    def to_json(self) -> dict:
        return {
            "music_id": self.music_id,
            "tempo_bpm": self.tempo_bpm,
            "split": self.split,
            "first_onset_s": self.first_onset_s,
            "duration_s": self.duration_s,
            "present": sorted(self.present),
            "stem_paths": self.stem_paths,
        }


@dataclass
class DatasetManifest:
    sample_rate_hz: int
    seed: int
    silence_threshold_db: float
    pieces: list[PieceEntry]
    base_dir: Path = None

    def __post_init__(self):
        ids = [p.music_id for p in self.pieces]
        if len(set(ids)) != len(ids):
            raise ParameterError("music_ids in manifest are not unique")
        bad = [p.split for p in self.pieces if p.split not in ("pretrain", "train", "test")]
        if bad:
            raise ParameterError(f"unknown split tags: {sorted(set(bad))}")

    def split_entries(self, split: str) -> list[PieceEntry]:
        return [p for p in self.pieces if p.split == split]

    def entry(self, music_id: int) -> PieceEntry:
        for p in self.pieces:
            if p.music_id == music_id:
                return p
        raise KeyError(f"music_id {music_id} not in manifest")

    def to_json(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate_hz,
            "seed": self.seed,
            "silence_threshold_db": self.silence_threshold_db,
            "pieces": [p.to_json() for p in self.pieces],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        pieces = [
            PieceEntry(
                music_id=p["music_id"],
                tempo_bpm=p["tempo_bpm"],
                split=p["split"],
                first_onset_s=p["first_onset_s"],
                duration_s=p["duration_s"],
                present=list(p["present"]),
                stem_paths=dict(p["stem_paths"]),
            )
            for p in raw["pieces"]
        ]
        return cls(
            sample_rate_hz=raw["sample_rate_hz"],
            seed=raw["seed"],
            silence_threshold_db=raw["silence_threshold_db"],
            pieces=pieces,
            base_dir=path.parent,
        )

    def load_piece(self, music_id: int) -> Piece:
        """Load stem audio for one manifest entry back into a Piece."""
        entry = self.entry(music_id)
        n = int(round(entry.duration_s * self.sample_rate_hz))
        stems = {}
        for c, name in enumerate(CONDITION_NAMES):
            rel = entry.stem_paths.get(name)
            if rel is None:
                stems[c] = np.zeros(n, dtype=np.float32)
                continue
            wave, sr = audioio.read_wav(Path(self.base_dir) / rel)
            if sr != self.sample_rate_hz:
                raise IngestionError(f"{rel}: sample rate {sr} != manifest {self.sample_rate_hz}")
            stems[c] = audioio.to_mono(wave)
        return Piece(
            music_id=entry.music_id,
            tempo_bpm=entry.tempo_bpm,
            sample_rate=self.sample_rate_hz,
            stems=stems,
            first_onset_s=entry.first_onset_s,
            silence_threshold_db=self.silence_threshold_db,
        )

    def load_split(self, split: str) -> list[Piece]:
        return [self.load_piece(p.music_id) for p in self.split_entries(split)]


def _write_piece_stems(piece: Piece, piece_dir: Path) -> list[str]:
    for c, name in enumerate(CONDITION_NAMES):
        audioio.write_wav(piece_dir / f"{name}.wav", piece.stems[c], piece.sample_rate)
    return list(CONDITION_NAMES)


def generate_dataset(
    out_dir,
    n_train: int,
    n_test: int = 0,
    n_pretrain: int = 0,
    duration_s: float = 30.0,
    seed: int = 0,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    silence_threshold_db: float = DEFAULT_SILENCE_DB,
    train_tempos: tuple = DEFAULT_TEMPOS,
    test_tempos: tuple = DEFAULT_TEST_TEMPOS,
) -> DatasetManifest:
    """Synthesize a dataset of pieces, write stems + manifest under out_dir."""
    out_dir = Path(out_dir)
    plan = (
        [("pretrain", train_tempos)] * n_pretrain
        + [("train", train_tempos)] * n_train
        + [("test", test_tempos)] * n_test
    )
    if not plan:
        raise EmptyDatasetError("no pieces requested")
    entries = []
    split_counter = {}
    for music_id, (split, tempos) in enumerate(plan, start=1):
        i = split_counter.get(split, 0)
        split_counter[split] = i + 1
        tempo = float(tempos[i % len(tempos)])
        piece = synthesize_piece(
            music_id, tempo, duration_s, seed,
            sample_rate=sample_rate, silence_threshold_db=silence_threshold_db,
        )
        piece_dir = out_dir / "pieces" / f"{music_id:04d}"
        stem_paths = {name: f"pieces/{music_id:04d}/{name}.wav"
                      for name in _write_piece_stems(piece, piece_dir)}
        entries.append(PieceEntry(
            music_id=music_id,
            tempo_bpm=tempo,
            split=split,
            first_onset_s=piece.first_onset_s,
            duration_s=piece.duration_s,
            present=sorted(piece.present),
            stem_paths=stem_paths,
        ))
    manifest = DatasetManifest(
        sample_rate_hz=sample_rate,
        seed=seed,
        silence_threshold_db=silence_threshold_db,
        pieces=entries,
        base_dir=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def _estimate_first_onset_s(wave: np.ndarray, sr: int, threshold_db: float) -> float:
    """First time a 20 ms window exceeds the silence threshold."""
    win = max(1, int(0.02 * sr))
    hop = max(1, int(0.01 * sr))
    for start in range(0, max(1, len(wave) - win + 1), hop):
        if audioio.rms_dbfs(wave[start:start + win]) > threshold_db:
            return start / sr
    return 0.0


def ingest_stem_directory(
    root_path,
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
    silence_threshold_db: float = DEFAULT_SILENCE_DB,
    default_tempo_bpm: float = 120.0,
    split: str = "train",
    manifest_path=None,
) -> DatasetManifest:
    """Build a manifest from `<root>/<piece_id>/<stem_name>.wav` directories.

    Stems are resampled to `sample_rate_hz` and downmixed to mono. Missing
    stems become silent and are left out of `present`. An optional
    `meta.json` per piece may carry `tempo_bpm` and `split`.
    """
    root = Path(root_path)
    piece_dirs = sorted(d for d in root.iterdir() if d.is_dir() and not d.name.startswith("_")) if root.is_dir() else []
    entries = []
    for idx, piece_dir in enumerate(piece_dirs, start=1):
        stem_files = {name: piece_dir / f"{name}.wav" for name in CONDITION_NAMES
                      if (piece_dir / f"{name}.wav").exists()}
        if not stem_files:
            continue
        tempo = default_tempo_bpm
        piece_split = split
        meta_path = piece_dir / "meta.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            tempo = float(meta.get("tempo_bpm", tempo))
            piece_split = meta.get("split", piece_split)
        music_id = int(piece_dir.name) if piece_dir.name.isdigit() else idx

        waves = {}
        for name, path in stem_files.items():
            raw, sr = audioio.read_wav(path)
            waves[name] = audioio.resample(audioio.to_mono(raw), sr, sample_rate_hz)
        n = max(len(w) for w in waves.values())
        present = []
        stem_paths = {}
        mix = np.zeros(n, dtype=np.float64)
        # Normalized copies are materialized so every manifest path carries
        # the manifest's sample rate and mono layout.
        for c, name in enumerate(CONDITION_NAMES):
            if name not in waves:
                continue
            w = waves[name]
            if len(w) < n:
                w = np.pad(w, (0, n - len(w)))
            rel = f"_ingested/{music_id:04d}/{name}.wav"
            audioio.write_wav(root / rel, w, sample_rate_hz)
            stem_paths[name] = rel
            mix += w
            if audioio.rms_dbfs(w) > silence_threshold_db:
                present.append(c)
        entries.append(PieceEntry(
            music_id=music_id,
            tempo_bpm=tempo,
            split=piece_split,
            first_onset_s=_estimate_first_onset_s(mix.astype(np.float32), sample_rate_hz, silence_threshold_db),
            duration_s=n / sample_rate_hz,
            present=present,
            stem_paths=stem_paths,
        ))
    if not entries:
        raise EmptyDatasetError(f"no pieces found under {root}")
    manifest = DatasetManifest(
        sample_rate_hz=sample_rate_hz,
        seed=0,
        silence_threshold_db=silence_threshold_db,
        pieces=entries,
        base_dir=root,
    )
    manifest.save(manifest_path if manifest_path else root / "manifest.json")
    return manifest
