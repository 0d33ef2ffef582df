"""Triplet construction over a pseudo-mix corpus and per-anchor target assembly.

A basic triplet under condition c uses three pseudo-mixes: anchor A(c)|B,
positive A(c)|C' (same focus piece, different donor), negative C(c)|B (same
donor, different focus piece). The interchanged twin swaps positive and
negative and is evaluated under another condition, where sharing the donor
makes the former negative the similar sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audioio, features, objective
from .dataset import DatasetManifest, Piece, mix_full
from .errors import ConflictError, ParameterError, ProvenanceError, SamplingExhaustedError
from .features import MelParams, SegmentRecord
from .pseudomix import CorpusEntry, aligned_focus_stem

DEFAULT_INTERCHANGE_RATIO = 1.0


@dataclass(frozen=True)
class SegmentRef:
    """Stable reference to one segment of one source (piece or pseudo-mix)."""

    source_id: str
    index: int
    start_s: float
    length_s: float

    def to_json(self) -> dict:
        return {"source_id": self.source_id, "index": self.index,
                "start_s": self.start_s, "length_s": self.length_s}

    @classmethod
    def from_json(cls, d: dict) -> "SegmentRef":
        return cls(source_id=d["source_id"], index=d["index"],
                   start_s=d["start_s"], length_s=d["length_s"])


@dataclass(frozen=True)
class TripletSpec:
    condition: int
    anchor: SegmentRef
    positive: SegmentRef
    negative: SegmentRef
    kind: str  # "basic" | "interchanged"

    def to_json(self) -> dict:
        return {"kind": self.kind, "condition": self.condition,
                "anchor": self.anchor.to_json(), "positive": self.positive.to_json(),
                "negative": self.negative.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "TripletSpec":
        return cls(condition=d["condition"], anchor=SegmentRef.from_json(d["anchor"]),
                   positive=SegmentRef.from_json(d["positive"]),
                   negative=SegmentRef.from_json(d["negative"]), kind=d["kind"])

    def canonical(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


class CorpusView:
    """Corpus entries plus per-mix segment grids and (optionally) mel features."""

    def __init__(self, entries: list[CorpusEntry], segments: dict[str, list[SegmentRef]],
                 mels: dict[str, np.ndarray] = None):
        self.entries = {e.mix_id: e for e in entries}
        self.segments = segments
        self.mels = mels or {}
        self._by_focus = {}
        self._by_accomp = {}
        for e in entries:
            self._by_focus.setdefault((e.focus_piece_id, e.focus_condition), []).append(e.mix_id)
            self._by_accomp.setdefault((e.accomp_piece_id, e.focus_condition), []).append(e.mix_id)

    @classmethod
    def build(cls, corpus: list[CorpusEntry], corpus_dir, manifest: DatasetManifest,
              mel_params: MelParams = None, segment_s: float = features.DEFAULT_SEGMENT_S,
              overlap: float = features.DEFAULT_OVERLAP,
              max_segments: int = features.DEFAULT_MAX_SEGMENTS,
              with_mels: bool = True) -> "CorpusView":
        """Load every corpus mix, cut its segment grid, and cache mel features."""
        corpus_dir = Path(corpus_dir)
        mel_params = mel_params or MelParams(sample_rate=manifest.sample_rate_hz)
        bank = features.mel_filterbank(mel_params) if with_mels else None
        segments = {}
        mels = {}
        for entry in corpus:
            wave, sr = audioio.read_wav(corpus_dir / entry.path)
            records = features.segment_waveform(
                wave, sr, source_id=entry.mix_id, music_id_label=entry.label_vector,
                length_s=segment_s, overlap=overlap, max_segments=max_segments,
                silence_threshold_db=manifest.silence_threshold_db)
            segments[entry.mix_id] = [
                SegmentRef(entry.mix_id, i, r.start_s, r.length_s)
                for i, r in enumerate(records)
            ]
            if with_mels:
                mels[entry.mix_id] = np.stack([
                    features.mel_for_segment(r, mel_params, bank).data.astype(np.float32)
                    for r in records
                ]) if records else np.zeros((0, mel_params.n_mels, 0), dtype=np.float32)
        return cls(list(corpus), segments, mels)

    def label_vector(self, source_id: str) -> dict[int, int]:
        if source_id not in self.entries:
            raise ProvenanceError(f"unknown corpus source {source_id}")
        return self.entries[source_id].label_vector

    def mixes_with_focus(self, piece_id: int, c: int) -> list[str]:
        return self._by_focus.get((piece_id, c), [])

    def mixes_with_accomp(self, piece_id: int, c: int) -> list[str]:
        return self._by_accomp.get((piece_id, c), [])

    def mel(self, ref: SegmentRef) -> np.ndarray:
        return self.mels[ref.source_id][ref.index]

    def condition_entries(self, c: int) -> list[CorpusEntry]:
        return [e for e in self.entries.values() if e.focus_condition == c]


def _pick_segment(view: CorpusView, mix_id: str, rng) -> SegmentRef:
    segs = view.segments[mix_id]
    if not segs:
        raise SamplingExhaustedError(f"mix {mix_id} has no usable segments")
    return segs[int(rng.integers(len(segs)))]


def sample_basic_triplet(view: CorpusView, c: int, rng) -> TripletSpec:
    """Draw one basic triplet for condition c, segments uniform per source."""
    anchors = []
    for entry in view.condition_entries(c):
        same_focus = view.mixes_with_focus(entry.focus_piece_id, c)
        same_accomp = [m for m in view.mixes_with_accomp(entry.accomp_piece_id, c)
                       if view.entries[m].focus_piece_id != entry.focus_piece_id]
        if len(same_focus) >= 2 and same_accomp:
            anchors.append(entry.mix_id)
    if not anchors:
        raise SamplingExhaustedError(
            f"corpus has no (anchor, positive, negative) pattern for condition {c}")
    anchors.sort()
    anchor_mix = anchors[int(rng.integers(len(anchors)))]
    a_entry = view.entries[anchor_mix]
    positives = sorted(m for m in view.mixes_with_focus(a_entry.focus_piece_id, c)
                       if m != anchor_mix)
    negatives = sorted(m for m in view.mixes_with_accomp(a_entry.accomp_piece_id, c)
                       if view.entries[m].focus_piece_id != a_entry.focus_piece_id)
    positive_mix = positives[int(rng.integers(len(positives)))]
    negative_mix = negatives[int(rng.integers(len(negatives)))]
    return TripletSpec(
        condition=c,
        anchor=_pick_segment(view, anchor_mix, rng),
        positive=_pick_segment(view, positive_mix, rng),
        negative=_pick_segment(view, negative_mix, rng),
        kind="basic",
    )


def interchange_candidates(view: CorpusView, basic: TripletSpec, n_conditions: int) -> list[int]:
    """Conditions under which the swapped triplet is consistent with the
    label vectors (donor shared by anchor and new positive, not by the new
    negative)."""
    lv_a = view.label_vector(basic.anchor.source_id)
    lv_new_pos = view.label_vector(basic.negative.source_id)
    lv_new_neg = view.label_vector(basic.positive.source_id)
    out = []
    for c_prime in range(n_conditions):
        if c_prime == basic.condition:
            continue
        if c_prime not in lv_a or c_prime not in lv_new_pos:
            continue
        if lv_a[c_prime] != lv_new_pos[c_prime]:
            continue
        if lv_new_neg.get(c_prime) == lv_a[c_prime]:
            continue
        out.append(c_prime)
    return out


def derive_interchanged_triplet(view: CorpusView, basic: TripletSpec, c_prime: int) -> TripletSpec:
    """Swap positive and negative of a basic triplet under a new condition."""
    if c_prime == basic.condition:
        raise ParameterError("interchanged condition must differ from the basic condition")
    lv_a = view.label_vector(basic.anchor.source_id)
    lv_new_pos = view.label_vector(basic.negative.source_id)
    lv_new_neg = view.label_vector(basic.positive.source_id)
    if c_prime not in lv_a or c_prime not in lv_new_pos:
        raise ConflictError(f"condition {c_prime} absent from the anchor or swapped positive")
    if lv_a[c_prime] != lv_new_pos[c_prime]:
        raise ConflictError(
            f"under condition {c_prime} the swapped positive does not share its source "
            f"with the anchor ({lv_a[c_prime]} vs {lv_new_pos[c_prime]})")
    if lv_new_neg.get(c_prime) == lv_a[c_prime]:
        raise ConflictError(
            f"under condition {c_prime} the swapped negative shares source "
            f"{lv_a[c_prime]} with the anchor")
    return TripletSpec(condition=c_prime, anchor=basic.anchor, positive=basic.negative,
                       negative=basic.positive, kind="interchanged")


def build_triplet_set(view: CorpusView, n_triplets: int,
                      interchange_ratio: float = DEFAULT_INTERCHANGE_RATIO,
                      seed: int = 0, n_conditions: int = 5,
                      out_path=None) -> list[TripletSpec]:
    """Sample n_triplets basic triplets cycling the condition, each followed
    by an interchanged twin with probability interchange_ratio. Deterministic
    under (corpus, seed): every triplet index gets its own RNG stream."""
    if n_triplets < 1:
        raise ParameterError(f"n_triplets must be >= 1, got {n_triplets}")
    specs = []
    for i in range(n_triplets):
        c = i % n_conditions
        rng = np.random.default_rng([int(seed), i])
        basic = sample_basic_triplet(view, c, rng)
        specs.append(basic)
        if rng.random() < interchange_ratio:
            candidates = interchange_candidates(view, basic, n_conditions)
            if candidates:
                c_prime = candidates[int(rng.integers(len(candidates)))]
                specs.append(derive_interchanged_triplet(view, basic, c_prime))
    if out_path is not None:
        save_triplets(out_path, specs)
    return specs


def save_triplets(path, specs: list[TripletSpec]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for spec in specs:
            f.write(spec.canonical() + "\n")


def load_triplets(path) -> list[TripletSpec]:
    specs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            specs.append(TripletSpec.from_json(json.loads(line)))
    return specs


class ProvenanceResolver:
    """Maps a segment reference back to the per-condition stem windows that
    are co-located in time with it."""

    def __init__(self, manifest: DatasetManifest = None, corpus: list[CorpusEntry] = None,
                 pieces: list[Piece] = None, silence_threshold_db: float = None):
        self.manifest = manifest
        self.entries = {e.mix_id: e for e in (corpus or [])}
        if silence_threshold_db is None:
            silence_threshold_db = (manifest.silence_threshold_db if manifest is not None
                                    else pieces[0].silence_threshold_db)
        self.silence_threshold_db = silence_threshold_db
        self._pieces: dict[int, Piece] = {p.music_id: p for p in (pieces or [])}
        self._aligned: dict[str, np.ndarray] = {}

    @classmethod
    def from_pieces(cls, pieces: list[Piece], corpus: list[CorpusEntry] = None) -> "ProvenanceResolver":
        return cls(corpus=corpus, pieces=pieces)

    def piece(self, music_id: int) -> Piece:
        if music_id not in self._pieces:
            if self.manifest is None:
                raise ProvenanceError(f"piece {music_id} not preloaded and no manifest given")
            self._pieces[music_id] = self.manifest.load_piece(music_id)
        return self._pieces[music_id]

    def _source_stems(self, source_id: str) -> tuple[dict[int, np.ndarray], dict[int, int]]:
        """Full-length per-condition stem waveforms + label vector of a source."""
        if source_id in self.entries:
            e = self.entries[source_id]
            focus = self.piece(e.focus_piece_id)
            accomp = self.piece(e.accomp_piece_id)
            stems = {e.focus_condition: self._aligned_focus(e, focus, accomp)}
            for c in accomp.present:
                if c != e.focus_condition:
                    stems[c] = accomp.stems[c]
            return stems, e.label_vector
        if source_id.startswith("piece:"):
            piece = self.piece(int(source_id.split(":", 1)[1]))
            stems = {c: piece.stems[c] for c in piece.present}
            return stems, {c: piece.music_id for c in piece.present}
        raise ProvenanceError(f"cannot resolve source {source_id}")

    def _aligned_focus(self, e: CorpusEntry, focus: Piece, accomp: Piece) -> np.ndarray:
        if e.mix_id not in self._aligned:
            self._aligned[e.mix_id] = aligned_focus_stem(focus, e.focus_condition, accomp)
        return self._aligned[e.mix_id]

    def stem_windows(self, ref: SegmentRef, sample_rate: int) -> dict[int, np.ndarray]:
        """Per-condition stem slices under the reference window; silent slices
        and absent conditions are omitted."""
        stems, lv = self._source_stems(ref.source_id)
        start = int(round(ref.start_s * sample_rate))
        length = int(round(ref.length_s * sample_rate))
        out = {}
        for c in lv:
            window = np.asarray(stems[c][start:start + length], dtype=np.float32)
            if len(window) < length:
                window = np.pad(window, (0, length - len(window)))
            if audioio.rms_dbfs(window) > self.silence_threshold_db:
                out[c] = window
        return out


def piece_source_id(music_id: int) -> str:
    return f"piece:{music_id}"


def piece_segments(piece: Piece, segment_s: float = features.DEFAULT_SEGMENT_S,
                   overlap: float = features.DEFAULT_OVERLAP,
                   max_segments: int = features.DEFAULT_MAX_SEGMENTS) -> list[SegmentRecord]:
    """Segment grid over a piece's full mix."""
    mix = mix_full(piece)
    return features.segment_waveform(
        mix.waveform, piece.sample_rate, source_id=piece_source_id(piece.music_id),
        music_id_label=piece.music_id, length_s=segment_s, overlap=overlap,
        max_segments=max_segments, silence_threshold_db=piece.silence_threshold_db)


def anchor_target(anchor_ref: SegmentRef, resolver: ProvenanceResolver,
                  g_models: dict, n_conditions: int, subspace_dim: int,
                  mel_params: MelParams, bank: np.ndarray = None) -> tuple[np.ndarray, bool]:
    """Target embedding for an anchor: per-condition stem windows co-located
    with the anchor segment, encoded by the instrument networks."""
    if bank is None:
        bank = features.mel_filterbank(mel_params)
    windows = resolver.stem_windows(anchor_ref, mel_params.sample_rate)
    stem_mels = {c: features.mel_for_segment(
        SegmentRecord(anchor_ref.source_id, None, anchor_ref.start_s, anchor_ref.length_s, w),
        mel_params, bank) for c, w in windows.items()}
    return objective.target_embedding(stem_mels, g_models, n_conditions, subspace_dim)
