"""Pseudo-mixed pieces: a focus stem from one piece over accompaniment from another.

A pseudo-mix for focus condition c takes piece A's stem c, shifts it so A's
first onset lands on the donor piece B's first onset, and sums it with B's
remaining stems. Donors are restricted to A's tempo group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audioio
from .dataset import MIX_PEAK_CEILING, DatasetManifest, Piece
from .errors import ConstraintError, MissingStemError

DEFAULT_TEMPO_BIN_BPM = 10.0
DEFAULT_PER_FOCUS = 3


@dataclass
class TempoGrouping:
    """Partition of manifest pieces into tempo bins."""

    bin_width_bpm: float
    group_of: dict[int, int]  # music_id -> bin index

    def members(self, group_key: int) -> list[int]:
        return sorted(mid for mid, g in self.group_of.items() if g == group_key)

    def same_group(self, id_a: int, id_b: int) -> bool:
        return self.group_of[id_a] == self.group_of[id_b]


def tempo_group(manifest: DatasetManifest, bin_width_bpm: float = DEFAULT_TEMPO_BIN_BPM,
                split: str = None) -> TempoGrouping:
    """Group pieces by floor(tempo / bin_width)."""
    if bin_width_bpm <= 0:
        raise ConstraintError(f"bin width must be positive, got {bin_width_bpm}")
    entries = manifest.pieces if split is None else manifest.split_entries(split)
    group_of = {p.music_id: int(np.floor(p.tempo_bpm / bin_width_bpm)) for p in entries}
    return TempoGrouping(bin_width_bpm=bin_width_bpm, group_of=group_of)


@dataclass
class PseudoMix:
    focus_condition: int
    focus_piece_id: int
    accomp_piece_id: int
    waveform: np.ndarray
    gain: float
    label_vector: dict[int, int]  # condition -> source music_id, present stems only


def aligned_focus_stem(focus: Piece, c: int, accomp: Piece) -> np.ndarray:
    """Focus stem c shifted so its first onset coincides with the donor's,
    truncated/zero-padded to donor length."""
    shift = accomp.first_onset_samples - focus.first_onset_samples
    out = np.zeros(accomp.n_samples, dtype=np.float64)
    stem = focus.stems[c]
    src_start = max(0, -shift)
    dst_start = max(0, shift)
    span = min(len(stem) - src_start, len(out) - dst_start)
    if span > 0:
        out[dst_start:dst_start + span] = stem[src_start:src_start + span]
    return out


def make_pseudo_mix(focus: Piece, c: int, accomp: Piece,
                    tempo_bin_bpm: float = DEFAULT_TEMPO_BIN_BPM) -> PseudoMix:
    """Mix focus piece's stem c with the donor's other stems, onset-aligned."""
    if int(np.floor(focus.tempo_bpm / tempo_bin_bpm)) != int(np.floor(accomp.tempo_bpm / tempo_bin_bpm)):
        raise ConstraintError(
            f"tempo group mismatch: piece {focus.music_id} at {focus.tempo_bpm} BPM vs "
            f"piece {accomp.music_id} at {accomp.tempo_bpm} BPM (bin {tempo_bin_bpm})")
    if c not in focus.present:
        raise MissingStemError(f"piece {focus.music_id} has no non-silent stem {c}")
    accomp_conditions = sorted(accomp.present - {c})
    if not accomp_conditions and focus.music_id != accomp.music_id:
        raise ConstraintError(
            f"donor piece {accomp.music_id} has no accompaniment stems besides condition {c}")

    total = aligned_focus_stem(focus, c, accomp)
    for c_other in accomp.present:
        if c_other == c:
            continue
        total += accomp.stems[c_other]
    pk = audioio.peak(total)
    gain = min(1.0, MIX_PEAK_CEILING / pk) if pk > 0 else 1.0
    label_vector = {c: focus.music_id}
    for c_other in accomp_conditions:
        label_vector[c_other] = accomp.music_id
    return PseudoMix(
        focus_condition=c,
        focus_piece_id=focus.music_id,
        accomp_piece_id=accomp.music_id,
        waveform=(gain * total).astype(np.float32),
        gain=gain,
        label_vector=label_vector,
    )


@dataclass
class CorpusEntry:
    """One pseudo-mix row of a corpus index."""

    mix_id: str
    focus_condition: int
    focus_piece_id: int
    accomp_piece_id: int
    gain: float
    path: str
    label_vector: dict[int, int] = None

    def to_json(self) -> dict:
        return {
            "mix_id": self.mix_id,
            "focus_condition": self.focus_condition,
            "focus_piece_id": self.focus_piece_id,
            "accomp_piece_id": self.accomp_piece_id,
            "gain": self.gain,
            "path": self.path,
        }


def _label_vector_from_manifest(manifest: DatasetManifest, focus_id: int, c: int,
                                accomp_id: int) -> dict[int, int]:
    lv = {c: focus_id}
    for c_other in manifest.entry(accomp_id).present:
        if c_other != c:
            lv[c_other] = accomp_id
    return lv


def build_pseudomix_corpus(
    manifest: DatasetManifest,
    grouping: TempoGrouping,
    per_focus_count: int,
    seed: int,
    out_dir,
    split: str = "train",
    tempo_bin_bpm: float = None,
) -> list[CorpusEntry]:
    """For every (piece, present condition) draw `per_focus_count` distinct
    donors from the piece's tempo group and write the mixes plus an index."""
    if per_focus_count < 1:
        raise ConstraintError(f"per_focus_count must be >= 1, got {per_focus_count}")
    out_dir = Path(out_dir)
    bin_bpm = tempo_bin_bpm if tempo_bin_bpm is not None else grouping.bin_width_bpm
    entries_in_split = [p for p in manifest.split_entries(split) if p.music_id in grouping.group_of]

    for group_key in sorted({grouping.group_of[p.music_id] for p in entries_in_split}):
        members = [p.music_id for p in entries_in_split if grouping.group_of[p.music_id] == group_key]
        if len(members) < per_focus_count + 1:
            raise ConstraintError(
                f"tempo group {group_key} has {len(members)} pieces; "
                f"need at least {per_focus_count + 1} for {per_focus_count} donors")

    pieces = {p.music_id: manifest.load_piece(p.music_id) for p in entries_in_split}
    corpus: list[CorpusEntry] = []
    counter = 0
    for entry in entries_in_split:
        focus = pieces[entry.music_id]
        group_key = grouping.group_of[entry.music_id]
        donor_pool = [m for m in grouping.members(group_key)
                      if m != entry.music_id and m in pieces]
        for c in sorted(focus.present):
            rng = np.random.default_rng([int(seed), int(entry.music_id), int(c)])
            donors = rng.choice(donor_pool, size=per_focus_count, replace=False)
            for donor_id in donors:
                mix = make_pseudo_mix(focus, c, pieces[int(donor_id)], tempo_bin_bpm=bin_bpm)
                mix_id = f"pm{counter:05d}"
                counter += 1
                rel = f"mixes/{mix_id}.wav"
                audioio.write_wav(out_dir / rel, mix.waveform, manifest.sample_rate_hz)
                corpus.append(CorpusEntry(
                    mix_id=mix_id,
                    focus_condition=c,
                    focus_piece_id=mix.focus_piece_id,
                    accomp_piece_id=mix.accomp_piece_id,
                    gain=mix.gain,
                    path=rel,
                    label_vector=mix.label_vector,
                ))
    index = [e.to_json() for e in corpus]
    (out_dir / "corpus_index.json").parent.mkdir(parents=True, exist_ok=True)
    (out_dir / "corpus_index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return corpus


def load_corpus(index_path, manifest: DatasetManifest) -> list[CorpusEntry]:
    """Read a corpus index and re-derive label vectors from the manifest."""
    index_path = Path(index_path)
    rows = json.loads(index_path.read_text())
    corpus = []
    for row in rows:
        corpus.append(CorpusEntry(
            mix_id=row["mix_id"],
            focus_condition=row["focus_condition"],
            focus_piece_id=row["focus_piece_id"],
            accomp_piece_id=row["accomp_piece_id"],
            gain=row["gain"],
            path=row["path"],
            label_vector=_label_vector_from_manifest(
                manifest, row["focus_piece_id"], row["focus_condition"], row["accomp_piece_id"]),
        ))
    return corpus


def reconstruct_mix(entry: CorpusEntry, manifest: DatasetManifest) -> np.ndarray:
    """Re-mix a corpus entry from its provenance fields alone."""
    focus = manifest.load_piece(entry.focus_piece_id)
    accomp = manifest.load_piece(entry.accomp_piece_id)
    total = aligned_focus_stem(focus, entry.focus_condition, accomp)
    for c_other in accomp.present:
        if c_other != entry.focus_condition:
            total += accomp.stems[c_other]
    return (entry.gain * total).astype(np.float32)
