import numpy as np
import pytest

from stemsim import audioio, dataset
from stemsim.errors import EmptyDatasetError, EmptyMixError, IngestionError, ParameterError

from conftest import rms_db


class TestSynthesizePiece:
    def test_deterministic_for_fixed_id_and_seed(self):
        a = dataset.synthesize_piece(1, 120.0, 30.0, seed=7)
        b = dataset.synthesize_piece(1, 120.0, 30.0, seed=7)
        for c in range(5):
            assert np.array_equal(a.stems[c], b.stems[c])

    def test_different_ids_give_different_stems(self):
        a = dataset.synthesize_piece(1, 120.0, 30.0, seed=7)
        b = dataset.synthesize_piece(2, 120.0, 30.0, seed=7)
        for c in range(5):
            assert not np.array_equal(a.stems[c], b.stems[c])

    def test_different_seeds_give_different_stems(self):
        a = dataset.synthesize_piece(1, 120.0, 30.0, seed=7)
        b = dataset.synthesize_piece(1, 120.0, 30.0, seed=8)
        assert not np.array_equal(a.stems[0], b.stems[0])

    @pytest.mark.parametrize("tempo", [30.0, 39.9, 241.0, 500.0])
    def test_tempo_bounds(self, tempo):
        with pytest.raises(ParameterError):
            dataset.synthesize_piece(3, tempo, 30.0, seed=0)

    def test_duration_bound(self):
        with pytest.raises(ParameterError):
            dataset.synthesize_piece(3, 120.0, 11.0, seed=0)

    def test_stems_peak_normalized(self):
        p = dataset.synthesize_piece(5, 90.0, 20.0, seed=1)
        for c, stem in p.stems.items():
            assert audioio.peak(stem) <= 0.5 + 1e-6

    def test_all_conditions_present_for_synthetic(self):
        p = dataset.synthesize_piece(5, 90.0, 20.0, seed=1)
        assert sorted(p.present) == [0, 1, 2, 3, 4]

    def test_presence_matches_rms_threshold(self):
        p = dataset.synthesize_piece(9, 150.0, 20.0, seed=4)
        for c, stem in p.stems.items():
            assert (c in p.present) == (rms_db(stem) > p.silence_threshold_db)


class TestMixFull:
    def test_single_stem_mix_proportional(self):
        p = dataset.synthesize_piece(1, 120.0, 20.0, seed=2)
        stems = {c: np.zeros_like(p.stems[c]) for c in range(5)}
        stems[2] = p.stems[2]
        solo = dataset.Piece(music_id=1, tempo_bpm=120.0, sample_rate=p.sample_rate,
                             stems=stems, first_onset_s=p.first_onset_s)
        mix = dataset.mix_full(solo)
        assert np.allclose(mix.waveform, mix.gain * stems[2], atol=1e-7)

    def test_no_clipping_branch_gain_one(self):
        n = 16000 * 13
        stems = {c: np.zeros(n, dtype=np.float32) for c in range(5)}
        stems[0][0] = 0.6
        piece = dataset.Piece(music_id=1, tempo_bpm=120.0, sample_rate=16000,
                              stems=stems, first_onset_s=0.0)
        mix = dataset.mix_full(piece)
        assert mix.gain == 1.0
        assert mix.waveform[0] == pytest.approx(0.6)

    def test_clipping_branch_exact_gain(self):
        n = 16000 * 13
        stems = {c: np.zeros(n, dtype=np.float32) for c in range(5)}
        for c in range(4):
            stems[c][10] = 0.5
        piece = dataset.Piece(music_id=1, tempo_bpm=120.0, sample_rate=16000,
                              stems=stems, first_onset_s=0.0)
        mix = dataset.mix_full(piece)
        assert mix.gain == pytest.approx(0.99 / 2.0)
        expected = mix.gain * sum(stems[c].astype(np.float64) for c in range(5))
        assert np.max(np.abs(mix.waveform - expected)) <= 1e-7

    def test_all_silent_piece_rejected(self):
        n = 16000 * 13
        stems = {c: np.zeros(n, dtype=np.float32) for c in range(5)}
        piece = dataset.Piece(music_id=1, tempo_bpm=120.0, sample_rate=16000,
                              stems=stems, first_onset_s=0.0)
        with pytest.raises(EmptyMixError):
            dataset.mix_full(piece)

    def test_stem_sum_consistency_on_synthetic_piece(self):
        p = dataset.synthesize_piece(4, 120.0, 20.0, seed=6)
        mix = dataset.mix_full(p)
        expected = mix.gain * sum(p.stems[c].astype(np.float64) for c in range(5))
        assert np.max(np.abs(mix.waveform - expected)) <= 1e-7


class TestManifest:
    def test_generate_writes_bit_identical_manifests(self, tmp_path):
        m1 = dataset.generate_dataset(tmp_path / "a", n_train=3, duration_s=12.0, seed=5)
        m2 = dataset.generate_dataset(tmp_path / "b", n_train=3, duration_s=12.0, seed=5)
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert a == b
        for p1, p2 in zip(m1.pieces, m2.pieces):
            w1, _ = audioio.read_wav(tmp_path / "a" / p1.stem_paths["drums"])
            w2, _ = audioio.read_wav(tmp_path / "b" / p2.stem_paths["drums"])
            assert np.array_equal(w1, w2)

    def test_duplicate_ids_rejected(self):
        entry = dataset.PieceEntry(music_id=1, tempo_bpm=120.0, split="train",
                                   first_onset_s=0.0, duration_s=12.0, present=[0],
                                   stem_paths={})
        with pytest.raises(ParameterError):
            dataset.DatasetManifest(sample_rate_hz=16000, seed=0,
                                    silence_threshold_db=-60.0, pieces=[entry, entry])

    def test_unknown_split_rejected(self):
        entry = dataset.PieceEntry(music_id=1, tempo_bpm=120.0, split="validation",
                                   first_onset_s=0.0, duration_s=12.0, present=[0],
                                   stem_paths={})
        with pytest.raises(ParameterError):
            dataset.DatasetManifest(sample_rate_hz=16000, seed=0,
                                    silence_threshold_db=-60.0, pieces=[entry])

    def test_load_piece_round_trip(self, toy_manifest):
        piece = toy_manifest.load_piece(1)
        fresh = dataset.synthesize_piece(1, piece.tempo_bpm, 24.0, seed=3)
        for c in range(5):
            assert np.array_equal(piece.stems[c], fresh.stems[c])


def _write_piece_dir(root, name, sr=16000, stems=("drums", "bass", "piano", "guitar", "others"),
                     silent=()):
    rng = np.random.default_rng(42)
    d = root / name
    d.mkdir(parents=True)
    n = sr * 13
    for stem in stems:
        wave = np.zeros(n, dtype=np.float32) if stem in silent else \
            (0.1 * rng.standard_normal(n)).astype(np.float32)
        audioio.write_wav(d / f"{stem}.wav", wave, sr)


class TestIngest:
    def test_three_full_pieces(self, tmp_path):
        for name in ("0001", "0002", "0003"):
            _write_piece_dir(tmp_path, name)
        manifest = dataset.ingest_stem_directory(tmp_path)
        assert len(manifest.pieces) == 3
        assert all(p.present == [0, 1, 2, 3, 4] for p in manifest.pieces)

    def test_missing_guitar_absent_from_present(self, tmp_path):
        _write_piece_dir(tmp_path, "0001", stems=("drums", "bass", "piano", "others"))
        _write_piece_dir(tmp_path, "0002")
        manifest = dataset.ingest_stem_directory(tmp_path)
        assert manifest.entry(1).present == [0, 1, 2, 4]

    def test_digital_silence_excluded_from_present(self, tmp_path):
        _write_piece_dir(tmp_path, "0001", silent=("piano",))
        manifest = dataset.ingest_stem_directory(tmp_path)
        assert 2 not in manifest.entry(1).present
        # a zero array sits below any dB threshold
        assert rms_db(np.zeros(16000)) == -np.inf

    def test_resamples_to_manifest_rate(self, tmp_path):
        _write_piece_dir(tmp_path, "0001", sr=32000)
        manifest = dataset.ingest_stem_directory(tmp_path, sample_rate_hz=16000)
        piece = manifest.load_piece(1)
        assert piece.sample_rate == 16000
        assert piece.n_samples == pytest.approx(16000 * 13, abs=2)

    def test_unreadable_file_names_path(self, tmp_path):
        d = tmp_path / "0001"
        d.mkdir()
        (d / "drums.wav").write_bytes(b"not audio at all")
        with pytest.raises(IngestionError, match="drums.wav"):
            dataset.ingest_stem_directory(tmp_path)

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(EmptyDatasetError):
            dataset.ingest_stem_directory(tmp_path)
