"""kNN music-ID protocols, subspace evaluation with the exclusion rule,
2-D projection export, and listening-set export."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audioio, features, models
from .dataset import CONDITION_NAMES, Piece, mix_full
from .errors import EvaluationError, ExportError, ParameterError
from .features import MelParams
from .models import SegmentEncoder, encode_batch
from .objective import condition_mask
from .pseudomix import CorpusEntry
from .sampling import piece_source_id

DEFAULT_K = 5
DEFAULT_EVAL_SEGMENT_S = 10.0
TSNE_PERPLEXITY = 10.0
TSNE_ITERS = 500


@dataclass
class EmbeddingStore:
    """Row-per-segment embedding matrix with aligned metadata."""

    X: np.ndarray                      # (N, E) float64
    labels: np.ndarray                 # (N,) int music-id labels used for voting
    meta: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if len(self.X) != len(self.labels) or len(self.X) != len(self.meta):
            raise EvaluationError("store rows and metadata are misaligned")

    def __len__(self) -> int:
        return len(self.X)


@dataclass
class EvalReport:
    kind: str
    accuracy: dict
    counts: dict
    config: dict
    exclusions: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"kind": self.kind, "accuracy": self.accuracy, "counts": self.counts,
                "config": self.config, "exclusions": self.exclusions}

    def to_text(self) -> str:
        lines = [f"evaluation: {self.kind}"]
        width = max(len(k) for k in self.accuracy) if self.accuracy else 8
        for key in sorted(self.accuracy):
            lines.append(f"  {key:<{width}}  {100.0 * self.accuracy[key]:6.2f}%")
        for key in sorted(self.counts):
            lines.append(f"  {key} = {self.counts[key]}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        path.with_suffix(".txt").write_text(self.to_text())


def masked_rows(X: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return X * np.asarray(mask, dtype=X.dtype)


def knn_predict(query: np.ndarray, store: EmbeddingStore, k: int = DEFAULT_K,
                mask: np.ndarray = None) -> int:
    """Majority vote over the k nearest store rows under a masked distance.

    Ties break by smallest summed distance among the tied ids, then by
    smallest id. The store must not contain the query row itself.
    """
    if len(store) == 0:
        raise EvaluationError("empty reference store")
    if k > len(store):
        raise EvaluationError(f"k={k} larger than store size {len(store)}")
    q = np.asarray(query, dtype=np.float64)
    X = store.X
    if mask is not None:
        q = q * mask
        X = masked_rows(X, mask)
    d = np.sqrt(np.sum((X - q) ** 2, axis=1))
    top = np.argsort(d, kind="stable")[:k]
    votes = {}
    for i in top:
        lbl = int(store.labels[i])
        cnt, dist = votes.get(lbl, (0, 0.0))
        votes[lbl] = (cnt + 1, dist + float(d[i]))
    best_count = max(cnt for cnt, _ in votes.values())
    tied = [(dist, lbl) for lbl, (cnt, dist) in votes.items() if cnt == best_count]
    tied.sort()
    return tied[0][1]


def _batched_encode(model: SegmentEncoder, mels: list, batch: int = 128) -> np.ndarray:
    out = []
    for start in range(0, len(mels), batch):
        out.append(encode_batch(model, mels[start:start + batch]))
    return np.concatenate(out).astype(np.float64)


def store_from_pieces(model: SegmentEncoder, pieces: list[Piece], mel_params: MelParams,
                      input_length_s: float = DEFAULT_EVAL_SEGMENT_S,
                      overlap: float = features.DEFAULT_OVERLAP,
                      max_segments: int = features.DEFAULT_MAX_SEGMENTS,
                      min_segment_fraction: float = 0.1) -> tuple[EmbeddingStore, dict]:
    """Embed full-mix segments of every piece; pieces whose usable segment
    count falls below min_segment_fraction of the grid are dropped."""
    bank = features.mel_filterbank(mel_params)
    mels, labels, meta = [], [], []
    dropped = []
    for piece in pieces:
        mix = mix_full(piece)
        seg_n = int(round(input_length_s * piece.sample_rate))
        hop_n = int(round(seg_n * (1.0 - overlap)))
        nominal = max(0, (piece.n_samples - seg_n) // hop_n + 1)
        records = features.segment_waveform(
            mix.waveform, piece.sample_rate, source_id=piece_source_id(piece.music_id),
            music_id_label=piece.music_id, length_s=input_length_s, overlap=overlap,
            max_segments=max_segments, silence_threshold_db=piece.silence_threshold_db)
        if nominal > 0 and len(records) < min_segment_fraction * nominal:
            dropped.append(piece.music_id)
            continue
        for r in records:
            mels.append(features.mel_for_segment(r, mel_params, bank).data)
            labels.append(piece.music_id)
            meta.append({"source_id": r.source_id, "start_s": r.start_s,
                         "length_s": r.length_s, "music_id": piece.music_id})
    if not mels:
        raise EvaluationError("no usable segments in the test pieces")
    X = _batched_encode(model, mels)
    return EmbeddingStore(X=X, labels=np.asarray(labels), meta=meta), {"dropped_pieces": dropped}


def eval_embedding_accuracy(model: SegmentEncoder, test_pieces: list[Piece],
                            mel_params: MelParams, input_length_s: float = DEFAULT_EVAL_SEGMENT_S,
                            k: int = DEFAULT_K, n_conditions: int = 5,
                            subspace_dim: int = None,
                            max_segments: int = features.DEFAULT_MAX_SEGMENTS) -> EvalReport:
    """Leave-one-out music-ID accuracy of full-mix segments, once per
    condition mask and once for the full embedding."""
    if len(test_pieces) < 2:
        raise EvaluationError("need at least 2 test pieces")
    subspace_dim = subspace_dim or model.config.embed_dim // n_conditions
    store, drops = store_from_pieces(model, test_pieces, mel_params,
                                     input_length_s=input_length_s,
                                     max_segments=max_segments)
    n = len(store)
    if n < 2 or len(set(store.labels.tolist())) < 2:
        raise EvaluationError("test store is degenerate (one row or one music id)")
    k_eff = min(k, n - 1)
    if k_eff < k:
        warnings.warn(f"k clipped from {k} to {k_eff} (store holds {n} rows)")
    masks = {name: condition_mask(c, subspace_dim, n_conditions).numpy().astype(np.float64)
             for c, name in enumerate(CONDITION_NAMES[:n_conditions])}
    masks["full"] = np.ones(n_conditions * subspace_dim)
    accuracy = {}
    for name, mask in masks.items():
        correct = 0
        keep = np.ones(n, dtype=bool)
        for i in range(n):
            keep[i] = False
            ref = EmbeddingStore(X=store.X[keep], labels=store.labels[keep],
                                 meta=[m for j, m in enumerate(store.meta) if keep[j]])
            pred = knn_predict(store.X[i], ref, k=k_eff, mask=mask)
            correct += int(pred == store.labels[i])
            keep[i] = True
        accuracy[name] = correct / n
    return EvalReport(
        kind="knn-music-id",
        accuracy=accuracy,
        counts={"segments": n, "pieces": len(set(store.labels.tolist())), "k": k_eff},
        config={"input_length_s": input_length_s, "mel": mel_params.to_json()},
        exclusions={"dropped_pieces": drops["dropped_pieces"]},
    )


def store_from_corpus(model: SegmentEncoder, corpus: list[CorpusEntry], corpus_dir,
                      mel_params: MelParams, condition: int,
                      segment_length_s: float = DEFAULT_EVAL_SEGMENT_S,
                      overlap: float = features.DEFAULT_OVERLAP,
                      max_segments: int = features.DEFAULT_MAX_SEGMENTS,
                      silence_threshold_db: float = -60.0) -> EmbeddingStore:
    """Embed segments of every condition-`condition` pseudo-mix in a corpus."""
    corpus_dir = Path(corpus_dir)
    bank = features.mel_filterbank(mel_params)
    mels, labels, meta = [], [], []
    for entry in corpus:
        if entry.focus_condition != condition:
            continue
        wave, sr = audioio.read_wav(corpus_dir / entry.path)
        records = features.segment_waveform(
            wave, sr, source_id=entry.mix_id, music_id_label=entry.focus_piece_id,
            length_s=segment_length_s, overlap=overlap, max_segments=max_segments,
            silence_threshold_db=silence_threshold_db)
        for r in records:
            mels.append(features.mel_for_segment(r, mel_params, bank).data)
            labels.append(entry.focus_piece_id)
            meta.append({"source_id": entry.mix_id, "start_s": r.start_s,
                         "length_s": r.length_s,
                         "focus_piece_id": entry.focus_piece_id,
                         "accomp_piece_id": entry.accomp_piece_id})
    if not mels:
        raise EvaluationError(f"corpus has no usable segments for condition {condition}")
    X = _batched_encode(model, mels)
    return EmbeddingStore(X=X, labels=np.asarray(labels), meta=meta)


def eval_subspace(model: SegmentEncoder, corpus: list[CorpusEntry], corpus_dir,
                  condition: int, mel_params: MelParams,
                  segment_length_s: float = DEFAULT_EVAL_SEGMENT_S,
                  k: int = DEFAULT_K, n_conditions: int = 5, subspace_dim: int = None,
                  mask_condition: int = None,
                  silence_threshold_db: float = -60.0) -> EvalReport:
    """Predict each pseudo-mix segment's focus piece with kNN in one subspace,
    excluding every reference segment that shares the query's (focus, donor)
    pair, then report accuracy and the exclusion audit."""
    subspace_dim = subspace_dim or model.config.embed_dim // n_conditions
    store = store_from_corpus(model, corpus, corpus_dir, mel_params, condition,
                              segment_length_s=segment_length_s,
                              silence_threshold_db=silence_threshold_db)
    n = len(store)
    pair = np.array([(m["focus_piece_id"], m["accomp_piece_id"]) for m in store.meta])
    mask_c = condition if mask_condition is None else mask_condition
    mask = condition_mask(mask_c, subspace_dim, n_conditions).numpy().astype(np.float64)
    correct = 0
    violations = 0
    excluded_counts = []
    for i in range(n):
        keep = ~((pair[:, 0] == pair[i, 0]) & (pair[:, 1] == pair[i, 1]))
        excluded_counts.append(int(n - keep.sum()))
        if not keep.any():
            raise EvaluationError(
                f"exclusion rule removed every reference row for mix {store.meta[i]['source_id']}")
        ref = EmbeddingStore(X=store.X[keep], labels=store.labels[keep],
                             meta=[m for j, m in enumerate(store.meta) if keep[j]])
        violations += sum(1 for m in ref.meta
                          if (m["focus_piece_id"], m["accomp_piece_id"]) == tuple(pair[i]))
        k_eff = min(k, len(ref))
        pred = knn_predict(store.X[i], ref, k=k_eff, mask=mask)
        correct += int(pred == pair[i, 0])
    name = CONDITION_NAMES[condition] if condition < len(CONDITION_NAMES) else str(condition)
    return EvalReport(
        kind="subspace-knn",
        accuracy={name: correct / n},
        counts={"segments": n, "k": k,
                "focus_ids": len(set(store.labels.tolist()))},
        config={"condition": condition, "mask_condition": mask_c,
                "segment_length_s": segment_length_s, "mel": mel_params.to_json()},
        exclusions={"violations": violations,
                    "mean_excluded_rows": float(np.mean(excluded_counts))},
    )


def _pca_2d(X: np.ndarray) -> np.ndarray:
    centered = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # deterministic sign: largest-magnitude loading positive
    for row in comps:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1
    return centered @ comps.T


def export_visualization(store: EmbeddingStore, mask: np.ndarray, method: str,
                         out_prefix, seed: int = 0) -> tuple[Path, Path]:
    """Project masked embeddings to 2-D and write coordinates CSV + scatter PNG."""
    if method not in ("pca", "tsne"):
        raise ParameterError(f"method must be pca or tsne, got {method!r}")
    n = len(store)
    if n < 3 or (method == "tsne" and n < 5):
        raise ParameterError(f"{method} projection needs more rows than {n}")
    X = masked_rows(store.X, mask) if mask is not None else store.X
    if method == "pca":
        coords = _pca_2d(X)
    else:
        from sklearn.manifold import TSNE
        perplexity = min(TSNE_PERPLEXITY, (n - 1) / 3.0)
        coords = TSNE(n_components=2, perplexity=perplexity, max_iter=TSNE_ITERS,
                      random_state=seed, init="pca").fit_transform(X)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_prefix.with_suffix(".csv")
    with open(csv_path, "w") as f:
        f.write("source_id,segment_index,start_s,x,y,music_id\n")
        for i, m in enumerate(store.meta):
            f.write(f"{m['source_id']},{i},{m['start_s']},"
                    f"{coords[i, 0]!r},{coords[i, 1]!r},{int(store.labels[i])}\n")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 5))
    ids = sorted(set(store.labels.tolist()))
    cmap = plt.get_cmap("tab20")
    for j, mid in enumerate(ids):
        rows = store.labels == mid
        ax.scatter(coords[rows, 0], coords[rows, 1], s=14,
                   color=cmap(j % 20), label=str(mid))
    ax.set_title(f"{method} projection")
    ax.legend(fontsize=6, ncol=2, title="music id")
    png_path = out_prefix.with_suffix(".png")
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return csv_path, png_path


LISTENING_INSTRUMENTS = (0, 1, 2, 3)  # drums, bass, piano, guitar
LISTENING_CLIP_S = 10.0


def _pick_window(rng, stem: np.ndarray, sr: int, clip_n: int, threshold_db: float,
                 tries: int = 64) -> int:
    hi = len(stem) - clip_n
    if hi < 0:
        return -1
    for _ in range(tries):
        start = int(rng.integers(0, hi + 1))
        if audioio.rms_dbfs(stem[start:start + clip_n]) > threshold_db:
            return start
    return -1


def _pick_disjoint_windows(rng, stem: np.ndarray, clip_n: int, threshold_db: float,
                           tries: int = 64) -> tuple[int, int]:
    """Two non-overlapping non-silent windows; first drawn left of the second,
    then randomly swapped."""
    if len(stem) < 2 * clip_n:
        return -1, -1
    for _ in range(tries):
        first = int(rng.integers(0, len(stem) - 2 * clip_n + 1))
        second = int(rng.integers(first + clip_n, len(stem) - clip_n + 1))
        if (audioio.rms_dbfs(stem[first:first + clip_n]) > threshold_db
                and audioio.rms_dbfs(stem[second:second + clip_n]) > threshold_db):
            return (second, first) if rng.random() < 0.5 else (first, second)
    return -1, -1


def export_listening_sets(test_pieces: list[Piece], model: SegmentEncoder,
                          mel_params: MelParams, out_dir, n_query_pieces: int = 8,
                          seed: int = 0, n_conditions: int = 5,
                          subspace_dim: int = None) -> dict:
    """Write the subjective-study stimulus bundle: per instrument and query
    piece, one {x, a, b} set and one {x, y, c} set of 10-second stem clips,
    plus an answer key derived from masked subspace distances of the
    co-located full-mix windows."""
    if len(test_pieces) < 4:
        raise ExportError("need at least 4 test pieces (query plus three alternatives)")
    subspace_dim = subspace_dim or model.config.embed_dim // n_conditions
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bank = features.mel_filterbank(mel_params)
    sr = test_pieces[0].sample_rate
    clip_n = int(round(LISTENING_CLIP_S * sr))
    pieces = {p.music_id: p for p in test_pieces}
    mixes = {p.music_id: mix_full(p).waveform for p in test_pieces}

    def embed_window(music_id: int, start: int) -> np.ndarray:
        window = mixes[music_id][start:start + clip_n]
        mel = features.mel_for_segment(
            features.SegmentRecord(piece_source_id(music_id), music_id,
                                   start / sr, clip_n / sr, window), mel_params, bank)
        return models.encode(model, mel).astype(np.float64)

    sets = []
    for c in LISTENING_INSTRUMENTS:
        rng = np.random.default_rng([int(seed), int(c)])
        eligible = [p.music_id for p in test_pieces if c in p.present]
        if len(eligible) < 4:
            raise ExportError(f"fewer than 4 pieces have a non-silent {CONDITION_NAMES[c]} stem")
        if len(eligible) < n_query_pieces:
            raise ExportError(f"only {len(eligible)} pieces can serve as "
                              f"{CONDITION_NAMES[c]} queries, need {n_query_pieces}")
        queries = sorted(int(m) for m in rng.choice(eligible, size=n_query_pieces, replace=False))
        mask = condition_mask(c, subspace_dim, n_conditions).numpy().astype(np.float64)
        for x_id in queries:
            threshold = pieces[x_id].silence_threshold_db
            x_start, y_start = _pick_disjoint_windows(rng, pieces[x_id].stems[c],
                                                      clip_n, threshold)
            if x_start < 0 or y_start < 0:
                raise ExportError(
                    f"piece {x_id} lacks two non-silent {CONDITION_NAMES[c]} windows")
            others = [m for m in eligible if m != x_id]
            chosen = [int(m) for m in rng.choice(others, size=3, replace=False)]
            starts = {}
            for m in chosen:
                s = _pick_window(rng, pieces[m].stems[c], sr, clip_n,
                                 pieces[m].silence_threshold_db)
                if s < 0:
                    raise ExportError(
                        f"piece {m} lacks a non-silent {CONDITION_NAMES[c]} window")
                starts[m] = s
            a_id, b_id, c_id = chosen
            clip_plan = {
                1: (("x", x_id, x_start), ("a", a_id, starts[a_id]), ("b", b_id, starts[b_id])),
                2: (("x", x_id, x_start), ("y", x_id, y_start), ("c", c_id, starts[c_id])),
            }
            for set_type, clips in clip_plan.items():
                clip_meta = {}
                for role, mid, start in clips:
                    rel = f"{CONDITION_NAMES[c]}/q{x_id:04d}/set{set_type}_{role}.wav"
                    audioio.write_wav(out_dir / rel,
                                      pieces[mid].stems[c][start:start + clip_n], sr)
                    clip_meta[role] = {"path": rel, "piece": mid, "start_s": start / sr}
                roles = [r for r, _, _ in clips]
                e_x = embed_window(clips[0][1], clips[0][2])
                d_first = float(np.linalg.norm(
                    (e_x - embed_window(clips[1][1], clips[1][2])) * mask))
                d_second = float(np.linalg.norm(
                    (e_x - embed_window(clips[2][1], clips[2][2])) * mask))
                sets.append({
                    "instrument": CONDITION_NAMES[c],
                    "condition": c,
                    "query_piece": x_id,
                    "set_type": set_type,
                    "alternatives": roles[1:],
                    "clips": clip_meta,
                    "distances": {roles[1]: d_first, roles[2]: d_second},
                    "answer": "first" if d_first <= d_second else "second",
                })
    key = {"n_sets": len(sets), "clip_seconds": LISTENING_CLIP_S, "seed": seed, "sets": sets}
    (out_dir / "answer_key.json").write_text(json.dumps(key, indent=2, sort_keys=True) + "\n")
    return key
