"""Three-stage optimization: per-instrument pretraining, auxiliary-only
pretraining of the main encoder, and main training on masked triplets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import features, objective, sampling
from .errors import DatasetError, DependencyError, TrainingDivergedError
from .features import MelParams
from .models import (EncoderConfig, InstrumentEncoder, SegmentEncoder,
                     build_instrument_encoder, build_main_encoder)
from .objective import LossBreakdown, combined_loss
from .sampling import (CorpusView, ProvenanceResolver, SegmentRef, TripletSpec,
                       piece_segments, piece_source_id)


@dataclass
class TrainConfig:
    margin: float = 0.2
    aux_weight: float = 0.1
    batch_size: int = 64
    epochs: int = 50
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    n_triplets: int = 2000
    interchange_ratio: float = 1.0
    n_pretrain_pieces: int = 12
    n_train_pieces: int = 24
    pretrain_epochs: int = 20
    pretrain_batches_per_epoch: int = 4
    pretrain_main_epochs: int = 20

    def __post_init__(self):
        for name in ("margin", "aux_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "epochs", "learning_rate", "n_triplets"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _torch_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def triplet_content_hash(path) -> str:
    """Order-independent hash of a triplet list file (one JSON object per line)."""
    lines = sorted(l for l in Path(path).read_text().splitlines() if l.strip())
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def _stem_mels(piece, condition: int, mel_params: MelParams, bank, segment_s, overlap,
               max_segments) -> np.ndarray:
    records = features.segment_waveform(
        piece.stems[condition], piece.sample_rate,
        source_id=f"{piece_source_id(piece.music_id)}:stem{condition}",
        music_id_label=piece.music_id, length_s=segment_s, overlap=overlap,
        max_segments=max_segments, silence_threshold_db=piece.silence_threshold_db)
    if not records:
        return np.zeros((0, mel_params.n_mels, 0), dtype=np.float32)
    return np.stack([features.mel_for_segment(r, mel_params, bank).data.astype(np.float32)
                     for r in records])


def pretrain_individual(
    pieces: list,
    condition: int,
    enc_config: EncoderConfig,
    cfg: TrainConfig,
    mel_params: MelParams,
    segment_s: float = features.DEFAULT_SEGMENT_S,
    overlap: float = features.DEFAULT_OVERLAP,
    max_segments: int = features.DEFAULT_MAX_SEGMENTS,
) -> tuple[InstrumentEncoder, list[LossBreakdown]]:
    """Train g_c with track-based triplets on single-stem segments: positives
    come from the same piece's stem, negatives from another piece's stem."""
    bank = features.mel_filterbank(mel_params)
    stem_sets = []
    for piece in pieces:
        if condition not in piece.present:
            continue
        mels = _stem_mels(piece, condition, mel_params, bank, segment_s, overlap, max_segments)
        if len(mels):
            stem_sets.append(mels)
    if len(stem_sets) < 2:
        raise DatasetError(
            f"need at least 2 pieces with non-silent stem {condition}, found {len(stem_sets)}")
    anchorable = [i for i, m in enumerate(stem_sets) if len(m) >= 2]
    if not anchorable:
        raise DatasetError(f"no piece has two segments of stem {condition}")

    torch.manual_seed(_torch_seed(cfg.seed, 11, condition))
    model = InstrumentEncoder(enc_config, condition)
    opt = _make_optimizer(model, cfg)
    history = []
    model.train()
    for epoch in range(cfg.pretrain_epochs):
        rng = np.random.default_rng([int(cfg.seed), 11, int(condition), epoch])
        epoch_sum, epoch_n = 0.0, 0
        for _ in range(cfg.pretrain_batches_per_epoch):
            a_list, p_list, n_list = [], [], []
            for _ in range(cfg.batch_size):
                pa = anchorable[int(rng.integers(len(anchorable)))]
                i, j = rng.choice(len(stem_sets[pa]), size=2, replace=False)
                pn = int(rng.integers(len(stem_sets) - 1))
                if pn >= pa:
                    pn += 1
                k = int(rng.integers(len(stem_sets[pn])))
                a_list.append(stem_sets[pa][int(i)])
                p_list.append(stem_sets[pa][int(j)])
                n_list.append(stem_sets[pn][k])
            x = torch.from_numpy(np.stack(a_list + p_list + n_list))[:, None]
            e = model(x)
            e_a, e_p, e_n = e.chunk(3)
            loss = objective.plain_triplet_loss(e_a, e_p, e_n, cfg.margin).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_sum += float(loss.item()) * cfg.batch_size
            epoch_n += cfg.batch_size
        l_t = epoch_sum / epoch_n
        history.append(combined_loss(l_t, 0.0, cfg.aux_weight))
    model.eval()
    return model, history


def batched_anchor_targets(refs: list[SegmentRef], resolver: ProvenanceResolver,
                           g_models: dict, n_conditions: int, subspace_dim: int,
                           mel_params: MelParams) -> tuple[np.ndarray, np.ndarray]:
    """Targets for many refs at once, instrument encodes batched per condition.

    Returns (targets (N, E) float64, flags (N,) bool); rows with zero-norm
    concatenations are flagged and left as zero vectors.
    """
    from .models import encode_batch

    bank = features.mel_filterbank(mel_params)
    blocks = np.zeros((len(refs), n_conditions, subspace_dim))
    per_cond: dict[int, tuple[list, list]] = {c: ([], []) for c in range(n_conditions)}
    for i, ref in enumerate(refs):
        for c, window in resolver.stem_windows(ref, mel_params.sample_rate).items():
            rows, mels = per_cond[c]
            rows.append(i)
            mels.append(features.mel_spectrogram(window, mel_params, bank=bank))
    for c, (rows, mels) in per_cond.items():
        if not rows:
            continue
        normalized = [features.normalize(m).data.astype(np.float32) for m in mels]
        for start in range(0, len(rows), 256):
            out = encode_batch(g_models[c], normalized[start:start + 256])
            blocks[rows[start:start + 256], c] = out
    y = blocks.reshape(len(refs), n_conditions * subspace_dim)
    norms = np.linalg.norm(y, axis=1)
    flags = norms == 0.0
    y[~flags] /= norms[~flags, None]
    return y, flags


def _piece_target_sources(pieces, g_models, n_conditions, subspace_dim, mel_params,
                          segment_s, overlap, max_segments):
    """Mel inputs + auxiliary targets for every full-mix segment of `pieces`."""
    bank = features.mel_filterbank(mel_params)
    resolver = ProvenanceResolver.from_pieces(pieces)
    inputs, refs = [], []
    for piece in pieces:
        records = piece_segments(piece, segment_s, overlap, max_segments)
        for i, rec in enumerate(records):
            inputs.append(features.mel_for_segment(rec, mel_params, bank).data.astype(np.float32))
            refs.append(SegmentRef(piece_source_id(piece.music_id), i, rec.start_s, rec.length_s))
    if not inputs:
        raise DatasetError("no usable full-mix segments in the pretraining split")
    targets, flags = batched_anchor_targets(refs, resolver, g_models, n_conditions,
                                            subspace_dim, mel_params)
    return np.stack(inputs), targets.astype(np.float32), flags


def pretrain_main(
    pieces: list,
    g_models: dict,
    enc_config: EncoderConfig,
    cfg: TrainConfig,
    mel_params: MelParams,
    n_conditions: int = 5,
    subspace_dim: int = None,
    segment_s: float = features.DEFAULT_SEGMENT_S,
    overlap: float = features.DEFAULT_OVERLAP,
    max_segments: int = features.DEFAULT_MAX_SEGMENTS,
) -> tuple[SegmentEncoder, list[LossBreakdown]]:
    """Pretrain the main encoder on the auxiliary loss alone: match each
    full-mix segment's embedding to its concatenated instrument target."""
    if sorted(g_models) != list(range(n_conditions)):
        raise DependencyError(f"need instrument encoders for all {n_conditions} conditions, "
                              f"got {sorted(g_models)}")
    subspace_dim = subspace_dim or enc_config.embed_dim // n_conditions
    inputs, targets, flags = _piece_target_sources(
        pieces, g_models, n_conditions, subspace_dim, mel_params,
        segment_s, overlap, max_segments)

    torch.manual_seed(_torch_seed(cfg.seed, 23))
    model = build_main_encoder(enc_config)
    opt = _make_optimizer(model, cfg)
    targets_t = torch.from_numpy(targets)
    usable = np.flatnonzero(~flags)
    if len(usable) == 0:
        raise DatasetError("every pretraining segment has a zero-norm target")
    history = []
    model.train()
    for epoch in range(cfg.pretrain_main_epochs):
        rng = np.random.default_rng([int(cfg.seed), 23, epoch])
        order = usable[rng.permutation(len(usable))]
        epoch_sum, epoch_n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = torch.from_numpy(inputs[idx])[:, None]
            e = model(x)
            loss = objective.auxiliary_loss(e, targets_t[idx]).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_sum += float(loss.item()) * len(idx)
            epoch_n += len(idx)
        l_aux = epoch_sum / epoch_n
        # pure auxiliary stage: the triplet term plays no role here
        history.append(LossBreakdown(l_triplet=0.0, l_aux=l_aux, aux_weight=1.0, total=l_aux))
    model.eval()
    return model, history


def mean_aux_loss(model: SegmentEncoder, inputs: np.ndarray, targets: np.ndarray,
                  flags: np.ndarray) -> float:
    """Mean auxiliary loss of frozen parameters over precomputed targets."""
    usable = np.flatnonzero(~flags)
    model.eval()
    with torch.no_grad():
        e = model(torch.from_numpy(inputs[usable])[:, None])
        return float(objective.auxiliary_loss(e, torch.from_numpy(targets[usable])).mean().item())


def compute_anchor_targets(specs: list[TripletSpec], resolver: ProvenanceResolver,
                           g_models: dict, n_conditions: int, subspace_dim: int,
                           mel_params: MelParams) -> dict[SegmentRef, tuple[np.ndarray, bool]]:
    refs = sorted(set(spec.anchor for spec in specs),
                  key=lambda r: (r.source_id, r.index))
    targets, flags = batched_anchor_targets(refs, resolver, g_models, n_conditions,
                                            subspace_dim, mel_params)
    return {ref: (targets[i], bool(flags[i])) for i, ref in enumerate(refs)}


def train_main(
    view: CorpusView,
    specs: list[TripletSpec],
    model: SegmentEncoder,
    cfg: TrainConfig,
    n_conditions: int = 5,
    subspace_dim: int = None,
    anchor_targets: dict = None,
) -> tuple[SegmentEncoder, list[LossBreakdown]]:
    """Main stage: per batch, mean masked triplet loss over the triplets plus
    the weighted mean auxiliary loss over the batch's anchors.

    `anchor_targets` maps anchor refs to (target, flagged); required when
    cfg.aux_weight > 0. Triplet order is canonicalized before the seeded
    per-epoch shuffle, so the persisted file's line order does not matter.
    """
    subspace_dim = subspace_dim or model.config.embed_dim // n_conditions
    if cfg.aux_weight > 0 and anchor_targets is None:
        raise DependencyError("aux_weight > 0 requires precomputed anchor targets")
    specs = sorted(specs, key=lambda s: s.canonical())
    masks = np.stack([
        objective.condition_mask(c, subspace_dim, n_conditions).numpy()
        for c in range(n_conditions)
    ])
    target_arr = flag_arr = None
    if cfg.aux_weight > 0:
        target_arr = {ref: t.astype(np.float32) for ref, (t, _) in anchor_targets.items()}
        flag_arr = {ref: f for ref, (_, f) in anchor_targets.items()}

    opt = _make_optimizer(model, cfg)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([int(cfg.seed), 37, epoch])
        order = rng.permutation(len(specs))
        lt_sum = la_sum = 0.0
        lt_n = la_n = 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [specs[i] for i in order[start:start + cfg.batch_size]]
            a = np.stack([view.mel(s.anchor) for s in batch])
            p = np.stack([view.mel(s.positive) for s in batch])
            n = np.stack([view.mel(s.negative) for s in batch])
            conds = np.array([s.condition for s in batch])
            x = torch.from_numpy(np.concatenate([a, p, n]))[:, None]
            e = model(x)
            e_a, e_p, e_n = e.chunk(3)
            mask_t = torch.from_numpy(masks[conds].astype(np.float32))
            l_t = objective.masked_triplet_loss(e_a, e_p, e_n, mask_t, cfg.margin).mean()
            total = l_t
            l_a_val = 0.0
            if cfg.aux_weight > 0:
                keep = [i for i, s in enumerate(batch) if not flag_arr[s.anchor]]
                if keep:
                    t = torch.from_numpy(np.stack([target_arr[batch[i].anchor] for i in keep]))
                    l_a = objective.auxiliary_loss(e_a[keep], t).mean()
                    total = l_t + cfg.aux_weight * l_a
                    l_a_val = float(l_a.item())
                    la_sum += l_a_val * len(keep)
                    la_n += len(keep)
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}",
                    epoch=epoch, step=step,
                    triplet_ids=[s.anchor.source_id for s in batch])
            opt.zero_grad()
            total.backward()
            opt.step()
            lt_sum += float(l_t.item()) * len(batch)
            lt_n += len(batch)
        l_t_epoch = lt_sum / lt_n
        l_a_epoch = (la_sum / la_n) if la_n else 0.0
        history.append(combined_loss(l_t_epoch, l_a_epoch, cfg.aux_weight))
    model.eval()
    return model, history


@dataclass
class RunManifest:
    """Reproducibility record for one training run; deliberately contains no
    wall-clock fields so repeated runs hash identically."""

    command: str
    config: dict
    inputs: dict = field(default_factory=dict)   # name -> hash
    outputs: dict = field(default_factory=dict)  # name -> {"path":..., "sha256":...}
    history: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"command": self.command, "config": self.config, "inputs": self.inputs,
                "outputs": self.outputs, "history": self.history}

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        raw = json.loads(Path(path).read_text())
        return cls(command=raw["command"], config=raw["config"], inputs=raw["inputs"],
                   outputs=raw["outputs"], history=raw["history"])
