"""Command-line entry point: one subcommand per pipeline stage, reproducible
run directories, and a flat dotted-key configuration."""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, features, models, pseudomix, sampling, training
from .dataset import CONDITION_NAMES, DatasetManifest, generate_dataset, ingest_stem_directory
from .errors import ConfigError, StemsimError
from .features import MelParams
from .models import EncoderConfig, build_main_encoder, load_checkpoint, save_checkpoint
from .sampling import CorpusView, ProvenanceResolver
from .training import RunManifest, TrainConfig, file_sha256, triplet_content_hash

RUN_ROOT_ENV = "STEMSIM_RUN_ROOT"

DEFAULTS = {
    "data.pieces": 12,
    "data.pretrain_pieces": 0,
    "data.test_pieces": 0,
    "data.duration_s": 30.0,
    "data.seed": 0,
    "data.sample_rate": 16000,
    "data.silence_db": -60.0,
    "data.train_tempos": "90,120,150",
    "data.test_tempos": "90,120",
    "data.default_tempo": 120.0,
    "pseudomix.tempo_bin_bpm": 10.0,
    "pseudomix.per_focus": 3,
    "pseudomix.split": "train",
    "pseudomix.seed": 0,
    "segment.length_s": 3.0,
    "segment.overlap": 0.5,
    "segment.max_segments": 40,
    "mel.n_fft": 1024,
    "mel.hop": 256,
    "mel.n_mels": 64,
    "mel.fmin": 0.0,
    "mel.fmax": 8000.0,
    "mel.log_floor": 1e-6,
    "model.conv_channels": "16,32,64,128",
    "model.fc_hidden": 256,
    "model.kernel": 3,
    "model.stride": 2,
    "model.n_conditions": 5,
    "model.subspace_dim": 16,
    "train.margin": 0.2,
    "train.lambda": 0.1,
    "train.batch_size": 64,
    "train.epochs": 50,
    "train.lr": 1e-3,
    "train.optimizer": "adam",
    "train.seed": 0,
    "train.n_triplets": 2000,
    "train.interchange_ratio": 1.0,
    "pretrain.epochs": 20,
    "pretrain.batches_per_epoch": 4,
    "pretrain.main_epochs": 20,
    "eval.k": 5,
    "eval.input_length_s": 10.0,
    "viz.method": "pca",
    "viz.seed": 0,
    "listening.queries": 8,
    "listening.seed": 0,
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_value(key: str, raw) -> object:
    default = DEFAULTS[key]
    if isinstance(raw, str):
        try:
            if isinstance(default, bool):
                return raw.lower() in ("1", "true", "yes")
            return type(default)(raw)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {key}={raw!r} as {type(default).__name__}") from exc
    if not isinstance(raw, type(default)) and not (isinstance(default, float) and isinstance(raw, int)):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {type(raw).__name__}")
    return type(default)(raw)


class Config:
    """Flat dotted-key configuration: defaults < config file < flag overrides."""

    def __init__(self):
        self.values = dict(DEFAULTS)

    def load_file(self, path) -> None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        self.apply(raw)

    def apply(self, mapping: dict) -> None:
        for key, value in mapping.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {key!r}")
            self.values[key] = _parse_value(key, value)

    def apply_sets(self, pairs: list[str]) -> None:
        mapping = {}
        for pair in pairs or []:
            if "=" not in pair:
                raise ConfigError(f"--set expects key=value, got {pair!r}")
            key, value = pair.split("=", 1)
            mapping[key.strip()] = value.strip()
        self.apply(mapping)

    def __getitem__(self, key: str):
        return self.values[key]

    def tempos(self, key: str) -> tuple:
        return tuple(float(t) for t in str(self.values[key]).split(",") if t.strip())

    def channels(self) -> tuple:
        return tuple(int(t) for t in str(self.values["model.conv_channels"]).split(",") if t.strip())

    def mel_params(self) -> MelParams:
        return MelParams(
            sample_rate=self["data.sample_rate"], n_fft=self["mel.n_fft"],
            hop=self["mel.hop"], n_mels=self["mel.n_mels"], fmin=self["mel.fmin"],
            fmax=self["mel.fmax"], log_floor=self["mel.log_floor"])

    def encoder_config(self, embed_dim: int) -> EncoderConfig:
        return EncoderConfig(
            n_mels=self["mel.n_mels"], conv_channels=self.channels(),
            kernel=self["model.kernel"], stride=self["model.stride"],
            fc_hidden=self["model.fc_hidden"], embed_dim=embed_dim)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            margin=self["train.margin"], aux_weight=self["train.lambda"],
            batch_size=self["train.batch_size"], epochs=self["train.epochs"],
            learning_rate=self["train.lr"], optimizer=self["train.optimizer"],
            seed=self["train.seed"], n_triplets=self["train.n_triplets"],
            interchange_ratio=self["train.interchange_ratio"],
            n_pretrain_pieces=self["data.pretrain_pieces"],
            n_train_pieces=self["data.pieces"],
            pretrain_epochs=self["pretrain.epochs"],
            pretrain_batches_per_epoch=self["pretrain.batches_per_epoch"],
            pretrain_main_epochs=self["pretrain.main_epochs"])

    def echo(self) -> dict:
        return dict(sorted(self.values.items()))


def _default_run_dir(cfg: Config, command: str) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    return root / f"{stamp}-{command}-seed{cfg['train.seed']}"


def _prepare_run_dir(run_dir: Path, force: bool) -> Path:
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise StemsimError(
                f"run directory {run_dir} already has outputs; pass --force to overwrite")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _checkpoint_extra(cfg: Config) -> dict:
    return {
        "mel": cfg.mel_params().to_json(),
        "n_conditions": cfg["model.n_conditions"],
        "subspace_dim": cfg["model.subspace_dim"],
        "segment": {"length_s": cfg["segment.length_s"], "overlap": cfg["segment.overlap"],
                    "max_segments": cfg["segment.max_segments"]},
    }


def _meta_mel(meta: dict) -> MelParams:
    return MelParams.from_json(meta["extra"]["mel"])


def _output(path: Path) -> dict:
    return {"path": str(path), "sha256": file_sha256(path)}


def _split_pieces(manifest: DatasetManifest, split: str):
    pieces = manifest.load_split(split)
    if not pieces and split == "pretrain":
        # desk-scale datasets may reuse the train split for pretraining
        pieces = manifest.load_split("train")
    if not pieces:
        raise StemsimError(f"dataset has no pieces in split {split!r}")
    return pieces


def cmd_gen_data(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = generate_dataset(
        run_dir / "dataset",
        n_train=cfg["data.pieces"], n_test=cfg["data.test_pieces"],
        n_pretrain=cfg["data.pretrain_pieces"], duration_s=cfg["data.duration_s"],
        seed=cfg["data.seed"], sample_rate=cfg["data.sample_rate"],
        silence_threshold_db=cfg["data.silence_db"],
        train_tempos=cfg.tempos("data.train_tempos"),
        test_tempos=cfg.tempos("data.test_tempos"))
    path = run_dir / "dataset" / "manifest.json"
    print(f"wrote {len(manifest.pieces)} pieces to {path}")
    return RunManifest(command="gen-data", config=cfg.echo(),
                       outputs={"dataset_manifest": _output(path)})


def cmd_ingest(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = ingest_stem_directory(
        args.root, sample_rate_hz=cfg["data.sample_rate"],
        silence_threshold_db=cfg["data.silence_db"],
        default_tempo_bpm=cfg["data.default_tempo"])
    path = Path(args.root) / "manifest.json"
    print(f"ingested {len(manifest.pieces)} pieces; manifest at {path}")
    return RunManifest(command="ingest", config=cfg.echo(),
                       inputs={"root": str(args.root)},
                       outputs={"dataset_manifest": _output(path)})


def cmd_make_pseudomix(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = DatasetManifest.load(args.dataset)
    split = args.split or cfg["pseudomix.split"]
    grouping = pseudomix.tempo_group(manifest, cfg["pseudomix.tempo_bin_bpm"], split=split)
    corpus = pseudomix.build_pseudomix_corpus(
        manifest, grouping, per_focus_count=cfg["pseudomix.per_focus"],
        seed=cfg["pseudomix.seed"], out_dir=run_dir, split=split)
    index = run_dir / "corpus_index.json"
    print(f"wrote {len(corpus)} pseudo-mixes to {run_dir}")
    return RunManifest(command="make-pseudomix", config=cfg.echo(),
                       inputs={"dataset_manifest": file_sha256(args.dataset)},
                       outputs={"corpus_index": _output(index)})


def cmd_pretrain_individual(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = DatasetManifest.load(args.dataset)
    pieces = _split_pieces(manifest, "pretrain")
    tc = cfg.train_config()
    mel = cfg.mel_params()
    enc = cfg.encoder_config(cfg["model.subspace_dim"])
    outputs = {}
    history_all = {}
    for c in range(cfg["model.n_conditions"]):
        model, history = training.pretrain_individual(
            pieces, c, enc, tc, mel,
            segment_s=cfg["segment.length_s"], overlap=cfg["segment.overlap"],
            max_segments=cfg["segment.max_segments"])
        path = run_dir / f"g{c}.ckpt"
        save_checkpoint(path, model, seed=tc.seed, step=len(history), extra=_checkpoint_extra(cfg))
        outputs[f"g{c}"] = _output(path)
        history_all[str(c)] = [h.to_json() for h in history]
        print(f"pretrained g_{c} ({CONDITION_NAMES[c]}): final loss {history[-1].total:.4f}")
    return RunManifest(command="pretrain-individual", config=cfg.echo(),
                       inputs={"dataset_manifest": file_sha256(args.dataset)},
                       outputs=outputs, history=[history_all])


def _load_instrument_models(g_dir: Path, n_conditions: int) -> dict:
    g_models = {}
    for c in range(n_conditions):
        path = Path(g_dir) / f"g{c}.ckpt"
        if not path.exists():
            raise StemsimError(f"missing instrument checkpoint {path}")
        g_models[c], _ = load_checkpoint(path)
    return g_models


def cmd_pretrain_main(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = DatasetManifest.load(args.dataset)
    pieces = _split_pieces(manifest, "pretrain")
    n_cond = cfg["model.n_conditions"]
    g_models = _load_instrument_models(args.g_dir, n_cond)
    tc = cfg.train_config()
    embed_dim = n_cond * cfg["model.subspace_dim"]
    model, history = training.pretrain_main(
        pieces, g_models, cfg.encoder_config(embed_dim), tc, cfg.mel_params(),
        n_conditions=n_cond, subspace_dim=cfg["model.subspace_dim"],
        segment_s=cfg["segment.length_s"], overlap=cfg["segment.overlap"],
        max_segments=cfg["segment.max_segments"])
    path = run_dir / "f_init.ckpt"
    save_checkpoint(path, model, seed=tc.seed, step=len(history), extra=_checkpoint_extra(cfg))
    print(f"pretrained main encoder: final aux loss {history[-1].l_aux:.4f}")
    return RunManifest(command="pretrain-main", config=cfg.echo(),
                       inputs={"dataset_manifest": file_sha256(args.dataset),
                               "g_dir": str(args.g_dir)},
                       outputs={"f_init": _output(path)},
                       history=[h.to_json() for h in history])


def _corpus_view(args, cfg: Config, manifest: DatasetManifest, with_mels: bool) -> tuple:
    corpus_dir = Path(args.corpus)
    index = corpus_dir / "corpus_index.json" if corpus_dir.is_dir() else corpus_dir
    corpus_dir = index.parent
    corpus = pseudomix.load_corpus(index, manifest)
    view = CorpusView.build(
        corpus, corpus_dir, manifest, mel_params=cfg.mel_params(),
        segment_s=cfg["segment.length_s"], overlap=cfg["segment.overlap"],
        max_segments=cfg["segment.max_segments"], with_mels=with_mels)
    return corpus, corpus_dir, index, view


def cmd_build_triplets(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = DatasetManifest.load(args.dataset)
    _, _, index, view = _corpus_view(args, cfg, manifest, with_mels=False)
    specs = sampling.build_triplet_set(
        view, cfg["train.n_triplets"], interchange_ratio=cfg["train.interchange_ratio"],
        seed=cfg["train.seed"], n_conditions=cfg["model.n_conditions"],
        out_path=run_dir / "triplets.jsonl")
    path = run_dir / "triplets.jsonl"
    kinds = {k: sum(1 for s in specs if s.kind == k) for k in ("basic", "interchanged")}
    print(f"wrote {len(specs)} triplets ({kinds['basic']} basic, "
          f"{kinds['interchanged']} interchanged) to {path}")
    return RunManifest(command="build-triplets", config=cfg.echo(),
                       inputs={"dataset_manifest": file_sha256(args.dataset),
                               "corpus_index": file_sha256(index)},
                       outputs={"triplets": _output(path)})


def cmd_train(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = DatasetManifest.load(args.dataset)
    corpus, _, index, view = _corpus_view(args, cfg, manifest, with_mels=True)
    specs = sampling.load_triplets(args.triplets)
    tc = cfg.train_config()
    n_cond = cfg["model.n_conditions"]
    sub_dim = cfg["model.subspace_dim"]
    embed_dim = n_cond * sub_dim

    if args.f_init:
        model, _ = load_checkpoint(args.f_init)
    else:
        model = build_main_encoder(cfg.encoder_config(embed_dim),
                                   seed=training._torch_seed(tc.seed, 23))
    anchor_targets = None
    if tc.aux_weight > 0:
        if not args.g_dir:
            raise StemsimError("train with train.lambda > 0 requires --g-dir")
        g_models = _load_instrument_models(args.g_dir, n_cond)
        resolver = ProvenanceResolver(manifest, corpus)
        anchor_targets = training.compute_anchor_targets(
            specs, resolver, g_models, n_cond, sub_dim, cfg.mel_params())
    model, history = training.train_main(
        view, specs, model, tc, n_conditions=n_cond, subspace_dim=sub_dim,
        anchor_targets=anchor_targets)
    path = run_dir / "f_final.ckpt"
    save_checkpoint(path, model, seed=tc.seed, step=tc.epochs, extra=_checkpoint_extra(cfg))
    print(f"trained main encoder: final total loss {history[-1].total:.4f}")
    return RunManifest(command="train", config=cfg.echo(),
                       inputs={"dataset_manifest": file_sha256(args.dataset),
                               "corpus_index": file_sha256(index),
                               "triplets_content": triplet_content_hash(args.triplets),
                               "f_init": file_sha256(args.f_init) if args.f_init else ""},
                       outputs={"f_final": _output(path)},
                       history=[h.to_json() for h in history])


def cmd_eval_knn(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = DatasetManifest.load(args.dataset)
    model, meta = load_checkpoint(args.checkpoint)
    pieces = _split_pieces(manifest, "test")
    report = evaluation.eval_embedding_accuracy(
        model, pieces, _meta_mel(meta),
        input_length_s=cfg["eval.input_length_s"], k=cfg["eval.k"],
        n_conditions=meta["extra"]["n_conditions"],
        subspace_dim=meta["extra"]["subspace_dim"])
    path = run_dir / "knn_report.json"
    report.save(path)
    print(report.to_text(), end="")
    return RunManifest(command="eval-knn", config=cfg.echo(),
                       inputs={"dataset_manifest": file_sha256(args.dataset),
                               "checkpoint": file_sha256(args.checkpoint)},
                       outputs={"report": _output(path)})


def cmd_eval_subspace(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = DatasetManifest.load(args.dataset)
    model, meta = load_checkpoint(args.checkpoint)
    corpus_dir = Path(args.corpus)
    index = corpus_dir / "corpus_index.json" if corpus_dir.is_dir() else corpus_dir
    corpus = pseudomix.load_corpus(index, manifest)
    n_cond = meta["extra"]["n_conditions"]
    conditions = range(n_cond) if args.condition == "all" else [int(args.condition)]
    outputs = {}
    accuracy = {}
    for c in conditions:
        report = evaluation.eval_subspace(
            model, corpus, index.parent, c, _meta_mel(meta),
            segment_length_s=cfg["eval.input_length_s"], k=cfg["eval.k"],
            n_conditions=n_cond, subspace_dim=meta["extra"]["subspace_dim"],
            silence_threshold_db=manifest.silence_threshold_db)
        path = run_dir / f"subspace_{CONDITION_NAMES[c]}.json"
        report.save(path)
        outputs[f"report_{CONDITION_NAMES[c]}"] = _output(path)
        accuracy.update(report.accuracy)
        print(report.to_text(), end="")
    return RunManifest(command="eval-subspace", config=cfg.echo(),
                       inputs={"dataset_manifest": file_sha256(args.dataset),
                               "corpus_index": file_sha256(index),
                               "checkpoint": file_sha256(args.checkpoint)},
                       outputs=outputs, history=[accuracy])


def cmd_export_viz(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = DatasetManifest.load(args.dataset)
    model, meta = load_checkpoint(args.checkpoint)
    n_cond = meta["extra"]["n_conditions"]
    sub_dim = meta["extra"]["subspace_dim"]
    if args.corpus:
        corpus_dir = Path(args.corpus)
        index = corpus_dir / "corpus_index.json" if corpus_dir.is_dir() else corpus_dir
        corpus = pseudomix.load_corpus(index, manifest)
        store = evaluation.store_from_corpus(
            model, corpus, index.parent, _meta_mel(meta), int(args.condition),
            segment_length_s=cfg["eval.input_length_s"],
            silence_threshold_db=manifest.silence_threshold_db)
    else:
        store, _ = evaluation.store_from_pieces(
            model, _split_pieces(manifest, "test"), _meta_mel(meta),
            input_length_s=cfg["eval.input_length_s"])
    if args.condition == "full":
        mask = np.ones(n_cond * sub_dim)
    else:
        from .objective import condition_mask
        mask = condition_mask(int(args.condition), sub_dim, n_cond).numpy().astype(np.float64)
    csv_path, png_path = evaluation.export_visualization(
        store, mask, cfg["viz.method"], run_dir / "projection", seed=cfg["viz.seed"])
    print(f"wrote {csv_path} and {png_path}")
    return RunManifest(command="export-viz", config=cfg.echo(),
                       inputs={"checkpoint": file_sha256(args.checkpoint)},
                       outputs={"coordinates": _output(csv_path), "plot": _output(png_path)})


def cmd_export_listening(args, cfg: Config, run_dir: Path) -> RunManifest:
    manifest = DatasetManifest.load(args.dataset)
    model, meta = load_checkpoint(args.checkpoint)
    pieces = _split_pieces(manifest, "test")
    key = evaluation.export_listening_sets(
        pieces, model, _meta_mel(meta), run_dir,
        n_query_pieces=cfg["listening.queries"], seed=cfg["listening.seed"],
        n_conditions=meta["extra"]["n_conditions"],
        subspace_dim=meta["extra"]["subspace_dim"])
    path = run_dir / "answer_key.json"
    print(f"exported {key['n_sets']} listening sets to {run_dir}")
    return RunManifest(command="export-listening", config=cfg.echo(),
                       inputs={"dataset_manifest": file_sha256(args.dataset),
                               "checkpoint": file_sha256(args.checkpoint)},
                       outputs={"answer_key": _output(path)})


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "ingest": cmd_ingest,
    "make-pseudomix": cmd_make_pseudomix,
    "pretrain-individual": cmd_pretrain_individual,
    "pretrain-main": cmd_pretrain_main,
    "build-triplets": cmd_build_triplets,
    "train": cmd_train,
    "eval-knn": cmd_eval_knn,
    "eval-subspace": cmd_eval_subspace,
    "export-viz": cmd_export_viz,
    "export-listening": cmd_export_listening,
}


def _build_parser() -> Parser:
    parser = Parser(prog="stemsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: Parser, flags: dict = None) -> None:
        p.add_argument("--config", help="JSON config with flat dotted keys")
        p.add_argument("--set", action="append", dest="sets", metavar="KEY=VALUE",
                       help="override one config key")
        p.add_argument("--run-dir", help="output directory (default: run root + timestamp)")
        p.add_argument("--force", action="store_true",
                       help="overwrite an existing non-empty run directory")
        for flag, key in (flags or {}).items():
            p.add_argument(flag, dest=f"cfg:{key}", metavar=key.upper().replace(".", "_"))

    p = sub.add_parser("gen-data", help="synthesize a toy multi-stem dataset")
    common(p, {"--pieces": "data.pieces", "--test-pieces": "data.test_pieces",
               "--pretrain-pieces": "data.pretrain_pieces", "--duration": "data.duration_s",
               "--seed": "data.seed"})

    p = sub.add_parser("ingest", help="build a manifest from a stem directory")
    p.add_argument("--root", required=True)
    common(p)

    p = sub.add_parser("make-pseudomix", help="build a pseudo-mix corpus")
    p.add_argument("--dataset", required=True, help="dataset manifest path")
    p.add_argument("--split", default=None)
    common(p, {"--per-focus": "pseudomix.per_focus", "--seed": "pseudomix.seed"})

    p = sub.add_parser("pretrain-individual", help="pretrain per-instrument encoders")
    p.add_argument("--dataset", required=True)
    common(p, {"--seed": "train.seed"})

    p = sub.add_parser("pretrain-main", help="pretrain the main encoder on the auxiliary loss")
    p.add_argument("--dataset", required=True)
    p.add_argument("--g-dir", required=True, help="directory holding g0..g4 checkpoints")
    common(p, {"--seed": "train.seed"})

    p = sub.add_parser("build-triplets", help="sample and persist the triplet list")
    p.add_argument("--dataset", required=True)
    p.add_argument("--corpus", required=True, help="corpus directory or index path")
    common(p, {"--n": "train.n_triplets", "--interchange-ratio": "train.interchange_ratio",
               "--seed": "train.seed"})

    p = sub.add_parser("train", help="main training on masked triplets")
    p.add_argument("--dataset", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--g-dir", default=None)
    p.add_argument("--f-init", default=None)
    common(p, {"--epochs": "train.epochs", "--seed": "train.seed",
               "--lambda": "train.lambda"})

    p = sub.add_parser("eval-knn", help="leave-one-out music-ID accuracy per subspace")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    common(p, {"--k": "eval.k", "--input-length": "eval.input_length_s"})

    p = sub.add_parser("eval-subspace", help="pseudo-mix subspace evaluation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", default="all")
    common(p, {"--k": "eval.k"})

    p = sub.add_parser("export-viz", help="2-D projection of an embedding store")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--condition", default="full")
    common(p, {"--method": "viz.method", "--seed": "viz.seed"})

    p = sub.add_parser("export-listening", help="export the listening stimulus bundle")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    common(p, {"--queries": "listening.queries", "--seed": "listening.seed"})

    return parser


def run(argv=None) -> int:
    """Execute one subcommand; 0 on success, 1 on usage error, 2 on failure."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = Config()
        if args.config:
            cfg.load_file(args.config)
        overrides = {key.split(":", 1)[1]: value
                     for key, value in vars(args).items()
                     if key.startswith("cfg:") and value is not None}
        cfg.apply(overrides)
        cfg.apply_sets(args.sets)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1

    run_dir = Path(args.run_dir) if args.run_dir else _default_run_dir(cfg, args.command)
    try:
        _prepare_run_dir(run_dir, args.force)
    except StemsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        print(f"error: {lock} exists; another writer owns this run directory", file=sys.stderr)
        return 2

    try:
        manifest = _HANDLERS[args.command](args, cfg, run_dir)
        manifest.save(run_dir / "run_manifest.json")
        return 0
    except (StemsimError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        shutil.rmtree(run_dir, ignore_errors=True)  # drop partial outputs
        return 2
    finally:
        lock.unlink(missing_ok=True)


def main() -> None:
    raise SystemExit(run())
