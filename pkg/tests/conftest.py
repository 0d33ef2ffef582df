import numpy as np
import pytest

from stemsim import dataset, features, models, pseudomix, sampling

TOY_MEL = features.MelParams(hop=512)
TOY_ENC_G = dict(conv_channels=(4, 8, 16, 16), fc_hidden=32, embed_dim=8)
TOY_ENC_F = dict(conv_channels=(4, 8, 16, 16), fc_hidden=32, embed_dim=40)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    """6 train + 4 test pieces, one tempo group each, 24 s long."""
    root = tmp_path_factory.mktemp("toyds")
    return dataset.generate_dataset(
        root, n_train=6, n_test=4, duration_s=24.0, seed=3,
        train_tempos=(120.0,), test_tempos=(120.0,))


@pytest.fixture(scope="session")
def toy_pieces(toy_manifest):
    return toy_manifest.load_split("train")


@pytest.fixture(scope="session")
def toy_test_pieces(toy_manifest):
    return toy_manifest.load_split("test")


@pytest.fixture(scope="session")
def toy_corpus(toy_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("toypm")
    grouping = pseudomix.tempo_group(toy_manifest, 10.0, split="train")
    corpus = pseudomix.build_pseudomix_corpus(
        toy_manifest, grouping, per_focus_count=2, seed=1, out_dir=out, split="train")
    return corpus, out


@pytest.fixture(scope="session")
def toy_view(toy_corpus, toy_manifest):
    corpus, out = toy_corpus
    return sampling.CorpusView.build(corpus, out, toy_manifest, mel_params=TOY_MEL)


@pytest.fixture(scope="session")
def toy_encoder():
    import torch
    torch.manual_seed(0)
    model = models.SegmentEncoder(models.EncoderConfig(**TOY_ENC_F))
    model.eval()
    return model


def rms_db(x):
    r = np.sqrt(np.mean(np.square(np.asarray(x, dtype=np.float64))))
    return -np.inf if r <= 0 else 20.0 * np.log10(r)
