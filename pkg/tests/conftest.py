import pytest
import torch

from vectorcontour.codec import Vocab
from vectorcontour.model import ContourModel, ModelConfig
from vectorcontour.synthdata import GenParams, build_dataset, load_split


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


def micro_config(vocab, **overrides):
    kw = dict(vocab_size=len(vocab), enc_layers=1, enc_dim=8, enc_heads=2,
              lm_layers=1, lm_dim=8, lm_heads=2,
              img_id=vocab.img_id, bos_id=vocab.bos_id,
              eos_id=vocab.eos_id, pad_id=vocab.pad_id,
              coord_start_id=vocab.x_id(0))
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture()
def micro_model(vocab):
    torch.manual_seed(0)
    return ContourModel(micro_config(vocab))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    build_dataset(24, 8, 8, GenParams(), out, master_seed=7)
    return out


@pytest.fixture(scope="session")
def tiny_train(tiny_dataset):
    return load_split(tiny_dataset, "train")


@pytest.fixture(scope="session")
def tiny_test(tiny_dataset):
    return load_split(tiny_dataset, "test")


def random_canonical_polygon(rng, width=128, height=128, max_vertices=16, grid=8):
    from vectorcontour.synthdata import gen_rectilinear_polygon
    return gen_rectilinear_polygon(max_vertices, grid, rng, width, height)
