import numpy as np
import pytest
import torch

from promptad import EncoderSpec, PromptBank, make_synthetic_encoder
from promptad.toydata import write_blob_dataset


def tiny_spec(**overrides) -> EncoderSpec:
    """Desk-scale spec: 64px images, 8x8 patch grid, 4 selected layers."""
    kwargs = dict(
        image_size=64,
        patch_size=8,
        num_vision_layers=4,
        selected_layers=(1, 2, 3, 4),
        vision_dims=(32, 32, 32, 32),
        text_dim=16,
        text_seq_len=16,
        num_text_layers=2,
        seed=7,
    )
    kwargs.update(overrides)
    return EncoderSpec(**kwargs)


def micro_spec(**overrides) -> EncoderSpec:
    """Very small spec for finite-difference work: 8x8 grid, narrow dims."""
    kwargs = dict(
        image_size=32,
        patch_size=4,
        num_vision_layers=2,
        selected_layers=(1, 2),
        vision_dims=(6, 6),
        text_dim=8,
        text_seq_len=16,
        num_text_layers=2,
        seed=11,
    )
    kwargs.update(overrides)
    return EncoderSpec(**kwargs)


@pytest.fixture(scope="session")
def spec():
    return tiny_spec()


@pytest.fixture(scope="session")
def encoder(spec):
    return make_synthetic_encoder(spec)


@pytest.fixture
def bank(spec):
    return PromptBank(spec, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sample_image():
    return np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)


@pytest.fixture(scope="session")
def blob_root(tmp_path_factory):
    """A small MVTec-style tree: 1 class with good train/test + blob defects."""
    root = tmp_path_factory.mktemp("data") / "toy"
    write_blob_dataset(
        root,
        classes=("widget",),
        image_size=64,
        patch_size=8,
        blob_patches=2,
        n_train_good=2,
        n_test_good=3,
        n_test_defect=5,
        seed=3,
    )
    return root


class RiggedEncoder:
    """Stub frozen encoder for class-name-filter tests.

    ``sentence_vectors`` maps a substring to the unit vector returned for
    sentences containing it; anything unmatched gets ``default``.
    """

    def __init__(self, image_vector, sentence_vectors, default):
        self.image_vector = torch.as_tensor(image_vector, dtype=torch.float32)
        self.sentence_vectors = {
            k: torch.as_tensor(v, dtype=torch.float32) for k, v in sentence_vectors.items()
        }
        self.default = torch.as_tensor(default, dtype=torch.float32)

    def encode_image_global(self, image):
        return self.image_vector

    def encode_sentence(self, text):
        for key, vec in self.sentence_vectors.items():
            if key in text:
                return vec
        return self.default
