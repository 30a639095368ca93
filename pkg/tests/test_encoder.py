import numpy as np
import pytest
import torch

from promptad.encoder import (
    EncoderSpec,
    PAD_ID,
    SyntheticEncoder,
    TokenSequence,
    VOCAB_SIZE,
    load_encoder,
    make_synthetic_encoder,
    plain_sequence,
    register_encoder_adapter,
    tokenize,
)

from conftest import tiny_spec


def test_spec_validation_rejects_bad_layouts():
    with pytest.raises(ValueError):
        tiny_spec(image_size=65)  # not divisible by patch
    with pytest.raises(ValueError):
        tiny_spec(selected_layers=(2, 2))
    with pytest.raises(ValueError):
        tiny_spec(selected_layers=(0, 1))
    with pytest.raises(ValueError):
        tiny_spec(selected_layers=(1, 5))
    with pytest.raises(ValueError):
        tiny_spec(vision_dims=(32, 32))


def test_patch_grid_row_count_518():
    # 518 / 14 = 37 -> 1369 patch rows per layer
    spec = EncoderSpec(
        image_size=518, patch_size=14, num_vision_layers=2, selected_layers=(1, 2),
        vision_dims=(8, 8), text_dim=8, text_seq_len=16, num_text_layers=1, seed=0,
    )
    enc = SyntheticEncoder(spec)
    img = np.zeros((518, 518, 3), dtype=np.float32)
    stack = enc.encode_image(img)
    assert stack.grid_hw == (37, 37)
    for feats in stack:
        assert feats.patch_grid.shape[0] == 1369


def test_one_stack_entry_per_selected_layer(encoder, sample_image):
    stack = encoder.encode_image(sample_image)
    assert [f.layer for f in stack] == [1, 2, 3, 4]
    rows = {f.patch_grid.shape[0] for f in stack}
    assert rows == {64}
    for f in stack:
        assert f.class_token.shape == (32,)
        assert torch.isfinite(f.patch_grid).all()


def test_four_evenly_spaced_layers_of_deep_encoder():
    spec = tiny_spec(
        num_vision_layers=24, selected_layers=(6, 12, 18, 24), vision_dims=(8,) * 24
    )
    enc = SyntheticEncoder(spec)
    stack = enc.encode_image(np.zeros((64, 64, 3), dtype=np.float32))
    assert len(stack) == 4
    assert [f.layer for f in stack] == [6, 12, 18, 24]


def test_encode_image_shape_mismatch(encoder):
    with pytest.raises(ValueError):
        encoder.encode_image(np.zeros((32, 32, 3), dtype=np.float32))


def test_encode_image_deterministic(encoder, sample_image):
    a = encoder.encode_image(sample_image)
    b = encoder.encode_image(sample_image)
    for fa, fb in zip(a, b):
        assert torch.equal(fa.patch_grid, fb.patch_grid)
        assert torch.equal(fa.class_token, fb.class_token)


def test_equal_specs_give_functionally_identical_encoders(spec, sample_image):
    e1, e2 = make_synthetic_encoder(spec), make_synthetic_encoder(spec)
    s1, s2 = e1.encode_image(sample_image), e2.encode_image(sample_image)
    for fa, fb in zip(s1, s2):
        assert torch.equal(fa.patch_grid, fb.patch_grid)
    seq = plain_sequence("a photo of a widget")
    assert torch.equal(e1.encode_text(seq), e2.encode_text(seq))


def test_single_pixel_perturbation_changes_some_patch_feature(encoder, sample_image):
    perturbed = sample_image.copy()
    perturbed[5, 5, 0] = 1.0 - perturbed[5, 5, 0]
    a = encoder.encode_image(sample_image)
    b = encoder.encode_image(perturbed)
    changed = any(
        not torch.equal(fa.patch_grid, fb.patch_grid) for fa, fb in zip(a, b)
    )
    assert changed


def test_encode_text_unit_norm(encoder, rng):
    for text in ("a photo of a widget", "damaged gasket", "x"):
        out = encoder.encode_text(plain_sequence(text))
        assert abs(out.norm().item() - 1.0) < 1e-6


def test_encode_text_rejects_overlong_sequences(encoder):
    ids = [PAD_ID] * 17
    with pytest.raises(ValueError):
        encoder.encode_text(TokenSequence(token_ids=ids))


def test_deep_tokens_none_matches_vanilla_path(encoder):
    seq = plain_sequence("a photo of a widget")
    vanilla = encoder.encode_text(seq)
    again = encoder.encode_text(plain_sequence("a photo of a widget"), deep_tokens=None)
    assert torch.equal(vanilla, again)


def test_deep_tokens_change_the_embedding(encoder, spec):
    seq = plain_sequence("a photo of a widget")
    vanilla = encoder.encode_text(seq)
    deep = torch.full((spec.num_text_layers, spec.text_dim), 0.3)
    tuned = encoder.encode_text(plain_sequence("a photo of a widget"), deep_tokens=deep)
    assert not torch.allclose(vanilla, tuned)


def test_deep_tokens_wrong_count_rejected(encoder, spec):
    seq = plain_sequence("a photo of a widget")
    with pytest.raises(ValueError):
        encoder.encode_text(seq, deep_tokens=torch.zeros(spec.num_text_layers + 1, spec.text_dim))


def _replay_weights(spec):
    """Independent replay of the documented weight-generation order."""
    gen = torch.Generator().manual_seed(spec.seed)

    def draw(*shape, scale=1.0):
        return (torch.randn(*shape, generator=gen, dtype=torch.float64) * scale).numpy()

    ct = spec.text_dim
    w = {"embedding": draw(VOCAB_SIZE, ct, scale=0.02), "text": []}
    for _ in range(spec.num_text_layers):
        w["text"].append(
            (draw(ct, ct, scale=ct ** -0.5), draw(ct, scale=0.01), draw(ct, ct, scale=ct ** -0.5))
        )
    d0 = 3 * spec.patch_size ** 2
    w["class_seed"] = draw(d0)
    dims = (d0,) + spec.vision_dims
    w["vision"] = [
        (draw(dims[i], dims[i + 1], scale=dims[i] ** -0.5), draw(dims[i + 1], scale=0.01))
        for i in range(spec.num_vision_layers)
    ]
    w["global"] = draw(dims[-1], ct, scale=dims[-1] ** -0.5)
    return w


def test_text_path_matches_matrix_chain_oracle():
    """Straight numpy re-implementation of the seeded text pipeline."""
    spec = tiny_spec()
    enc = SyntheticEncoder(spec, dtype=torch.float64)
    weights = _replay_weights(spec)

    seq = plain_sequence("a photo of a good widget object")
    x = weights["embedding"][np.array(seq.token_ids)]
    pad_rows = np.repeat(weights["embedding"][PAD_ID][None, :],
                         spec.text_seq_len - len(seq.token_ids), axis=0)
    x = np.concatenate([x, pad_rows], axis=0)
    for w_l, b_l, m_l in weights["text"]:
        x = np.tanh(x @ w_l + b_l + x.mean(axis=0) @ m_l)
    expected = x[seq.eot_position]
    expected = expected / np.linalg.norm(expected)

    got = enc.encode_text(plain_sequence("a photo of a good widget object")).numpy()
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_vision_path_matches_matrix_chain_oracle(sample_image):
    spec = tiny_spec()
    enc = SyntheticEncoder(spec, dtype=torch.float64)
    weights = _replay_weights(spec)

    p, g = spec.patch_size, spec.grid_size
    img = sample_image.astype(np.float64)
    rows = img.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
    cls = weights["class_seed"] + rows.mean(axis=0)
    x = np.concatenate([cls[None, :], rows], axis=0)
    outputs = []
    for w_i, b_i in weights["vision"]:
        x = np.tanh(x @ w_i + b_i)
        outputs.append(x)

    stack = enc.encode_image(sample_image)
    for feats in stack:
        np.testing.assert_allclose(
            feats.patch_grid.numpy(), outputs[feats.layer - 1][1:], atol=1e-12
        )
        np.testing.assert_allclose(
            feats.class_token.numpy(), outputs[feats.layer - 1][0], atol=1e-12
        )


def test_global_image_embedding_is_unit_and_image_dependent(encoder, sample_image):
    a = encoder.encode_image_global(sample_image)
    assert abs(a.norm().item() - 1.0) < 1e-6
    other = sample_image.copy()
    other[:16] = 0.0
    b = encoder.encode_image_global(other)
    assert not torch.allclose(a, b)


def test_soft_slot_overrides_change_output(encoder, spec):
    base = plain_sequence("a photo of a widget")
    out0 = encoder.encode_text(base)
    slotted = plain_sequence("a photo of a widget")
    slotted.soft_slots = {0: torch.full((spec.text_dim,), 0.5)}
    out1 = encoder.encode_text(slotted)
    assert not torch.allclose(out0, out1)


def test_tokenizer_is_stable_and_in_vocab():
    ids = tokenize("A photo of a Pipe_Fryum object.")
    assert ids == tokenize("a photo of a pipe fryum object")
    assert all(0 <= i < VOCAB_SIZE for i in ids)


def test_adapter_registry_roundtrip(spec, sample_image):
    enc = load_encoder("synthetic", spec)
    assert enc.encode_image(sample_image).grid_hw == (8, 8)

    class Dummy:
        def __init__(self, spec, weights_path):
            self.spec = spec
            self.weights_path = weights_path

        def encode_image(self, image):
            raise NotImplementedError

        def encode_text(self, seq, deep_tokens=None):
            raise NotImplementedError

        def encode_image_global(self, image):
            raise NotImplementedError

    register_encoder_adapter("dummy", lambda s, w=None: Dummy(s, w))
    adapter = load_encoder("dummy", spec, weights_path="weights.bin")
    assert adapter.weights_path == "weights.bin"
    with pytest.raises(KeyError):
        load_encoder("missing", spec)


def test_adapter_without_required_methods_rejected(spec):
    register_encoder_adapter("broken", lambda s, w=None: object())
    with pytest.raises(TypeError):
        load_encoder("broken", spec)
