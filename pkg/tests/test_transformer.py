import numpy as np
import pytest

from config import TrainSection
from transformer import (
    TransformerConfig,
    build_model,
    config_from_train,
    expected_param_count,
    load_model,
    preset,
    save_model,
)
from utils import ConfigError, DimensionError, IntegrityError


def closed_form_count(layers, d, f, V, tied=True):
    attn = 4 * (d * d + d)
    ff = d * f + f + f * d + d
    enc_layer = attn + ff + 2 * (2 * d)
    dec_layer = 2 * attn + ff + 3 * (2 * d)
    total = V * d + layers * (enc_layer + dec_layer) + 2 * (2 * d)
    return total if tied else total + V * d


def small_batch(rng, vocab_size, batch=3, src_len=6, tgt_len=5):
    src = rng.integers(4, vocab_size, size=(batch, src_len))
    tgt = rng.integers(4, vocab_size, size=(batch, tgt_len))
    tgt[:, 0] = 2
    return src, tgt


class TestBuild:

    def test_t1_parameter_count(self):
        model = build_model(preset("T1", 1000), seed=0)
        assert model.num_parameters() == closed_form_count(4, 128, 512, 1000)
        assert model.num_parameters() == expected_param_count(model.config)

    def test_tying_saves_one_matrix(self):
        tied = build_model(preset("T1-quarter", 50), seed=0)
        untied = build_model(preset("T1-quarter", 50, tie_softmax=False), seed=0)
        assert untied.num_parameters() - tied.num_parameters() == 50 * 32
        assert "out" not in tied.params

    @pytest.mark.parametrize("parts", ["encoder", "decoder"])
    def test_partial_models(self, parts):
        model = build_model(preset("T1-quarter", 20, parts=parts), seed=0)
        assert model.num_parameters() == expected_param_count(model.config)

    def test_same_seed_bit_identical(self):
        a = build_model(preset("T1-quarter", 30), seed=7)
        b = build_model(preset("T1-quarter", 30), seed=7)
        c = build_model(preset("T1-quarter", 30), seed=8)
        assert a.param_hash() == b.param_hash()
        assert a.param_hash() != c.param_hash()

    def test_xavier_init(self):
        model = build_model(preset("T1-quarter", 30), seed=0)
        limit = np.sqrt(6.0 / (32 + 128))
        w1 = model.params["enc.0.ff.w1"].data
        assert np.abs(w1).max() <= limit
        assert np.all(model.params["enc.0.ff.b1"].data == 0)
        assert np.all(model.params["enc.0.ln1.g"].data == 1)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            build_model(TransformerConfig(2, 3, 32, 64, 20), seed=0)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("T4", 20)

    def test_config_from_train_embedding_dimension(self):
        section = TrainSection(model_architecture="T1", embedding_dimension=64, token_batch_size=4096)
        cfg = config_from_train(section, 100)
        assert (cfg.num_layers, cfg.num_heads, cfg.d_model, cfg.d_ff) == (4, 4, 64, 256)
        assert cfg.dropout == 0.2


class TestForward:

    def test_output_shape(self, tiny_model):
        src, tgt = small_batch(np.random.default_rng(0), 12)
        assert tiny_model.forward(src, tgt).shape == (3, 5, 12)

    def test_causal_mask(self, tiny_model):
        rng = np.random.default_rng(1)
        src, tgt = small_batch(rng, 12)
        before = tiny_model.forward(src, tgt).data
        for j in range(1, tgt.shape[1]):
            changed = tgt.copy()
            changed[:, j] = (changed[:, j] - 3) % 8 + 4
            after = tiny_model.forward(src, changed).data
            np.testing.assert_array_equal(after[:, :j], before[:, :j])

    def test_pad_mask(self, tiny_model):
        rng = np.random.default_rng(2)
        src, tgt = small_batch(rng, 12)
        src[:, -2:] = 0
        mask = tiny_model.pad_mask(src)
        before = tiny_model.forward(src, tgt, src_mask=mask).data
        src[:, -1] = 7
        after = tiny_model.forward(src, tgt, src_mask=mask).data
        np.testing.assert_array_equal(after, before)

    def test_trailing_padding_is_invisible(self, tiny_model):
        rng = np.random.default_rng(3)
        src, tgt = small_batch(rng, 12)
        padded = np.concatenate([src, np.zeros((3, 4), dtype=src.dtype)], axis=1)
        np.testing.assert_allclose(tiny_model.forward(padded, tgt).data, tiny_model.forward(src, tgt).data,
                                   atol=1e-5)

    def test_attention_rows_sum_to_one(self, tiny_model):
        src, tgt = small_batch(np.random.default_rng(4), 12)
        src[0, -3:] = 0
        tiny_model.capture_attention = True
        tiny_model.forward(src, tgt)
        assert len(tiny_model.attention_maps) == 4 * 3
        for probs in tiny_model.attention_maps:
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_tied_embedding_is_output_projection(self, tiny_model):
        src = np.array([[4, 5, 6, 3]])
        tgt = np.array([[2, 4, 5]])
        k = 9
        before = tiny_model.forward(src, tgt).data
        tiny_model.params["emb"].data[k] += 0.5
        after = tiny_model.forward(src, tgt).data
        others = [i for i in range(12) if i != k]
        np.testing.assert_array_equal(after[..., others], before[..., others])
        assert not np.allclose(after[..., k], before[..., k])

    def test_length_error(self, tiny_model):
        src = np.full((1, 17), 4)
        with pytest.raises(DimensionError):
            tiny_model.forward(src, np.array([[2]]))

    def test_encoder_only_has_no_decoder(self):
        model = build_model(preset("T1-quarter", 20, parts="encoder"), seed=0)
        memory, mask = model.encode(np.array([[4, 5, 3]]))
        assert memory.shape == (1, 3, 32)
        with pytest.raises(ConfigError):
            model.decode(np.array([[2]]), memory, mask)

    def test_next_log_probs_normalized(self, tiny_model):
        memory, mask = tiny_model.encode(np.array([[4, 5, 3]]))
        logp = tiny_model.next_log_probs(memory, mask, np.array([[2, 6]]))
        np.testing.assert_allclose(np.exp(logp).sum(axis=-1), 1.0, atol=1e-9)


class TestCheckpoint:

    def test_roundtrip(self, tmp_path, tiny_model):
        path = str(tmp_path / "m.ckpt")
        save_model(path, tiny_model, vocab_hash="abc", step=12)
        loaded, manifest = load_model(path, vocab_hash="abc")
        assert manifest["step"] == 12
        assert loaded.config == tiny_model.config
        assert loaded.param_hash() == tiny_model.param_hash()
        src, tgt = small_batch(np.random.default_rng(5), 12)
        np.testing.assert_array_equal(loaded.forward(src, tgt).data, tiny_model.forward(src, tgt).data)

    def test_byte_identical_saves(self, tmp_path, tiny_model):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_model(str(a), tiny_model, vocab_hash="abc")
        save_model(str(b), tiny_model, vocab_hash="abc")
        assert a.read_bytes() == b.read_bytes()

    def test_vocab_mismatch(self, tmp_path, tiny_model):
        path = str(tmp_path / "m.ckpt")
        save_model(path, tiny_model, vocab_hash="abc")
        with pytest.raises(IntegrityError):
            load_model(path, vocab_hash="def")
