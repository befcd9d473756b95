import numpy as np
import pytest

from config import LoraSection, TrainSection
from corpus import SplitCorpus
from lora import (
    LoraSpec,
    expected_trainable,
    inject,
    load_adapters,
    merge,
    save_adapters,
    target_names,
    train_adapters,
)
from trainer import corpus_validator, train
from transformer import build_model, preset
from utils import ConfigError, IntegrityError, LoraError


def random_batch(seed, vocab_size, batch=100, src_len=7, tgt_len=6):
    rng = np.random.default_rng(seed)
    src = rng.integers(4, vocab_size, size=(batch, src_len))
    tgt = rng.integers(4, vocab_size, size=(batch, tgt_len))
    tgt[:, 0] = 2
    return src, tgt


def randomize_b(adapted, seed=0):
    rng = np.random.default_rng(seed)
    for _, B in adapted.adapters.values():
        B.data = rng.normal(0.0, 0.05, size=B.shape).astype(B.dtype)


@pytest.fixture
def synth_model(synth_segmentation):
    _, vocab = synth_segmentation
    return build_model(preset("T1-quarter", len(vocab), dropout=0.0, max_len=32), seed=0)


@pytest.fixture
def synth_split(synth64):
    return SplitCorpus(train=synth64, valid=synth64.with_pairs(synth64.pairs[:8]),
                       test=synth64.with_pairs(()), seed=0)


class TestSpec:

    def test_alpha_defaults_to_twice_rank(self):
        assert LoraSpec(rank=8).alpha == 16.0
        assert LoraSpec(rank=8).scale == 2.0
        assert LoraSpec(rank=4, alpha=4.0).scale == 1.0

    @pytest.mark.parametrize("kwargs", [{"rank": 0}, {"rank": 2, "targets": ("x",)}, {"rank": 2, "targets": ()}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            LoraSpec(**kwargs)


class TestInject:

    def test_identity_at_init(self, tiny_model):
        adapted = inject(tiny_model, LoraSpec(rank=4, seed=3))
        src, tgt = random_batch(0, 12, batch=5)
        np.testing.assert_array_equal(adapted.forward(src, tgt).data, tiny_model.forward(src, tgt).data)

    @pytest.mark.parametrize("rank", [8, 16])
    def test_trainable_count_on_t1(self, rank):
        model = build_model(preset("T1", 100), seed=0)
        adapted = inject(model, LoraSpec(rank=rank))
        assert len(target_names(model, adapted.spec)) == 24
        assert adapted.num_trainable() == 24 * rank * 256
        assert adapted.num_trainable() == expected_trainable(model, adapted.spec)
        assert adapted.spec.alpha == 2 * rank

    def test_rank_too_large(self, tiny_model):
        with pytest.raises(ConfigError):
            inject(tiny_model, LoraSpec(rank=32))

    def test_all_targets(self, tiny_model):
        adapted = inject(tiny_model, LoraSpec(rank=2, targets=("q", "k", "v", "o")))
        assert adapted.num_trainable() == 12 * 4 * 2 * 64

    def test_shares_base_arrays(self, tiny_model):
        adapted = inject(tiny_model, LoraSpec(rank=2))
        assert adapted.base_hash() == tiny_model.param_hash()
        assert all(not p.requires_grad for p in adapted.params.values())


class TestTrainAdapters:

    def test_base_untouched(self, synth_model, synth_split, synth_segmentation):
        bpe, vocab = synth_segmentation
        adapted = inject(synth_model, LoraSpec(rank=4, seed=1))
        before = synth_model.param_hash()
        b_before = {n: B.data.copy() for n, (_, B) in adapted.adapters.items()}
        history = train_adapters(adapted, synth_split, bpe, vocab,
                                 LoraSection(rank=4, epochs=1, lr=1e-3, batch_size=16), seed=0, verbose=False)
        assert len(history) == 1
        assert synth_model.param_hash() == before
        assert adapted.base_hash() == before
        assert all(p.grad is None for p in adapted.params.values())
        assert any(not np.array_equal(B.data, b_before[n]) for n, (_, B) in adapted.adapters.items())

    def test_train_after_merge(self, synth_model, synth_split, synth_segmentation):
        bpe, vocab = synth_segmentation
        adapted = inject(synth_model, LoraSpec(rank=2))
        merge(adapted)
        with pytest.raises(LoraError):
            train_adapters(adapted, synth_split, bpe, vocab, LoraSection(epochs=1), verbose=False)

    @pytest.mark.slow
    def test_loss_decreases(self, synth_model, synth_split, synth_segmentation):
        bpe, vocab = synth_segmentation
        adapted = inject(synth_model, LoraSpec(rank=4, seed=2))
        history = train_adapters(adapted, synth_split, bpe, vocab,
                                 LoraSection(rank=4, epochs=4, lr=1e-2, scheduler="constant", batch_size=8),
                                 seed=0, verbose=False)
        assert history[-1]["loss"] < history[0]["loss"]

    @pytest.mark.slow
    def test_adapters_improve_validation_bleu(self, tmp_path, synth_model, synth_split, synth_segmentation):
        bpe, vocab = synth_segmentation
        base_section = TrainSection(model_architecture="T1-quarter", epochs=30, token_batch_size=128,
                                    lr_initial=2e-3, dropout=0.0, label_smoothing=0.0, validate_every=30,
                                    max_len=32, beam_width=1)
        train(synth_model, synth_split, bpe, vocab, base_section, str(tmp_path), seed=0, verbose=False)
        validate = corpus_validator(bpe, vocab, synth_split.valid, 32)
        base_bleu, _ = validate(synth_model)
        assert base_bleu < 100.0

        adapted = inject(synth_model, LoraSpec(rank=8, seed=2))
        history = train_adapters(adapted, synth_split, bpe, vocab,
                                 LoraSection(rank=8, epochs=10, lr=5e-3, scheduler="constant", batch_size=8),
                                 seed=0, verbose=False)
        assert history[-1]["val_bleu"] > base_bleu


class TestMerge:

    def test_merged_matches_adapted(self, tiny_model):
        adapted = inject(tiny_model, LoraSpec(rank=4, seed=5))
        randomize_b(adapted)
        inputs = [random_batch(seed, 12, batch=1, src_len=3 + seed % 6, tgt_len=2 + seed % 5)
                  for seed in range(100)]
        expected = [adapted.forward(src, tgt).data for src, tgt in inputs]
        merged = merge(adapted)
        for (src, tgt), want in zip(inputs, expected):
            np.testing.assert_allclose(merged.forward(src, tgt).data, want, atol=1e-5)
        assert set(merged.params) == set(tiny_model.params)

    def test_merge_leaves_base_alone(self, tiny_model):
        before = tiny_model.param_hash()
        adapted = inject(tiny_model, LoraSpec(rank=4))
        randomize_b(adapted)
        merged = merge(adapted)
        assert tiny_model.param_hash() == before
        assert merged.param_hash() != before

    def test_double_merge(self, tiny_model):
        adapted = inject(tiny_model, LoraSpec(rank=2))
        merge(adapted)
        with pytest.raises(LoraError):
            merge(adapted)


class TestAdapterFiles:

    def test_roundtrip(self, tmp_path, tiny_model):
        adapted = inject(tiny_model, LoraSpec(rank=4, alpha=6.0, targets=("q", "o"), seed=9))
        randomize_b(adapted, seed=1)
        path = str(tmp_path / "adapters.ckpt")
        save_adapters(path, adapted)
        loaded = load_adapters(path, tiny_model)
        assert loaded.spec == adapted.spec
        src, tgt = random_batch(2, 12, batch=4)
        np.testing.assert_array_equal(loaded.forward(src, tgt).data, adapted.forward(src, tgt).data)

    def test_wrong_base(self, tmp_path, tiny_model):
        path = str(tmp_path / "adapters.ckpt")
        save_adapters(path, inject(tiny_model, LoraSpec(rank=2)))
        other = build_model(preset("T1-quarter", 12, dropout=0.0, max_len=16), seed=1)
        with pytest.raises(IntegrityError):
            load_adapters(path, other)
