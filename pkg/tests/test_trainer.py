import os

import numpy as np
import pytest

from config import BOS_ID, EOS_ID, TrainSection
from corpus import SplitCorpus, invert_synthetic, synthetic_lexicon
from decoding import Translator
from evaluation import bleu
from trainer import EarlyStopping, encode_pairs, make_batch, pair_tokens, token_batches, train
from transformer import TransformerConfig, build_model, config_from_train, load_model
from utils import NumericError, read_jsonl


def whole_split(corpus):
    return SplitCorpus(train=corpus, valid=corpus, test=corpus.with_pairs(()), seed=0)


def small_model(vocab_size, seed=0):
    cfg = TransformerConfig(num_layers=1, num_heads=2, d_model=16, d_ff=32, vocab_size=vocab_size,
                            dropout=0.0, max_len=32)
    return build_model(cfg, seed=seed)


class TestBatching:

    def test_encode_pairs(self, synth64, synth_segmentation):
        bpe, vocab = synth_segmentation
        pairs = encode_pairs(bpe, vocab, synth64, max_len=32)
        assert len(pairs) == 64
        for src, tgt in pairs:
            assert src[-1] == EOS_ID
            assert EOS_ID not in tgt and BOS_ID not in tgt

    def test_make_batch_shifts_target(self):
        batch = make_batch([([5, 6, 3], [7, 8]), ([9, 3], [10])])
        np.testing.assert_array_equal(batch.tgt_in, [[BOS_ID, 7, 8], [BOS_ID, 10, 0]])
        np.testing.assert_array_equal(batch.tgt_out, [[7, 8, EOS_ID], [10, EOS_ID, 0]])
        np.testing.assert_array_equal(batch.src, [[5, 6, 3], [9, 3, 0]])
        assert batch.n_tokens == 6 + 4

    @pytest.mark.parametrize("budget", [16, 40, 4096])
    def test_token_budget(self, synth64, synth_segmentation, budget):
        bpe, vocab = synth_segmentation
        pairs = encode_pairs(bpe, vocab, synth64, max_len=32)
        batches = token_batches(pairs, budget, seed=1, epoch=1)
        assert all(b.n_tokens <= budget for b in batches)
        kept = sum(1 for p in pairs if pair_tokens(p) <= budget)
        assert sum(b.src.shape[0] for b in batches) == kept

    def test_shuffle_is_seeded(self, synth64, synth_segmentation):
        bpe, vocab = synth_segmentation
        pairs = encode_pairs(bpe, vocab, synth64, max_len=32)
        a = token_batches(pairs, 64, seed=1, epoch=1)
        b = token_batches(pairs, 64, seed=1, epoch=1)
        c = token_batches(pairs, 64, seed=1, epoch=2)
        np.testing.assert_array_equal(a[0].src, b[0].src)
        assert not np.array_equal(a[0].src, c[0].src)


class TestEarlyStopping:

    def test_fires_after_exactly_four_stagnant_validations(self):
        stopper = EarlyStopping(4)
        assert stopper.update(10.0)
        for _ in range(3):
            assert not stopper.update(10.0)
            assert not stopper.should_stop
        stopper.update(9.0)
        assert stopper.should_stop

    def test_improvement_resets(self):
        stopper = EarlyStopping(2)
        stopper.update(1.0)
        stopper.update(1.0)
        stopper.update(2.0)
        stopper.update(2.0)
        assert not stopper.should_stop


class TestTrainLoop:

    @pytest.mark.parametrize("validate_every", [1, 2])
    def test_flat_validation_stops_after_patience(self, tmp_path, synth64, synth_segmentation, validate_every):
        bpe, vocab = synth_segmentation
        section = TrainSection(epochs=50, token_batch_size=4096, lr_initial=1e-3, dropout=0.0,
                               patience=4, validate_every=validate_every, max_len=32)
        calls = []

        def flat(model):
            calls.append(1)
            return 12.5, 30.0

        run = train(small_model(len(vocab)), whole_split(synth64), bpe, vocab, section, str(tmp_path),
                    seed=0, validator=flat, verbose=False)
        assert run.stopped == "early_stopping"
        assert len(calls) == 5
        assert len(run.history) == 5 * validate_every
        history = read_jsonl(str(tmp_path / "history.jsonl"))
        assert [h.get("val_bleu") for h in history if "val_bleu" in h] == [12.5] * 5
        assert os.path.exists(tmp_path / "best.ckpt")

    def test_history_fields_and_best_checkpoint(self, tmp_path, synth64, synth_segmentation):
        bpe, vocab = synth_segmentation
        section = TrainSection(epochs=3, token_batch_size=256, lr_initial=1e-3, dropout=0.1, max_len=32)
        scores = iter([5.0, 7.0, 6.0])
        run = train(small_model(len(vocab)), whole_split(synth64), bpe, vocab, section, str(tmp_path),
                    seed=0, validator=lambda m: (next(scores), 0.0), verbose=False)
        assert run.best_bleu == 7.0
        assert set(run.history[0]) == {"epoch", "loss", "lr", "val_bleu", "val_chrf"}
        _, manifest = load_model(run.best_checkpoint, vocab.hash())
        assert manifest["optimizer"] is True

    def test_same_seed_byte_identical_checkpoints(self, tmp_path, synth64, synth_segmentation):
        bpe, vocab = synth_segmentation
        section = TrainSection(epochs=2, token_batch_size=256, lr_initial=1e-3, dropout=0.2, max_len=32)
        for name in ("a", "b"):
            train(small_model(len(vocab), seed=5), whole_split(synth64), bpe, vocab, section,
                  str(tmp_path / name), seed=3, validator=lambda m: (1.0, 1.0), verbose=False)
        assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()

    def test_non_finite_loss_aborts_with_last_good(self, tmp_path, synth64, synth_segmentation):
        bpe, vocab = synth_segmentation
        model = small_model(len(vocab))
        model.params["dec.ln.g"].data[:] = np.nan
        section = TrainSection(epochs=2, token_batch_size=256, lr_initial=1e-3, max_len=32)
        with pytest.raises(NumericError):
            train(model, whole_split(synth64), bpe, vocab, section, str(tmp_path), seed=0,
                  validator=lambda m: (0.0, 0.0), verbose=False)
        assert os.path.exists(tmp_path / "last_good.ckpt")
        assert os.path.exists(tmp_path / "history.jsonl")


@pytest.mark.slow
class TestOverfit:

    def test_synthetic_overfit(self, tmp_path, synth64, synth_segmentation, tiny_train_section):
        bpe, vocab = synth_segmentation
        model = build_model(config_from_train(tiny_train_section, len(vocab)), seed=1)
        run = train(model, whole_split(synth64), bpe, vocab, tiny_train_section, str(tmp_path), seed=1,
                    verbose=False)
        assert run.best_bleu >= 90.0

        translator = Translator(model, bpe, vocab)
        hyps = translator.translate_many(synth64.sources)
        assert bleu(hyps, synth64.targets).bleu_percent >= 90.0

        mapping = synthetic_lexicon(1, 20)
        recovered = sum(1 for h, p in zip(hyps, synth64.pairs)
                        if set(h.split()) <= set(mapping.values())
                        and invert_synthetic(h.split(), mapping) == p.src.split())
        assert recovered >= 0.75 * len(hyps)
