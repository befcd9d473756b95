import itertools
import math

import numpy as np
import pytest

from bpe import save_merges, save_vocab
from decoding import (
    Hypothesis,
    Translator,
    beam_core,
    beam_search,
    greedy_batch,
    greedy_core,
    greedy_decode,
    translate,
)
from transformer import TransformerConfig, build_model, preset, save_model
from utils import ConfigError, IntegrityError

# toy vocabulary: 0 = "a", 1 = "b", 2 = eos; 3 = bos (never emitted)
A, B, EOS, BOS = 0, 1, 2, 3
TRANSITIONS = {
    BOS: [0.5, 0.4, 0.1],
    A: [0.4, 0.3, 0.3],
    B: [0.05, 0.05, 0.9],
}


def toy_step(prefixes):
    return np.log(np.asarray([TRANSITIONS[int(row[-1])] for row in prefixes]))


def exhaustive_best(max_len):
    best, best_lp = None, -math.inf
    for n in range(1, max_len + 1):
        for seq in itertools.product((A, B, EOS), repeat=n):
            if EOS in seq[:-1]:
                continue
            if seq[-1] != EOS and n < max_len:
                continue
            lp, last = 0.0, BOS
            for tok in seq:
                lp += math.log(TRANSITIONS[last][tok])
                last = tok
            if lp > best_lp:
                best, best_lp = seq, lp
    return best, best_lp


def small_model(vocab_size=12, seed=0, max_len=10):
    cfg = TransformerConfig(num_layers=2, num_heads=2, d_model=16, d_ff=32, vocab_size=vocab_size,
                            dropout=0.0, max_len=max_len)
    return build_model(cfg, seed=seed)


class TestCoreSearch:

    def test_beam_finds_most_probable_sequence(self):
        expected, expected_lp = exhaustive_best(max_len=4)
        best = beam_core(toy_step, width=2, max_len=4, length_alpha=0.0, bos=BOS, eos=EOS)[0]
        assert best.tokens[1:] == expected
        assert best.logprob == pytest.approx(expected_lp)

    def test_greedy_is_myopic_on_toy(self):
        hyp = greedy_core(toy_step, max_len=4, bos=BOS, eos=EOS)
        assert hyp.tokens == (BOS, A, A, A, A)
        assert hyp.finished

    def test_greedy_stops_at_first_eos(self):
        def step(prefixes):
            return np.log(np.tile([0.2, 0.2, 0.6], (len(prefixes), 1)))

        hyp = greedy_core(step, max_len=10, bos=BOS, eos=EOS)
        assert hyp.tokens == (BOS, EOS)
        assert hyp.output_ids() == []

    def test_completed_hypotheses_end_properly(self):
        rng = np.random.default_rng(0)
        table = rng.dirichlet(np.ones(3), size=4)

        def step(prefixes):
            return np.log(table[[int(r[-1]) for r in prefixes]])

        for width in (1, 2, 3, 5):
            for hyp in beam_core(step, width, max_len=6, bos=BOS, eos=EOS):
                assert hyp.finished
                assert hyp.tokens[-1] == EOS or hyp.length == 6

    def test_width_must_be_positive(self):
        with pytest.raises(ConfigError):
            beam_core(toy_step, width=0, max_len=4, bos=BOS, eos=EOS)

    def test_length_normalized_score(self):
        hyp = Hypothesis((BOS, A, EOS), -2.0, True)
        assert hyp.score(1.0) == -1.0
        assert hyp.score(0.0) == -2.0


class TestModelDecoding:

    def test_width_one_equals_greedy(self):
        model = small_model()
        rng = np.random.default_rng(1)
        for _ in range(100):
            src = list(rng.integers(4, 12, size=int(rng.integers(1, 8)))) + [3]
            assert beam_search(model, src, width=1).tokens == greedy_decode(model, src).tokens

    def test_greedy_batch_matches_single(self):
        model = small_model(seed=2)
        sources = [[4, 5, 3], [6, 7, 8, 9, 3], [10, 3]]
        batch = greedy_batch(model, sources)
        for src, out in zip(sources, batch):
            assert out == greedy_decode(model, src).output_ids()

    def test_max_len_caps_output(self):
        model = small_model(seed=3)
        hyp = greedy_decode(model, [4, 5, 3], max_len=3)
        assert hyp.finished
        assert hyp.length <= 3

    def test_deterministic(self):
        model = small_model(seed=4)
        assert beam_search(model, [4, 5, 6, 3], width=5) == beam_search(model, [4, 5, 6, 3], width=5)


class TestTranslate:

    def test_empty_input(self, synth_segmentation):
        bpe, vocab = synth_segmentation
        model = build_model(preset("T1-quarter", len(vocab), max_len=16), seed=0)
        assert translate(model, bpe, vocab, "   ") == ""

    def test_unknown_words_do_not_crash(self, synth_segmentation):
        bpe, vocab = synth_segmentation
        model = build_model(preset("T1-quarter", len(vocab), max_len=16), seed=0)
        out = translate(model, bpe, vocab, "xylophone quetzal", beam_width=3)
        assert isinstance(out, str)

    def test_vocab_hash_mismatch(self, synth_segmentation):
        bpe, vocab = synth_segmentation
        model = build_model(preset("T1-quarter", len(vocab), max_len=16), seed=0)
        with pytest.raises(IntegrityError):
            translate(model, bpe, vocab, "bonjour", expected_vocab_hash="0" * 64)

    def test_vocab_size_mismatch(self, synth_segmentation):
        bpe, vocab = synth_segmentation
        model = build_model(preset("T1-quarter", len(vocab) + 1, max_len=16), seed=0)
        with pytest.raises(IntegrityError):
            translate(model, bpe, vocab, "bonjour")

    def test_translator_from_paths(self, tmp_path, synth64, synth_segmentation):
        bpe, vocab = synth_segmentation
        model = build_model(preset("T1-quarter", len(vocab), max_len=16), seed=0)
        save_model(str(tmp_path / "m.ckpt"), model, vocab.hash())
        save_merges(str(tmp_path / "merges.bpe"), bpe)
        save_vocab(str(tmp_path / "vocab.txt"), vocab)
        translator = Translator.from_paths(str(tmp_path / "m.ckpt"), str(tmp_path / "merges.bpe"),
                                           str(tmp_path / "vocab.txt"))
        sentences = synth64.sources[:4] + [""]
        batched = translator.translate_many(sentences, beam_width=1)
        assert batched == [translator.translate(s) for s in sentences]
        assert batched[-1] == ""
