import os
from typing import Callable, List, Sequence

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tape, Tensor
from bpe import build_vocab, learn_bpe
from config import FIXTURE_DIR, TrainSection
from corpus import ParallelCorpus, SentencePair, gen_synthetic
from transformer import build_model, preset


def gradcheck(loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor], tol: float = 1e-4) -> List[float]:
    """Backprop once, then compare every input's gradient to central differences."""
    for t in inputs:
        t.grad = None
    with Tape():
        loss = loss_fn()
        ad.backward(loss)
    errors = []
    for t in inputs:
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        numeric = ad.numeric_grad(loss_fn, t)
        err = ad.relative_error(analytic, numeric)
        assert err < tol, f"{t.name or t.shape}: relative error {err:.2e}"
        errors.append(err)
    return errors


def weighted_sum(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar probe: sum(out * w) with a fixed random w, so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.sum_(out * Tensor(w.astype(out.dtype)))


@pytest.fixture
def fixture_dir() -> str:
    return FIXTURE_DIR


@pytest.fixture
def preprocess_fixture() -> str:
    return os.path.join(FIXTURE_DIR, "preprocess_fixture.tsv")


@pytest.fixture
def synth64() -> ParallelCorpus:
    return gen_synthetic(64, seed=1, vocab_size=20)


@pytest.fixture
def synth_segmentation(synth64):
    bpe = learn_bpe(synth64, 200, verbose=False)
    return bpe, build_vocab(bpe, synth64)


@pytest.fixture
def small_corpus() -> ParallelCorpus:
    pairs = [SentencePair(f"mot{i} le chat", f"daa{i} jakuma ye") for i in range(10)]
    return ParallelCorpus(tuple(pairs))


@pytest.fixture
def tiny_model():
    cfg = preset("T1-quarter", 12, dropout=0.0, max_len=16)
    return build_model(cfg, seed=0)


@pytest.fixture
def tiny_train_section() -> TrainSection:
    return TrainSection(model_architecture="T1-quarter", epochs=300, token_batch_size=128, lr_initial=0.002,
                        lr_min=1e-10, dropout=0.0, scheduler="plateau", patience=8, lr_patience=3,
                        validate_every=5, label_smoothing=0.1, max_len=32, beam_width=1)
