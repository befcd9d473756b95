# decoding.py - Greedy and beam-search decoding, end-to-end translation
# Responsibility: turn a model (or any next-token scorer) into token sequences and text
from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import Tensor
from bpe import BpeModel, Vocabulary, apply_bpe, decode_bpe, load_merges, load_vocab
from config import BOS_ID, EOS_ID, LENGTH_ALPHA, MAX_LEN
from corpus import normalize_text
from transformer import TransformerModel, gather_ids, load_model
from utils import ConfigError, IntegrityError

# prefixes (n, t) -> next-token log-probabilities (n, vocab)
StepFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]     # bos-prefixed
    logprob: float
    finished: bool

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def score(self, alpha: float = LENGTH_ALPHA) -> float:
        return self.logprob / (max(self.length, 1) ** alpha)

    def output_ids(self) -> List[int]:
        """Generated ids without bos and without the closing eos."""
        out = list(self.tokens[1:])
        return out[:-1] if out and out[-1] == EOS_ID else out

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "logprob": self.logprob, "finished": self.finished}


def _is_done(tokens: Tuple[int, ...], max_len: int, eos: int) -> bool:
    return tokens[-1] == eos or len(tokens) - 1 >= max_len


# ========== CORE SEARCH ==========
def greedy_core(step_fn: StepFn, max_len: int, bos: int = BOS_ID, eos: int = EOS_ID) -> Hypothesis:
    tokens: Tuple[int, ...] = (bos,)
    logprob = 0.0
    while True:
        logp = step_fn(np.asarray([tokens], dtype=np.int64))[0]
        nxt = int(np.argmax(logp))
        logprob += float(logp[nxt])
        tokens = tokens + (nxt,)
        if _is_done(tokens, max_len, eos):
            return Hypothesis(tokens, logprob, True)


def _rank_key(h: Hypothesis, alpha: float):
    return (-h.score(alpha), h.length, h.tokens)


def beam_core(step_fn: StepFn, width: int, max_len: int, length_alpha: float = LENGTH_ALPHA,
              bos: int = BOS_ID, eos: int = EOS_ID) -> List[Hypothesis]:
    """
    Shrinking beam: each step keeps the top `width - |completed|` extensions by
    cumulative log-prob (ties: smaller token ids); finished ones move to the
    completed pool. Returns completed hypotheses, best first.
    """
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")

    beams = [Hypothesis((bos,), 0.0, False)]
    completed: List[Hypothesis] = []
    while beams and len(completed) < width:
        budget = width - len(completed)
        logp = step_fn(np.asarray([h.tokens for h in beams], dtype=np.int64))
        totals = np.asarray([h.logprob for h in beams])[:, None] + logp
        flat = totals.reshape(-1)
        k = min(budget, flat.size)
        cutoff = np.partition(flat, flat.size - k)[flat.size - k]
        picked = np.flatnonzero(flat >= cutoff)
        V = logp.shape[1]
        candidates = sorted(
            (Hypothesis(beams[i // V].tokens + (int(i % V),), float(flat[i]), False) for i in picked),
            key=lambda h: (-h.logprob, h.tokens),
        )[:k]

        beams = []
        for h in candidates:
            if _is_done(h.tokens, max_len, eos):
                completed.append(Hypothesis(h.tokens, h.logprob, True))
            else:
                beams.append(h)
    return sorted(completed, key=lambda h: _rank_key(h, length_alpha))


# ========== MODEL DECODING ==========
def _model_step(model: TransformerModel, memory: Tensor, mask: np.ndarray) -> StepFn:
    def step(prefixes: np.ndarray) -> np.ndarray:
        n = prefixes.shape[0]
        mem = Tensor(np.repeat(memory.data, n, axis=0))
        return model.next_log_probs(mem, np.repeat(mask, n, axis=0), prefixes)
    return step


def _cap(model: TransformerModel, max_len: Optional[int]) -> int:
    cap = model.config.max_len
    return cap if max_len is None else min(max_len, cap)


def greedy_decode(model: TransformerModel, src_ids: Sequence[int], max_len: Optional[int] = None) -> Hypothesis:
    """Argmax decoding until eos or max_len (then flagged finished)."""
    memory, mask = model.encode(np.asarray([list(src_ids)], dtype=np.int64))
    return greedy_core(_model_step(model, memory, mask), _cap(model, max_len))


def beam_search(model: TransformerModel, src_ids: Sequence[int], width: int = 5,
                max_len: Optional[int] = None, length_alpha: float = LENGTH_ALPHA) -> Hypothesis:
    memory, mask = model.encode(np.asarray([list(src_ids)], dtype=np.int64))
    return beam_core(_model_step(model, memory, mask), width, _cap(model, max_len), length_alpha)[0]


def greedy_batch(model: TransformerModel, sources: Sequence[Sequence[int]],
                 max_len: Optional[int] = None) -> List[List[int]]:
    """Batched argmax decoding for validation; returns generated ids without bos/eos."""
    if not sources:
        return []
    cap = _cap(model, max_len)
    memory, mask = model.encode(gather_ids([list(s) for s in sources]))
    n = len(sources)
    prefixes = np.full((n, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    outputs: List[List[int]] = [[] for _ in range(n)]
    for _ in range(cap):
        logp = model.next_log_probs(memory, mask, prefixes)
        nxt = logp.argmax(axis=-1)
        for i in np.flatnonzero(~done):
            if nxt[i] == EOS_ID:
                done[i] = True
            else:
                outputs[i].append(int(nxt[i]))
        if done.all():
            break
        nxt = np.where(done, 0, nxt)
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
    return outputs


# ========== TRANSLATION ==========
def encode_source(bpe: BpeModel, vocab: Vocabulary, sentence: str, max_len: int = MAX_LEN) -> List[int]:
    ids = vocab.encode(apply_bpe(bpe, normalize_text(sentence)))[: max_len - 1]
    return ids + [EOS_ID]


def translate_tokens(model: TransformerModel, bpe: BpeModel, vocab: Vocabulary, sentence: str,
                     beam_width: int = 1, max_len: Optional[int] = None, length_alpha: float = LENGTH_ALPHA,
                     expected_vocab_hash: Optional[str] = None) -> List[str]:
    """apply_bpe -> ids -> greedy/beam decode -> output subword tokens."""
    if expected_vocab_hash is not None and expected_vocab_hash != vocab.hash():
        raise IntegrityError("Vocabulary does not match the checkpoint (vocab hash differs)")
    if model.config.vocab_size != len(vocab):
        raise IntegrityError(f"Model expects {model.config.vocab_size} tokens, vocabulary has {len(vocab)}")
    if not normalize_text(sentence):
        return []
    src = encode_source(bpe, vocab, sentence, model.config.max_len)
    if beam_width <= 1:
        hyp = greedy_decode(model, src, max_len)
    else:
        hyp = beam_search(model, src, beam_width, max_len, length_alpha)
    return vocab.decode(hyp.output_ids())


def translate(model: TransformerModel, bpe: BpeModel, vocab: Vocabulary, sentence: str,
              beam_width: int = 1, max_len: Optional[int] = None, length_alpha: float = LENGTH_ALPHA,
              expected_vocab_hash: Optional[str] = None) -> str:
    return decode_bpe(translate_tokens(model, bpe, vocab, sentence, beam_width, max_len, length_alpha,
                                       expected_vocab_hash))


class Translator:
    """A checkpoint with the segmentation artifacts it was trained with."""

    def __init__(self, model: TransformerModel, bpe: BpeModel, vocab: Vocabulary,
                 vocab_hash: Optional[str] = None):
        self.model = model
        self.bpe = bpe
        self.vocab = vocab
        self.vocab_hash = vocab_hash or vocab.hash()
        if self.vocab_hash != vocab.hash():
            raise IntegrityError("Vocabulary does not match the checkpoint (vocab hash differs)")

    @classmethod
    def from_paths(cls, checkpoint_path: str, merges_path: str, vocab_path: str) -> "Translator":
        vocab = load_vocab(vocab_path)
        model, manifest = load_model(checkpoint_path, vocab.hash())
        return cls(model, load_merges(merges_path), vocab, manifest.get("vocab_hash"))

    def translate(self, sentence: str, beam_width: int = 1, max_len: Optional[int] = None,
                  length_alpha: float = LENGTH_ALPHA) -> str:
        return translate(self.model, self.bpe, self.vocab, sentence, beam_width, max_len,
                         length_alpha, self.vocab_hash)

    def translate_tokens(self, sentence: str, beam_width: int = 1, max_len: Optional[int] = None,
                         length_alpha: float = LENGTH_ALPHA) -> List[str]:
        return translate_tokens(self.model, self.bpe, self.vocab, sentence, beam_width, max_len,
                                length_alpha, self.vocab_hash)

    def translate_many(self, sentences: Sequence[str], beam_width: int = 1,
                       max_len: Optional[int] = None, length_alpha: float = LENGTH_ALPHA) -> List[str]:
        if beam_width <= 1:
            srcs = [encode_source(self.bpe, self.vocab, s, self.model.config.max_len) for s in sentences]
            outs = greedy_batch(self.model, srcs, max_len)
            return [decode_bpe(self.vocab.decode(o)) if normalize_text(s) else ""
                    for s, o in zip(sentences, outs)]
        return [self.translate(s, beam_width, max_len, length_alpha) for s in sentences]
