# bpe.py - Byte Pair Encoding with a shared source/target vocabulary
# Responsibility: learn merges on the training split, segment text, map subwords to ids
from __future__ import annotations
import os
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from config import BOS, BOS_ID, CONTINUATION, DEFAULT_NUM_MERGES, EOS, EOS_ID, PAD, PAD_ID, UNK, UNK_ID
from corpus import ParallelCorpus, SentencePair
from utils import EncodingError, LabError, ensure_dir, iter_lines, sha256_bytes

MERGES_HEADER = "#bpe-v1"
SPECIALS = (PAD, UNK, BOS, EOS)

Pair = Tuple[str, str]


# ========== MODEL ==========
@dataclass
class BpeModel:
    merges: Tuple[Pair, ...]
    num_merges: int
    continuation_marker: str = CONTINUATION
    _ranks: Dict[Pair, int] = field(default_factory=dict, init=False, repr=False, compare=False)
    _cache: Dict[str, Tuple[str, ...]] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.merges = tuple(tuple(m) for m in self.merges)
        if len(self.merges) > self.num_merges:
            raise LabError(f"Model holds {len(self.merges)} merges but num_merges={self.num_merges}")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        if len(self._ranks) != len(self.merges):
            raise LabError("Merge list contains a repeated pair")

    def segment_word(self, word: str) -> Tuple[str, ...]:
        """Unmarked symbols of one word after replaying the merges."""
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word)
        while len(symbols) > 1:
            ranked = [(self._ranks.get((a, b)), i) for i, (a, b) in enumerate(zip(symbols, symbols[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            best_rank = min(ranked)[0]
            pair = self.merges[best_rank]
            merged: List[str] = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        out = tuple(symbols)
        self._cache[word] = out
        return out


# ========== LEARNING ==========
def _word_counts(lines: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for line in lines:
        counts.update(line.split())
    return counts


def _pairs_of(symbols: Sequence[str]) -> Counter:
    return Counter(zip(symbols, symbols[1:]))


def _merge_symbols(symbols: Sequence[str], pair: Pair) -> Tuple[str, ...]:
    out: List[str] = []
    i = 0
    while i < len(symbols):
        if i < len(symbols) - 1 and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(train: ParallelCorpus, num_merges: int = DEFAULT_NUM_MERGES, verbose: bool = True) -> BpeModel:
    """
    Greedy most-frequent-pair merging over both sides of the training split.
    Ties go to the lexicographically smallest pair; pairs seen once are never merged.
    E.g., "low low low lower lower", 2 merges -> [("l","o"), ("lo","w")]
    """
    if len(train) == 0:
        raise LabError("Cannot learn BPE on an empty corpus")
    if num_merges < 0:
        raise LabError("num_merges must be >= 0")

    counts = _word_counts(train.sources + train.targets)
    words = [tuple(w) for w in counts]
    freqs = [counts[w] for w in counts]

    stats: Counter = Counter()
    index: Dict[Pair, set] = defaultdict(set)
    for idx, symbols in enumerate(words):
        for pair, n in _pairs_of(symbols).items():
            stats[pair] += n * freqs[idx]
            index[pair].add(idx)

    merges: List[Pair] = []
    while len(merges) < num_merges and stats:
        best, best_freq = min(stats.items(), key=lambda kv: (-kv[1], kv[0]))
        if best_freq < 2:
            break
        merges.append(best)
        for idx in sorted(index.pop(best, ())):
            old = words[idx]
            new = _merge_symbols(old, best)
            if new == old:
                continue
            for pair, n in _pairs_of(old).items():
                stats[pair] -= n * freqs[idx]
                if stats[pair] <= 0:
                    del stats[pair]
            for pair, n in _pairs_of(new).items():
                stats[pair] += n * freqs[idx]
                index[pair].add(idx)
            words[idx] = new
        stats.pop(best, None)

    if verbose:
        print(f"[BPE] learned {len(merges)} merges (requested {num_merges}) over {len(words)} word types")
    return BpeModel(tuple(merges), num_merges)


# ========== SEGMENTATION ==========
def apply_bpe(model: BpeModel, sentence: str) -> List[str]:
    """
    E.g., "lowest" -> ["low@@", "e@@", "s@@", "t"]
    """
    marker = model.continuation_marker
    tokens: List[str] = []
    for word in sentence.split():
        symbols = model.segment_word(word)
        tokens.extend(s + marker for s in symbols[:-1])
        tokens.append(symbols[-1])
    return tokens


_JOIN = re.compile(re.escape(CONTINUATION) + r"( |$)")


def decode_bpe(tokens: Sequence[str]) -> str:
    return _JOIN.sub("", " ".join(tokens))


def segment_corpus(model: BpeModel, corpus: ParallelCorpus) -> ParallelCorpus:
    return corpus.with_pairs(
        SentencePair(" ".join(apply_bpe(model, p.src)), " ".join(apply_bpe(model, p.tgt)))
        for p in corpus.pairs
    )


# ========== VOCABULARY ==========
class Vocabulary:
    """Shared subword vocabulary; ids 0-3 are pad/unk/bos/eos."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise EncodingError(f"Vocabulary must start with {SPECIALS}")
        self.id_to_token: List[str] = list(tokens)
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise EncodingError("Vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Sequence[str], add_bos: bool = False, add_eos: bool = False) -> List[int]:
        ids = [self.token_to_id.get(t, UNK_ID) for t in tokens]
        if add_bos:
            ids = [BOS_ID] + ids
        if add_eos:
            ids = ids + [EOS_ID]
        return ids

    def decode(self, ids: Iterable[int]) -> List[str]:
        """Ids back to subword tokens; stops at eos, drops pad and bos."""
        out: List[str] = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self.id_to_token[i] if 0 <= i < len(self) else UNK)
        return out

    def to_text(self) -> str:
        return "".join(f"{t}\t{i}\n" for i, t in enumerate(self.id_to_token))

    def hash(self) -> str:
        return sha256_bytes(self.to_text().encode("utf-8"))


def build_vocab(model: BpeModel, train: ParallelCorpus) -> Vocabulary:
    """
    Specials first, then every subword type of the segmented training split,
    by descending frequency then lexicographic order.
    """
    counts: Counter = Counter()
    for line in train.sources + train.targets:
        counts.update(apply_bpe(model, line))
    for special in SPECIALS:
        counts.pop(special, None)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(SPECIALS) + [t for t, _ in ordered])


# ========== FILES ==========
def save_merges(path: str, model: BpeModel) -> None:
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"{MERGES_HEADER} {model.num_merges}\n")
        for left, right in model.merges:
            f.write(f"{left} {right}\n")


def load_merges(path: str) -> BpeModel:
    lines = [raw.decode("utf-8") for raw in iter_lines(path)]
    if not lines or not lines[0].startswith(MERGES_HEADER + " "):
        raise EncodingError(f"{path}: missing '{MERGES_HEADER} <num_merges>' header")
    try:
        num_merges = int(lines[0].split()[1])
    except (IndexError, ValueError) as e:
        raise EncodingError(f"{path}: bad header {lines[0]!r}") from e
    merges: List[Pair] = []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(" ")
        if len(parts) != 2:
            raise EncodingError(f"{path}:{n}: expected 'left right', got {line!r}")
        merges.append((parts[0], parts[1]))
    return BpeModel(tuple(merges), num_merges)


def save_vocab(path: str, vocab: Vocabulary) -> None:
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(vocab.to_text())


def load_vocab(path: str) -> Vocabulary:
    tokens: List[Optional[str]] = []
    for n, raw in enumerate(iter_lines(path), start=1):
        token, sep, idx = raw.decode("utf-8").rpartition("\t")
        if not sep:
            raise EncodingError(f"{path}:{n}: expected 'token<TAB>id'")
        if int(idx) != len(tokens):
            raise EncodingError(f"{path}:{n}: ids must be dense and ordered")
        tokens.append(token)
    return Vocabulary(tokens)
