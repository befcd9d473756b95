# corpus.py - Parallel corpus ingestion, cleaning, splitting and export
# Responsibility: everything that happens to sentence pairs before segmentation
from __future__ import annotations
import math
import os
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import DEFAULT_SYSTEM_PROMPT, SPLIT_RATIOS, PreprocessSection
from utils import ConfigError, LabError, ensure_dir, iter_lines, write_json, write_jsonl


# ========== DOMAIN TYPES ==========
@dataclass(frozen=True)
class SentencePair:
    src: str
    tgt: str

    def key(self) -> Tuple[str, str]:
        return (self.src, self.tgt)


@dataclass(frozen=True)
class ParallelCorpus:
    pairs: Tuple[SentencePair, ...]
    src_lang: str = "fr"
    tgt_lang: str = "bm"

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> List[str]:
        return [p.src for p in self.pairs]

    @property
    def targets(self) -> List[str]:
        return [p.tgt for p in self.pairs]

    def with_pairs(self, pairs: Iterable[SentencePair]) -> "ParallelCorpus":
        return ParallelCorpus(tuple(pairs), self.src_lang, self.tgt_lang)


@dataclass(frozen=True)
class SplitCorpus:
    train: ParallelCorpus
    valid: ParallelCorpus
    test: ParallelCorpus
    seed: int

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


@dataclass(frozen=True)
class InstructionRecord:
    system: str
    user: str
    assistant: str

    def to_dict(self) -> Dict[str, str]:
        return {"system": self.system, "user": self.user, "assistant": self.assistant}


RULES = ("encoding", "link", "repetition", "empty", "duplicate")


@dataclass
class CleanReport:
    input_count: int
    dropped_by_rule: Dict[str, int] = field(default_factory=lambda: {r: 0 for r in RULES})
    output_count: int = 0

    def to_dict(self) -> Dict[str, object]:
        return {
            "input_count": self.input_count,
            "dropped_by_rule": dict(self.dropped_by_rule),
            "output_count": self.output_count,
        }


# ========== PATTERNS ==========
_UNWANTED_CHARS = re.compile(r"[«»<>{}]")
_SPACE_BEFORE_PUNCT = re.compile(r"\s+([,.;:!?])")
_NO_SPACE_AFTER_COMMA = re.compile(r"([,;])(?=[^\W\d_])")
_WHITESPACE = re.compile(r"\s+")
_LINK = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_ENUM_MARKER = re.compile(r"^\s*([0-9]+|[a-z])[).]\s+")
_EMOJI = re.compile(
    "["
    "\U0001F000-\U0001FAFF"
    "\U00002600-\U000027BF"
    "\U00002B00-\U00002BFF"
    "\U0000FE0F"
    "\U0000200D"
    "]"
)


def _squeeze(text: str) -> str:
    return _WHITESPACE.sub(" ", text).strip()


# ========== TEXT RULES ==========
def normalize_text(text: str) -> str:
    """
    Fix punctuation, remove extra spaces and unwanted characters.
    Spaces before ,.;:!? are dropped; a space is added only after , and ; so that
    "www.mali.ml", "https://..." and decimals like "3.5" stay intact for link detection.
    E.g., "bonjour ,  monde" -> "bonjour, monde"
    E.g., "«texte»" -> "texte"
    """
    if not text:
        return ""
    t = unicodedata.normalize("NFC", text)
    t = _UNWANTED_CHARS.sub("", t)
    t = _squeeze(t)
    t = _SPACE_BEFORE_PUNCT.sub(r"\1", t)
    t = _NO_SPACE_AFTER_COMMA.sub(r"\1 ", t)
    return t.strip()


def has_link(text: str) -> bool:
    return bool(_LINK.search(text or ""))


def _repetition_pattern(threshold: int) -> re.Pattern:
    return re.compile(r"([^\W\d_])\1{%d,}" % (threshold - 1))


_REPETITION = _repetition_pattern(4)


def has_anomalous_repetition(text: str, threshold: int = 4) -> bool:
    """True iff one alphabetic character repeats `threshold` times in a row ("loooool")."""
    pattern = _REPETITION if threshold == 4 else _repetition_pattern(threshold)
    return bool(pattern.search(text or ""))


def _strip_markers(text: str) -> str:
    while _ENUM_MARKER.match(text):
        text = _ENUM_MARKER.sub("", text, count=1)
    return text


def _clean_once(src: str, tgt: str) -> Tuple[str, str]:
    # emoji before markers: "🙏 1) Un" has a marker only once the emoji is gone
    src_emoji = set(_EMOJI.findall(src))
    tgt_emoji = set(_EMOJI.findall(tgt))
    only_src = src_emoji - tgt_emoji
    only_tgt = tgt_emoji - src_emoji
    if only_src:
        src = normalize_text("".join(ch for ch in src if ch not in only_src))
    if only_tgt:
        tgt = normalize_text("".join(ch for ch in tgt if ch not in only_tgt))

    src_marked = bool(_ENUM_MARKER.match(src))
    tgt_marked = bool(_ENUM_MARKER.match(tgt))
    if src_marked and not tgt_marked:
        src = _strip_markers(src)
    elif tgt_marked and not src_marked:
        tgt = _strip_markers(tgt)
    return normalize_text(src), normalize_text(tgt)


def clean_pair(pair: SentencePair) -> SentencePair:
    """
    Remove enumeration markers and emojis that appear on only one side of the pair.
    Repeated until nothing changes, so a cleaned pair is its own fixed point.
    E.g., ("1) Lavez les mains", "I tɛgɛ ko") -> ("Lavez les mains", "I tɛgɛ ko")
    E.g., ("Merci 🙏", "A ni ce") -> ("Merci", "A ni ce")
    E.g., ("🙏 1) Un", "Kelen") -> ("Un", "Kelen")
    """
    src, tgt = normalize_text(pair.src), normalize_text(pair.tgt)
    # a changing pass removes an emoji or a marker; normalization never adds one
    while True:
        cleaned = _clean_once(src, tgt)
        if cleaned == (src, tgt):
            return SentencePair(src, tgt)
        src, tgt = cleaned


def _dropped_by(pair: SentencePair, rules: PreprocessSection) -> Optional[str]:
    if rules.drop_links and (has_link(pair.src) or has_link(pair.tgt)):
        return "link"
    if rules.drop_repetition and (
        has_anomalous_repetition(pair.src, rules.repetition_threshold)
        or has_anomalous_repetition(pair.tgt, rules.repetition_threshold)
    ):
        return "repetition"
    return None


def preprocess(
    corpus: ParallelCorpus,
    rules: Optional[PreprocessSection] = None,
    encoding_skipped: int = 0,
    verbose: bool = True,
) -> Tuple[ParallelCorpus, CleanReport]:
    """
    Order: normalize -> link -> repetition -> clean_pair -> link/repetition again -> empty -> duplicate.
    A pair is counted under the first rule that drops it. The output is a fixed point:
    preprocessing it again keeps every pair unchanged.
    """
    rules = rules or PreprocessSection()
    report = CleanReport(input_count=len(corpus) + encoding_skipped)
    report.dropped_by_rule["encoding"] = encoding_skipped

    seen = set()
    kept: List[SentencePair] = []
    for pair in corpus.pairs:
        p = SentencePair(normalize_text(pair.src), normalize_text(pair.tgt))
        rule = _dropped_by(p, rules)
        if rule is None and rules.clean_pairs:
            p = clean_pair(p)
            # emoji removal can join letters into a run
            rule = _dropped_by(p, rules)
        if rule is not None:
            report.dropped_by_rule[rule] += 1
            continue
        if not p.src or not p.tgt:
            report.dropped_by_rule["empty"] += 1
            continue
        if rules.dedup:
            if p.key() in seen:
                report.dropped_by_rule["duplicate"] += 1
                continue
            seen.add(p.key())
        kept.append(p)

    report.output_count = len(kept)
    if verbose:
        print(f"[Corpus] kept {report.output_count}/{report.input_count} pairs "
              f"(dropped: {report.dropped_by_rule})")
    return corpus.with_pairs(kept), report


# ========== SPLITTING ==========
def split(corpus: ParallelCorpus, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0) -> SplitCorpus:
    """
    Deterministic shuffle under `seed`, then a contiguous partition.
    train = floor(r_train * N); valid = round(r_valid * N); test takes the rest.
    E.g., 353629 pairs -> (282903, 35363, 35363)
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three values summing to 1.0, got {list(ratios)}")
    n = len(corpus)
    if n == 0:
        raise ConfigError("Cannot split an empty corpus")

    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_valid = min(int(round(ratios[1] * n)), n - n_train)

    ordered = [corpus.pairs[i] for i in perm]
    return SplitCorpus(
        train=corpus.with_pairs(ordered[:n_train]),
        valid=corpus.with_pairs(ordered[n_train:n_train + n_valid]),
        test=corpus.with_pairs(ordered[n_train + n_valid:]),
        seed=seed,
    )


def corpus_stats(parts: SplitCorpus) -> pd.DataFrame:
    """Sentence and whitespace-token counts per split and side, plus a total row."""
    rows = []
    for name, part in (("train", parts.train), ("valid", parts.valid), ("test", parts.test)):
        rows.append({
            "split": name,
            "sentences": len(part),
            f"{part.src_lang}_tokens": sum(len(s.split()) for s in part.sources),
            f"{part.tgt_lang}_tokens": sum(len(t.split()) for t in part.targets),
        })
    df = pd.DataFrame(rows)
    total = df.drop(columns=["split"]).sum(numeric_only=True)
    total["split"] = "total"
    return pd.concat([df, total.to_frame().T], ignore_index=True)[df.columns]


def mix_corpora(sources: Sequence[Tuple[ParallelCorpus, float]], n: int, seed: int) -> ParallelCorpus:
    """Weighted sampling with replacement across corpora (e.g. half en-bm, half fr-bm)."""
    if not sources:
        raise ConfigError("mix_corpora needs at least one corpus")
    weights = np.asarray([w for _, w in sources], dtype=np.float64)
    if np.any(weights <= 0) or any(len(c) == 0 for c, _ in sources):
        raise ConfigError("mix weights must be positive and corpora non-empty")
    rng = np.random.default_rng(seed)
    which = rng.choice(len(sources), size=n, p=weights / weights.sum())
    pairs = []
    for k in which:
        corpus = sources[k][0]
        pairs.append(corpus.pairs[int(rng.integers(len(corpus)))])
    first = sources[0][0]
    return ParallelCorpus(tuple(pairs), first.src_lang, first.tgt_lang)


# ========== INSTRUCTION EXPORT ==========
def to_instruction(pair: SentencePair, system_prompt: str = DEFAULT_SYSTEM_PROMPT) -> InstructionRecord:
    if not pair.src or not pair.tgt:
        raise LabError("Instruction records need both sides non-empty")
    return InstructionRecord(system=system_prompt, user=pair.src, assistant=pair.tgt)


def write_instructions(path: str, corpus: ParallelCorpus, system_prompt: str = DEFAULT_SYSTEM_PROMPT) -> int:
    records = [to_instruction(p, system_prompt).to_dict() for p in corpus.pairs]
    write_jsonl(path, records)
    return len(records)


# ========== SYNTHETIC CORPUS ==========
_SRC_CONSONANTS = "bdfklmnprstv"
_SRC_VOWELS = "aeiou"
_TGT_CONSONANTS = "bdgjklmnsty"
_TGT_VOWELS = "aeiouɛɔ"


def _lexicon(rng: np.random.Generator, size: int, consonants: str, vowels: str) -> List[str]:
    syllables = [c + v for c in consonants for v in vowels]
    words: List[str] = []
    seen = set()
    while len(words) < size:
        w = "".join(syllables[int(i)] for i in rng.integers(len(syllables), size=2))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def synthetic_lexicon(seed: int, vocab_size: int) -> Dict[str, str]:
    """The fixed bijective source-word -> target-word substitution used by gen_synthetic."""
    rng = np.random.default_rng([seed, vocab_size, 7])
    src_words = _lexicon(rng, vocab_size, _SRC_CONSONANTS, _SRC_VOWELS)
    tgt_words = _lexicon(rng, vocab_size, _TGT_CONSONANTS, _TGT_VOWELS)
    perm = rng.permutation(vocab_size)
    return {src_words[i]: tgt_words[int(perm[i])] for i in range(vocab_size)}


def synthetic_transform(words: Sequence[str], mapping: Dict[str, str]) -> List[str]:
    """Word-reverse, then substitute. E.g., ["a","b","c"] with a->α.. -> ["γ","β","α"]"""
    return [mapping[w] for w in reversed(words)]


def invert_synthetic(words: Sequence[str], mapping: Dict[str, str]) -> List[str]:
    inverse = {v: k for k, v in mapping.items()}
    return [inverse[w] for w in reversed(words)]


def gen_synthetic(n: int, seed: int, vocab_size: int = 20, min_words: int = 3,
                  max_words: int = 6) -> ParallelCorpus:
    if n < 1 or vocab_size < 4:
        raise ConfigError("gen_synthetic needs n >= 1 and vocab_size >= 4")
    if min_words > max_words:
        raise ConfigError("min_words must not exceed max_words")
    mapping = synthetic_lexicon(seed, vocab_size)
    src_words = list(mapping.keys())
    rng = np.random.default_rng([seed, n, vocab_size])
    pairs = []
    for _ in range(n):
        length = int(rng.integers(min_words, max_words + 1))
        words = [src_words[int(i)] for i in rng.integers(vocab_size, size=length)]
        pairs.append(SentencePair(" ".join(words), " ".join(synthetic_transform(words, mapping))))
    return ParallelCorpus(tuple(pairs), "fr-syn", "bm-syn")


# ========== FILE I/O ==========
def _decode(raw: bytes) -> Optional[str]:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return None


def read_tsv(path: str, src_lang: str = "fr", tgt_lang: str = "bm") -> Tuple[ParallelCorpus, int]:
    """Read `src<TAB>tgt` lines. Returns the corpus and the number of undecodable records."""
    pairs, skipped = [], 0
    for raw in iter_lines(path):
        line = _decode(raw)
        if line is None:
            skipped += 1
            continue
        if not line.strip():
            continue
        src, _, tgt = line.partition("\t")
        pairs.append(SentencePair(src, tgt))
    return ParallelCorpus(tuple(pairs), src_lang, tgt_lang), skipped


def read_pair_files(src_path: str, tgt_path: str, src_lang: str = "fr",
                    tgt_lang: str = "bm") -> Tuple[ParallelCorpus, int]:
    """Read two line-aligned files; a record is skipped if either side fails to decode."""
    src_lines = list(iter_lines(src_path))
    tgt_lines = list(iter_lines(tgt_path))
    if len(src_lines) != len(tgt_lines):
        raise LabError(f"Line counts differ: {src_path}={len(src_lines)} {tgt_path}={len(tgt_lines)}")
    pairs, skipped = [], 0
    for s_raw, t_raw in zip(src_lines, tgt_lines):
        s, t = _decode(s_raw), _decode(t_raw)
        if s is None or t is None:
            skipped += 1
            continue
        pairs.append(SentencePair(s, t))
    return ParallelCorpus(tuple(pairs), src_lang, tgt_lang), skipped


def write_tsv(path: str, corpus: ParallelCorpus) -> None:
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in corpus.pairs:
            f.write(f"{p.src}\t{p.tgt}\n")


def write_pair_files(src_path: str, tgt_path: str, corpus: ParallelCorpus) -> None:
    for path, side in ((src_path, corpus.sources), (tgt_path, corpus.targets)):
        parent = os.path.dirname(path)
        if parent:
            ensure_dir(parent)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for line in side:
                f.write(line + "\n")


def read_lines(path: str) -> List[str]:
    return [raw.decode("utf-8", errors="replace") for raw in iter_lines(path)]


def write_report(path: str, report: CleanReport) -> None:
    write_json(path, report.to_dict())
