# evaluation.py - Translation metrics and embedding-space analysis
# Responsibility: corpus BLEU / chrF, PCA projections, cosine histograms, report tables
from __future__ import annotations
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import HIST_BINS, PCA_MAX_ITER, PCA_TOL
from utils import ConfigError, DimensionError, LabError, ensure_dir, rng_for, write_json

NGRAM_ORDER = 4
CHRF_ORDER = 6
CHRF_BETA = 2
SMOOTH_VALUE_DEFAULT = {"floor": 0.1, "add-k": 1}


# ========== REPORTS ==========
@dataclass
class EvalReport:
    bleu_percent: float
    chrf_score: float
    n_sentences: int
    brevity_penalty: float
    precisions: List[float]
    sys_len: int = 0
    ref_len: int = 0
    per_sentence: Optional[List[float]] = None

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


# ========== BLEU ==========
def extract_ngrams(tokens: Sequence[str], max_order: int = NGRAM_ORDER) -> Counter:
    counts: Counter = Counter()
    for n in range(1, max_order + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


def _check_pairs(hypotheses: Sequence[str], references: Sequence[str]) -> None:
    if len(hypotheses) == 0:
        raise LabError("Cannot score an empty hypothesis list")
    if len(hypotheses) != len(references):
        raise DimensionError(f"{len(hypotheses)} hypotheses vs {len(references)} references")


def bleu_stats(hypotheses: Sequence[str], references: Sequence[str]) -> Tuple[List[int], List[int], int, int]:
    """Clipped n-gram matches, n-gram totals, hypothesis length, reference length."""
    correct = [0] * NGRAM_ORDER
    total = [0] * NGRAM_ORDER
    sys_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        sys_len += len(h)
        ref_len += len(r)
        h_ngrams = extract_ngrams(h)
        r_ngrams = extract_ngrams(r)
        for ngram, count in h_ngrams.items():
            n = len(ngram)
            total[n - 1] += count
            correct[n - 1] += min(count, r_ngrams.get(ngram, 0))
    return correct, total, sys_len, ref_len


def compute_bleu(correct: List[int], total: List[int], sys_len: int, ref_len: int,
                 smooth_method: str = "none", smooth_value: Optional[float] = None
                 ) -> Tuple[float, List[float], float]:
    """
    BLEU from sufficient statistics -> (percent, precisions, brevity penalty).
    Smoothing: none | floor | add-k | exp.
    Orders with no hypothesis n-grams at all are dropped from the geometric mean
    (effective order), so "a b c" vs "a b c" scores 100.
    """
    if smooth_method not in ("none", "floor", "add-k", "exp"):
        raise ConfigError(f"Unknown smoothing method '{smooth_method}'")
    if smooth_value is None:
        smooth_value = SMOOTH_VALUE_DEFAULT.get(smooth_method, 0)
    correct, total = list(correct), list(total)

    precisions = [0.0] * NGRAM_ORDER
    smooth_mteval = 1.0
    effective_order = NGRAM_ORDER
    for n in range(1, NGRAM_ORDER + 1):
        if smooth_method == "add-k" and n > 1:
            correct[n - 1] += smooth_value
            total[n - 1] += smooth_value
        if total[n - 1] == 0:
            effective_order = n - 1
            break
        if correct[n - 1] == 0:
            if smooth_method == "exp":
                smooth_mteval *= 2
                precisions[n - 1] = 1.0 / (smooth_mteval * total[n - 1])
            elif smooth_method == "floor":
                precisions[n - 1] = smooth_value / total[n - 1]
        else:
            precisions[n - 1] = correct[n - 1] / total[n - 1]

    bp = 1.0
    if sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len) if sys_len > 0 else 0.0

    if effective_order == 0:
        # no hypothesis tokens: only empty vs empty is a match
        return (100.0 if ref_len == 0 else 0.0), precisions, bp
    used = precisions[:effective_order]
    if any(p <= 0.0 for p in used):
        return 0.0, precisions, bp
    score = bp * math.exp(sum(math.log(p) for p in used) / effective_order)
    return 100.0 * score, precisions, bp


def bleu(hypotheses: Sequence[str], references: Sequence[str], smooth_method: str = "none",
         per_sentence: bool = False) -> EvalReport:
    """
    Corpus BLEU over whitespace tokens, clipped 1..4-gram precisions, no smoothing by default.
    E.g., "the the the the the the the" vs "the cat is on the mat" -> p1 = 2/7
    """
    _check_pairs(hypotheses, references)
    correct, total, sys_len, ref_len = bleu_stats(hypotheses, references)
    score, precisions, bp = compute_bleu(correct, total, sys_len, ref_len, smooth_method)
    sentences = None
    if per_sentence:
        sentences = [sentence_bleu(h, r, smooth_method if smooth_method != "none" else "floor")
                     for h, r in zip(hypotheses, references)]
    return EvalReport(
        bleu_percent=score,
        chrf_score=chrf(hypotheses, references),
        n_sentences=len(hypotheses),
        brevity_penalty=bp,
        precisions=precisions,
        sys_len=sys_len,
        ref_len=ref_len,
        per_sentence=sentences,
    )


def sentence_bleu(hypothesis: str, reference: str, smooth_method: str = "floor",
                  smooth_value: Optional[float] = None) -> float:
    correct, total, sys_len, ref_len = bleu_stats([hypothesis], [reference])
    score, _, _ = compute_bleu(correct, total, sys_len, ref_len, smooth_method, smooth_value)
    return score


# ========== chrF ==========
def _strip_spaces(text: str) -> str:
    return "".join(text.split())


def extract_char_ngrams(s: str, n: int) -> Counter:
    return Counter(s[i:i + n] for i in range(len(s) - n + 1))


def chrf_stats(hypotheses: Sequence[str], references: Sequence[str],
               order: int = CHRF_ORDER) -> List[Tuple[int, int, int]]:
    """Per order n: (hypothesis n-grams, reference n-grams, common n-grams), summed over the corpus."""
    stats = [[0, 0, 0] for _ in range(order)]
    for hyp, ref in zip(hypotheses, references):
        h, r = _strip_spaces(hyp), _strip_spaces(ref)
        for i in range(order):
            hn = extract_char_ngrams(h, i + 1)
            rn = extract_char_ngrams(r, i + 1)
            stats[i][0] += sum(hn.values())
            stats[i][1] += sum(rn.values())
            stats[i][2] += sum((hn & rn).values())
    return [tuple(s) for s in stats]


def chrf(hypotheses: Sequence[str], references: Sequence[str], order: int = CHRF_ORDER,
         beta: float = CHRF_BETA) -> float:
    """
    Character n-gram F-score (n <= 6, beta = 2) on whitespace-free text, 0..100.
    E.g., "abcd" vs "abce" -> P1 = R1 = 3/4
    """
    _check_pairs(hypotheses, references)
    precision = recall = 0.0
    effective = 0
    stats = chrf_stats(hypotheses, references, order)
    for hyp_n, ref_n, common in stats:
        if hyp_n > 0 and ref_n > 0:
            precision += common / hyp_n
            recall += common / ref_n
            effective += 1
    if effective == 0:
        both_empty = stats[0][0] == 0 and stats[0][1] == 0
        return 100.0 if both_empty else 0.0
    precision /= effective
    recall /= effective
    if precision + recall == 0:
        return 0.0
    b2 = beta ** 2
    return 100.0 * (1 + b2) * precision * recall / (b2 * precision + recall)


def benchmark_table(reports: Dict[str, EvalReport]) -> pd.DataFrame:
    """One row per named test set."""
    rows = [{"benchmark": name, "n_sentences": r.n_sentences, "bleu": round(r.bleu_percent, 2),
             "chrf": round(r.chrf_score, 2)} for name, r in reports.items()]
    return pd.DataFrame(rows, columns=["benchmark", "n_sentences", "bleu", "chrf"])


def smooth(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average over complete windows."""
    arr = np.asarray(values, dtype=np.float64)
    if window <= 1 or arr.size == 0:
        return arr
    if arr.size < window:
        return np.asarray([arr.mean()])
    return np.convolve(arr, np.ones(window) / window, mode="valid")


# ========== PCA ==========
@dataclass
class PcaResult:
    projections: np.ndarray             # (n, 2)
    explained_variance_ratio: np.ndarray
    components: np.ndarray              # (2, d)
    degenerate: bool = False
    iterations: List[int] = field(default_factory=list)

    def to_frame(self, labels: Optional[Sequence[str]] = None) -> pd.DataFrame:
        df = pd.DataFrame({"x": self.projections[:, 0], "y": self.projections[:, 1]})
        df["label"] = list(labels) if labels is not None else ""
        return df


def _power_iteration(cov: np.ndarray, orth: Optional[np.ndarray], tol: float, max_iter: int,
                     seed: int) -> Tuple[np.ndarray, int]:
    v = rng_for(seed).standard_normal(cov.shape[0])
    if orth is not None:
        v -= orth * (orth @ v)
    v /= np.linalg.norm(v)
    for it in range(1, max_iter + 1):
        w = cov @ v
        if orth is not None:
            w -= orth * (orth @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, it
        w /= norm
        if np.linalg.norm(w - v) < tol:
            return w, it
        v = w
    return v, max_iter


def _orient(v: np.ndarray) -> np.ndarray:
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def pca2(embeddings: np.ndarray, tol: float = PCA_TOL, max_iter: int = PCA_MAX_ITER) -> PcaResult:
    """
    Top-2 principal components by power iteration with deflation.
    Each component's largest-magnitude entry is made positive.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise DimensionError(f"pca2 needs an n x d matrix with n >= 3 and d >= 2, got {X.shape}")
    Xc = X - X.mean(axis=0, keepdims=True)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    trace = float(np.trace(cov))

    v1, it1 = _power_iteration(cov, None, tol, max_iter, seed=1)
    lam1 = float(v1 @ cov @ v1)
    deflated = cov - lam1 * np.outer(v1, v1)
    v2, it2 = _power_iteration(deflated, v1, tol, max_iter, seed=2)
    lam2 = max(float(v2 @ cov @ v2), 0.0)

    degenerate = trace <= 0.0 or lam2 <= tol * max(lam1, 1e-300)
    v1, v2 = _orient(v1), _orient(v2)
    components = np.stack([v1, v2])
    ratios = np.asarray([lam1, lam2]) / trace if trace > 0 else np.zeros(2)
    return PcaResult(projections=Xc @ components.T, explained_variance_ratio=ratios,
                     components=components, degenerate=bool(degenerate), iterations=[it1, it2])


# ========== COSINE HISTOGRAM ==========
@dataclass
class CosineHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    median: float
    n_pairs: int
    flagged: int
    cosines: np.ndarray

    def to_dict(self) -> Dict[str, object]:
        return {"edges": self.edges.tolist(), "counts": self.counts.tolist(), "mean": self.mean,
                "median": self.median, "n_pairs": self.n_pairs, "flagged": self.flagged}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"left": self.edges[:-1], "right": self.edges[1:], "count": self.counts})


def pair_cosines(src: np.ndarray, tgt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Cosine per row pair and a boolean mask of pairs involving a zero vector."""
    a = np.asarray(src, dtype=np.float64)
    b = np.asarray(tgt, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"cosine needs equal (n, d) matrices, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    cos = np.zeros(a.shape[0])
    ok = ~zero
    cos[ok] = np.clip((a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok]), -1.0, 1.0)
    return cos, zero


def cosine_hist(src: np.ndarray, tgt: np.ndarray, bins: int = HIST_BINS) -> CosineHistogram:
    cos, zero = pair_cosines(src, tgt)
    kept = cos[~zero]
    counts, edges = np.histogram(kept, bins=bins, range=(-1.0, 1.0))
    return CosineHistogram(
        edges=edges,
        counts=counts,
        mean=float(kept.mean()) if kept.size else 0.0,
        median=float(np.median(kept)) if kept.size else 0.0,
        n_pairs=int(cos.size),
        flagged=int(zero.sum()),
        cosines=kept,
    )


# ========== EXPORTS ==========
def write_report(path: str, report: EvalReport) -> None:
    write_json(path, report.to_dict())


def write_pca(csv_path: str, result: PcaResult, labels: Optional[Sequence[str]] = None) -> None:
    parent = os.path.dirname(csv_path)
    if parent:
        ensure_dir(parent)
    result.to_frame(labels).to_csv(csv_path, index=False)
    write_json(os.path.splitext(csv_path)[0] + ".json", {
        "explained_variance_ratio": result.explained_variance_ratio.tolist(),
        "components": result.components.tolist(),
        "degenerate": result.degenerate,
    })


def write_histogram(json_path: str, hist: CosineHistogram) -> None:
    write_json(json_path, hist.to_dict())
    hist.to_frame().to_csv(os.path.splitext(json_path)[0] + ".csv", index=False)
