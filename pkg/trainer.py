# trainer.py - Token-batched training loop with validation and early stopping
# Responsibility: TrainRun bookkeeping, batching, checkpoints of the best model
from __future__ import annotations
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import autodiff as ad
from autodiff import LrSchedule, Optimizer, Tape
from bpe import BpeModel, Vocabulary, apply_bpe, decode_bpe
from config import BOS_ID, EOS_ID, PAD_ID, TrainSection
from corpus import ParallelCorpus, SplitCorpus
from decoding import greedy_batch
from evaluation import bleu, chrf
from transformer import TransformerModel, gather_ids, load_model, save_model
from utils import NumericError, ensure_dir, rng_for, write_jsonl

EncodedPair = Tuple[List[int], List[int]]
Validator = Callable[[TransformerModel], Tuple[float, float]]


# ========== BATCHING ==========
@dataclass
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    n_tokens: int


def encode_pairs(bpe: BpeModel, vocab: Vocabulary, corpus: ParallelCorpus, max_len: int) -> List[EncodedPair]:
    """Source ids end with eos; target ids carry neither bos nor eos (added at batching)."""
    out = []
    for p in corpus.pairs:
        src = vocab.encode(apply_bpe(bpe, p.src))[: max_len - 1] + [EOS_ID]
        tgt = vocab.encode(apply_bpe(bpe, p.tgt))[: max_len - 1]
        out.append((src, tgt))
    return out


def pair_tokens(pair: EncodedPair) -> int:
    return len(pair[0]) + len(pair[1]) + 1


def make_batch(pairs: Sequence[EncodedPair]) -> Batch:
    return Batch(
        src=gather_ids([s for s, _ in pairs]),
        tgt_in=gather_ids([[BOS_ID] + t for _, t in pairs]),
        tgt_out=gather_ids([t + [EOS_ID] for _, t in pairs]),
        n_tokens=sum(pair_tokens(p) for p in pairs),
    )


def token_batches(pairs: Sequence[EncodedPair], token_batch_size: int, seed: int = 0, epoch: int = 0,
                  shuffle: bool = True) -> List[Batch]:
    """
    Pack pairs in (shuffled) order; a batch closes when the next pair would push its
    source+target token count past `token_batch_size`. Pairs larger than the budget are skipped.
    """
    order = np.arange(len(pairs))
    if shuffle:
        order = rng_for(seed, epoch).permutation(len(pairs))
    batches: List[Batch] = []
    current: List[EncodedPair] = []
    used = 0
    for i in order:
        pair = pairs[int(i)]
        n = pair_tokens(pair)
        if n > token_batch_size:
            continue
        if current and used + n > token_batch_size:
            batches.append(make_batch(current))
            current, used = [], 0
        current.append(pair)
        used += n
    if current:
        batches.append(make_batch(current))
    return batches


# ========== EARLY STOPPING ==========
class EarlyStopping:
    """Counts validations (not epochs) without a strict BLEU improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.stale = 0

    def update(self, score: float) -> bool:
        """Record one validation; True when it is a new best."""
        if score > self.best:
            self.best, self.stale = score, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


# ========== TRAIN RUN ==========
@dataclass
class TrainRun:
    section: TrainSection
    seed: int
    history: List[Dict[str, float]] = field(default_factory=list)
    best_checkpoint: Optional[str] = None
    best_bleu: float = -1.0
    stopped: str = "epochs"
    steps: int = 0

    def summary(self) -> Dict[str, object]:
        return {
            "epochs_run": len({h["epoch"] for h in self.history}),
            "steps": self.steps,
            "best_bleu": self.best_bleu,
            "best_checkpoint": os.path.basename(self.best_checkpoint) if self.best_checkpoint else None,
            "stopped": self.stopped,
        }


def make_schedule(section: TrainSection, steps_per_epoch: int) -> LrSchedule:
    return LrSchedule(
        kind=section.scheduler,
        base_lr=section.lr_initial,
        max_lr=section.lr_max if section.lr_max is not None else section.lr_initial,
        min_lr=section.lr_min,
        decrease_factor=section.lr_decrease_factor,
        step_size=section.cycle_step_size or 4 * max(steps_per_epoch, 1),
        patience=section.lr_patience,
        total_steps=max(section.epochs * steps_per_epoch, 1),
        mode=section.cycle_mode,
    )


def corpus_validator(model_bpe: BpeModel, vocab: Vocabulary, corpus: ParallelCorpus,
                     max_len: int) -> Validator:
    """Greedy-decode `corpus` sources and score them against its targets."""
    pairs = encode_pairs(model_bpe, vocab, corpus, max_len)
    sources = [s for s, _ in pairs]
    cap = min(max_len, max((len(s) for s in sources), default=1) * 2 + 10)

    def validate(model: TransformerModel) -> Tuple[float, float]:
        outs = greedy_batch(model, sources, cap)
        hyps = [decode_bpe(vocab.decode(o)) for o in outs]
        return bleu(hyps, corpus.targets).bleu_percent, chrf(hyps, corpus.targets)

    return validate


def _restore(model: TransformerModel, arrays: Dict[str, np.ndarray]) -> None:
    for name, arr in arrays.items():
        model.params[name].data[...] = arr


def train(model: TransformerModel, split: SplitCorpus, bpe: BpeModel, vocab: Vocabulary,
          section: TrainSection, out_dir: str, seed: int = 0, validator: Optional[Validator] = None,
          verbose: bool = True) -> TrainRun:
    """
    Epoch loop: token batches -> cross-entropy -> Adam(W) at lr_at(step, validation history).
    Validates every `validate_every` epochs with greedy decoding, keeps the best-BLEU
    checkpoint and stops after `patience` stagnant validations.
    """
    ensure_dir(out_dir)
    run = TrainRun(section=section, seed=seed)
    max_len = model.config.max_len
    pairs = encode_pairs(bpe, vocab, split.train, max_len)
    valid = split.valid if len(split.valid) else split.train
    validate = validator or corpus_validator(bpe, vocab, valid, max_len)

    steps_per_epoch = len(token_batches(pairs, section.token_batch_size, seed, 0))
    schedule = make_schedule(section, steps_per_epoch)
    optimizer = Optimizer(model.parameters(), section.optimizer, section.weight_decay)
    stopper = EarlyStopping(section.patience)
    val_scores: List[float] = []
    best_path = os.path.join(out_dir, "best.ckpt")
    history_path = os.path.join(out_dir, "history.jsonl")
    vocab_hash = vocab.hash()

    step = 0
    for epoch in range(1, section.epochs + 1):
        snapshot = {n: a.copy() for n, a in model.param_arrays().items()}
        batches = token_batches(pairs, section.token_batch_size, seed, epoch)
        losses = []
        lr = ad.lr_at(schedule, step, val_scores)
        try:
            for batch in tqdm(batches, desc=f"epoch {epoch}", disable=not verbose, leave=False):
                lr = ad.lr_at(schedule, step, val_scores)
                optimizer.zero_grad()
                with Tape():
                    logits = model.forward(batch.src, batch.tgt_in, training=True, step=step)
                    loss = ad.cross_entropy(logits, batch.tgt_out, PAD_ID, model.config.label_smoothing)
                    ad.backward(loss)
                optimizer.step(lr)
                losses.append(float(loss.data))
                step += 1
        except NumericError:
            _restore(model, snapshot)
            save_model(os.path.join(out_dir, "last_good.ckpt"), model, vocab_hash, step, schedule.to_dict())
            write_jsonl(history_path, run.history)
            run.stopped = "numeric"
            raise

        record: Dict[str, float] = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else 0.0,
                                    "lr": lr}
        if epoch % section.validate_every == 0 or epoch == section.epochs:
            val_bleu, val_chrf = validate(model)
            val_scores.append(val_bleu)
            record.update({"val_bleu": val_bleu, "val_chrf": val_chrf})
            if stopper.update(val_bleu):
                run.best_bleu = val_bleu
                run.best_checkpoint = best_path
                save_model(best_path, model, vocab_hash, step, schedule.to_dict(), optimizer)
            if verbose:
                print(f"[Trainer] epoch {epoch} loss={record['loss']:.4f} val_bleu={val_bleu:.2f} "
                      f"val_chrf={val_chrf:.2f} lr={lr:.3g}")
        run.history.append(record)
        run.steps = step
        if stopper.should_stop:
            run.stopped = "early_stopping"
            break

    write_jsonl(history_path, run.history)
    if run.best_checkpoint:
        best, _ = load_model(run.best_checkpoint)
        _restore(model, best.param_arrays())
    if verbose:
        print(f"[Trainer] done after {len(run.history)} epochs ({run.stopped}); best BLEU {run.best_bleu:.2f}")
    return run
