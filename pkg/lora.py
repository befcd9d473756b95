# lora.py - Low-rank adapters on frozen attention projections
# Responsibility: inject adapters, train only them, merge them back into plain weights
from __future__ import annotations
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

import autodiff as ad
import checkpoint
from autodiff import LrSchedule, Optimizer, Tape, Tensor
from bpe import BpeModel, Vocabulary
from config import LORA_INIT_STD, LORA_TARGETS, PAD_ID, LoraSection
from corpus import SplitCorpus
from trainer import corpus_validator, encode_pairs, make_batch
from transformer import TransformerModel, attention_prefixes
from utils import ConfigError, IntegrityError, LabError, LoraError, rng_for

VALID_TARGETS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class LoraSpec:
    rank: int
    alpha: Optional[float] = None
    targets: Tuple[str, ...] = LORA_TARGETS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(2 * self.rank))
        object.__setattr__(self, "targets", tuple(self.targets))
        unknown = [t for t in self.targets if t not in VALID_TARGETS]
        if unknown or not self.targets:
            raise ConfigError(f"LoRA targets must be drawn from {VALID_TARGETS}, got {list(self.targets)}")

    @property
    def scale(self) -> float:
        return float(self.alpha) / self.rank

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_section(cls, section: LoraSection, seed: int) -> "LoraSpec":
        return cls(rank=section.rank, alpha=section.alpha, targets=tuple(section.targets), seed=seed)


class AdaptedModel(TransformerModel):
    """
    A frozen view of a base model plus per-target adapters:
    W_eff = W + (alpha / r) * A @ B. The view shares the base arrays.
    """

    def __init__(self, base: TransformerModel, spec: LoraSpec, adapters: Dict[str, Tuple[Tensor, Tensor]]):
        frozen = {n: Tensor(p.data, requires_grad=False, name=n) for n, p in base.params.items()}
        super().__init__(base.config, frozen, base.seed)
        self.spec = spec
        self.adapters = adapters
        self.consumed = False
        self._scale = spec.scale

    def weight(self, name: str) -> Tensor:
        pair = self.adapters.get(name)
        if pair is None:
            return self.params[name]
        A, B = pair
        return ad.add(self.params[name], ad.scale(ad.matmul(A, B), self._scale))

    def trainable_parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, (A, B) in self.adapters.items():
            out[f"lora.{name}.A"] = A
            out[f"lora.{name}.B"] = B
        return out

    def num_trainable(self) -> int:
        return int(sum(t.data.size for t in self.trainable_parameters().values()))

    def base_hash(self) -> str:
        return self.param_hash()

    def assert_frozen(self) -> None:
        leaked = [n for n, p in self.params.items() if p.grad is not None]
        if leaked:
            raise LabError(f"Gradient reached frozen base parameters: {leaked[:3]}")


def target_names(model: TransformerModel, spec: LoraSpec) -> List[str]:
    return [f"{prefix}.w{t}" for prefix in attention_prefixes(model.config) for t in spec.targets]


def inject(model: TransformerModel, spec: LoraSpec) -> AdaptedModel:
    """
    A ~ N(0, 0.01^2) of shape (d_in, r) under spec.seed, B = 0 of shape (r, d_out),
    so the adapted forward equals the base forward exactly at init.
    """
    rng = np.random.default_rng(spec.seed)
    adapters: Dict[str, Tuple[Tensor, Tensor]] = {}
    names = target_names(model, spec)
    if not names:
        raise ConfigError("Model has no attention projections to adapt")
    for name in names:
        if name not in model.params:
            raise ConfigError(f"LoRA target '{name}' does not exist in the model")
        d_in, d_out = model.params[name].shape
        if spec.rank >= min(d_in, d_out):
            raise ConfigError(f"LoRA rank {spec.rank} must be < min(d_in, d_out) = {min(d_in, d_out)} for {name}")
        dtype = model.params[name].dtype
        A = Tensor(rng.normal(0.0, LORA_INIT_STD, size=(d_in, spec.rank)).astype(dtype),
                   requires_grad=True, name=f"lora.{name}.A")
        B = Tensor(np.zeros((spec.rank, d_out), dtype=dtype), requires_grad=True, name=f"lora.{name}.B")
        adapters[name] = (A, B)
    return AdaptedModel(model, spec, adapters)


def expected_trainable(model: TransformerModel, spec: LoraSpec) -> int:
    """Sum over targets of r * (d_in + d_out)."""
    return sum(spec.rank * sum(model.params[n].shape) for n in target_names(model, spec))


def train_adapters(adapted: AdaptedModel, split: SplitCorpus, bpe: BpeModel, vocab: Vocabulary,
                   section: LoraSection, seed: int = 0, verbose: bool = True) -> List[Dict[str, float]]:
    """Adam on adapter matrices only; the base arrays must come out byte-identical."""
    if adapted.consumed:
        raise LoraError("Adapters were already merged")
    before = adapted.base_hash()
    pairs = encode_pairs(bpe, vocab, split.train, adapted.config.max_len)
    steps_per_epoch = max(1, -(-len(pairs) // section.batch_size))
    schedule = LrSchedule(kind=section.scheduler, base_lr=section.lr,
                          total_steps=max(1, section.epochs * steps_per_epoch))
    optimizer = Optimizer(adapted.trainable_parameters(), "adam")
    valid = split.valid if len(split.valid) else split.train
    validate = corpus_validator(bpe, vocab, valid, adapted.config.max_len)

    history: List[Dict[str, float]] = []
    step = 0
    for epoch in range(1, section.epochs + 1):
        order = rng_for(seed, epoch).permutation(len(pairs))
        losses = []
        chunks = [order[i:i + section.batch_size] for i in range(0, len(order), section.batch_size)]
        for chunk in tqdm(chunks, desc=f"lora epoch {epoch}", disable=not verbose, leave=False):
            batch = make_batch([pairs[int(i)] for i in chunk])
            lr = ad.lr_at(schedule, step)
            optimizer.zero_grad()
            with Tape():
                logits = adapted.forward(batch.src, batch.tgt_in, training=True, step=step)
                loss = ad.cross_entropy(logits, batch.tgt_out, PAD_ID, adapted.config.label_smoothing)
                ad.backward(loss)
            adapted.assert_frozen()
            optimizer.step(lr)
            losses.append(float(loss.data))
            step += 1
        val_bleu, val_chrf = validate(adapted)
        record = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else 0.0,
                  "val_bleu": val_bleu, "val_chrf": val_chrf, "lr": ad.lr_at(schedule, step)}
        history.append(record)
        if verbose:
            print(f"[LoRA] epoch {epoch} loss={record['loss']:.4f} val_bleu={val_bleu:.2f}")

    if adapted.base_hash() != before:
        raise IntegrityError("Base weights changed during adapter training")
    return history


def merge(adapted: AdaptedModel) -> TransformerModel:
    """Plain model with W <- W + (alpha/r) * A @ B. The adapters are consumed."""
    if adapted.consumed:
        raise LoraError("Adapters were already merged into a model")
    params = {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in adapted.params.items()}
    for name, (A, B) in adapted.adapters.items():
        W = params[name].data
        params[name].data = W + (A.data @ B.data) * W.dtype.type(adapted.spec.scale)
    adapted.consumed = True
    return TransformerModel(adapted.config, params, adapted.seed)


# ========== ADAPTER CHECKPOINTS ==========
def save_adapters(path: str, adapted: AdaptedModel) -> str:
    arrays = {name: t.data for name, t in adapted.trainable_parameters().items()}
    manifest = {"kind": "lora", "base_hash": adapted.base_hash(), "spec": adapted.spec.to_dict()}
    return checkpoint.save(path, arrays, manifest)


def load_adapters(path: str, base: TransformerModel) -> AdaptedModel:
    manifest, arrays = checkpoint.load(path)
    if manifest.get("kind") != "lora":
        raise IntegrityError(f"{path} is not an adapter checkpoint")
    if manifest.get("base_hash") != base.param_hash():
        raise IntegrityError("Adapter checkpoint was trained on a different base model")
    raw = manifest["spec"]
    spec = LoraSpec(rank=raw["rank"], alpha=raw["alpha"], targets=tuple(raw["targets"]), seed=raw["seed"])
    adapters = {}
    for name in target_names(base, spec):
        A = arrays[f"lora.{name}.A"].astype(base.params[name].dtype)
        B = arrays[f"lora.{name}.B"].astype(base.params[name].dtype)
        adapters[name] = (Tensor(A, requires_grad=True, name=f"lora.{name}.A"),
                          Tensor(B, requires_grad=True, name=f"lora.{name}.B"))
    return AdaptedModel(base, spec, adapters)
