# distill.py - Cross-lingual teacher/student embedding distillation and the decoding bridge
# Responsibility: frozen teacher encoder, student alignment loss, bridge + decoder stage
from __future__ import annotations
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

import autodiff as ad
import checkpoint
from autodiff import Optimizer, Tape, Tensor
from bpe import BpeModel, Vocabulary, apply_bpe, decode_bpe
from config import EOS_ID, PAD_ID, UNK_ID, BridgeSection, DistillSection
from decoding import greedy_batch
from evaluation import bleu, pair_cosines
from lora import AdaptedModel
from trainer import EncodedPair, make_batch, token_batches
from transformer import PRESETS, TransformerConfig, TransformerModel, build_model, gather_ids, model_from_arrays
from utils import ConfigError, DimensionError, IntegrityError, LabError, ensure_dir, read_json, rng_for, write_json

Encoder = Union[TransformerModel, AdaptedModel]


# ========== DOMAIN TYPES ==========
class TeacherEncoder:
    """Encoder-only model whose parameters must not change once frozen."""

    def __init__(self, model: TransformerModel):
        if model.config.parts != "encoder":
            raise ConfigError("The teacher must be an encoder-only model")
        for p in model.params.values():
            p.requires_grad = False
        self.model = model
        self.frozen_hash = model.param_hash()

    @property
    def dim(self) -> int:
        return self.model.config.d_model

    def verify(self) -> None:
        if self.model.param_hash() != self.frozen_hash:
            raise IntegrityError("Teacher parameters changed during distillation")


@dataclass
class DistillBatch:
    sources: List[List[int]]
    targets: List[List[int]]

    def __post_init__(self) -> None:
        if len(self.sources) != len(self.targets) or not self.sources:
            raise DimensionError(f"Distillation batch needs equal non-empty sides, got "
                                 f"{len(self.sources)} and {len(self.targets)}")

    def __len__(self) -> int:
        return len(self.sources)


class Bridge:
    """Affine map d_S -> d_dec applied to every encoder state."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0, dtype=np.float32):
        limit = np.sqrt(6.0 / (d_in + d_out))
        rng = np.random.default_rng(seed)
        self.weight = Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)).astype(dtype),
                             requires_grad=True, name="bridge.w")
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True, name="bridge.b")

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> Dict[str, Tensor]:
        return {"bridge.w": self.weight, "bridge.b": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


@dataclass
class DistillState:
    teacher: TeacherEncoder
    student: Encoder
    bridge: Optional[Bridge] = None
    decoder: Optional[TransformerModel] = None
    history: List[Dict[str, float]] = field(default_factory=list)


# ========== EMBEDDINGS ==========
def encode_sentences(bpe: BpeModel, vocab: Vocabulary, lines: Sequence[str], max_len: int) -> List[List[int]]:
    """Both languages are encoded alike: subword ids plus eos."""
    return [vocab.encode(apply_bpe(bpe, line))[: max_len - 1] + [EOS_ID] for line in lines]


def embed_batch(encoder: Encoder, ids: np.ndarray, training: bool = False, step: int = 0) -> Tensor:
    """Masked mean pooling of final-layer states, then L2 normalization -> (batch, d)."""
    ids = np.asarray(ids, dtype=np.int64)
    real = ids != PAD_ID
    counts = real.sum(axis=1)
    if np.any(counts == 0):
        raise LabError("sentence_embed needs at least one non-pad token per sentence")
    states, _ = encoder.encode(ids, training=training, step=step)
    weights = (real / counts[:, None])[..., None].astype(states.dtype)
    pooled = ad.sum_(states * Tensor(weights), axis=1)
    return ad.l2_normalize(pooled, axis=-1)


def sentence_embed(encoder: Encoder, tokens: Sequence[int]) -> np.ndarray:
    if len(tokens) == 0:
        raise LabError("sentence_embed needs a non-empty token list")
    return embed_batch(encoder, np.asarray([list(tokens)], dtype=np.int64)).data[0]


def embed_all(encoder: Encoder, sentences: Sequence[Sequence[int]], batch_size: int = 64) -> np.ndarray:
    rows = []
    for i in range(0, len(sentences), batch_size):
        rows.append(embed_batch(encoder, gather_ids([list(s) for s in sentences[i:i + batch_size]])).data)
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, encoder.config.d_model), np.float32)


# ========== LOSS ==========
def embedding_loss(tm_s: Union[Tensor, np.ndarray], sm_s: Union[Tensor, np.ndarray],
                   sm_t: Union[Tensor, np.ndarray], reduction: str = "sum") -> Tensor:
    """
    (1/|B|) sum_j ||TM(s_j) - SM(s_j)||^2 + ||TM(s_j) - SM(t_j)||^2.
    reduction="mean" averages over components instead of summing them.
    E.g., TM(s)=(1,0), SM(s)=(0,1), SM(t)=(1,0) -> 2
    """
    tm_s, sm_s, sm_t = (x if isinstance(x, Tensor) else Tensor(np.asarray(x)) for x in (tm_s, sm_s, sm_t))
    if not (tm_s.shape == sm_s.shape == sm_t.shape) or tm_s.ndim != 2:
        raise DimensionError(f"Embedding shapes differ: {tm_s.shape}, {sm_s.shape}, {sm_t.shape}")
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"Unknown loss reduction '{reduction}'")
    d1 = tm_s - sm_s
    d2 = tm_s - sm_t
    total = ad.sum_(d1 * d1) + ad.sum_(d2 * d2)
    denom = tm_s.shape[0] * (tm_s.shape[1] if reduction == "mean" else 1)
    return ad.scale(total, 1.0 / denom)


def distill_loss(teacher: TeacherEncoder, student: Encoder, batch: DistillBatch,
                 reduction: str = "sum", training: bool = False, step: int = 0) -> Tensor:
    if teacher.dim != student.config.d_model:
        raise DimensionError(f"Teacher dim {teacher.dim} != student dim {student.config.d_model}")
    tm_s = Tensor(embed_batch(teacher.model, gather_ids(batch.sources)).data)
    sm_s = embed_batch(student, gather_ids(batch.sources), training, step)
    sm_t = embed_batch(student, gather_ids(batch.targets), training, step)
    return embedding_loss(tm_s, sm_s, sm_t, reduction)


# ========== TEACHER PRETRAINING ==========
def pretrain_teacher(sentences: Sequence[List[int]], config: TransformerConfig, epochs: int, lr: float,
                     batch_size: int, seed: int, noise: float = 0.15, verbose: bool = True) -> TeacherEncoder:
    """
    Denoising copy objective on the high-resource side: corrupt tokens to unk and
    predict the originals through the tied embedding, then freeze.
    """
    if config.parts != "encoder":
        raise ConfigError("pretrain_teacher builds an encoder-only model")
    model = build_model(config, seed)
    optimizer = Optimizer(model.parameters(), "adam")
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng_for(seed, epoch).permutation(len(sentences))
        losses = []
        for i in range(0, len(order), batch_size):
            ids = gather_ids([sentences[int(k)] for k in order[i:i + batch_size]])
            corrupt = rng_for(seed, epoch, step).random(ids.shape) < noise
            noisy = np.where(corrupt & (ids != PAD_ID) & (ids != EOS_ID), UNK_ID, ids)
            optimizer.zero_grad()
            with Tape():
                states, _ = model.encode(noisy, training=True, step=step)
                logits = ad.matmul(states, ad.transpose(model.weight("emb")))
                loss = ad.cross_entropy(logits, ids, PAD_ID, 0.0)
                ad.backward(loss)
            optimizer.step(lr)
            losses.append(float(loss.data))
            step += 1
        if verbose and (epoch == epochs or epoch % 10 == 0):
            print(f"[Distill] teacher epoch {epoch} copy_loss={np.mean(losses):.4f}")
    return TeacherEncoder(model)


def student_from_teacher(teacher: TeacherEncoder) -> TransformerModel:
    """The student starts as a parameter copy of the teacher."""
    student = teacher.model.copy()
    for p in student.params.values():
        p.requires_grad = True
    return student


def _trainable(model: Encoder) -> Dict[str, Tensor]:
    return model.trainable_parameters() if isinstance(model, AdaptedModel) else model.parameters()


# ========== DISTILLATION ==========
def cross_lingual_cosine(student: Encoder, pairs: Sequence[EncodedPair]) -> np.ndarray:
    """cos(SM(s_j), SM(t_j)) for every pair."""
    src = embed_all(student, [s for s, _ in pairs])
    tgt = embed_all(student, [t for _, t in pairs])
    cos, _ = pair_cosines(src, tgt)
    return cos


def train_distill(teacher: TeacherEncoder, student: Encoder, pairs: Sequence[EncodedPair],
                  section: DistillSection, seed: int = 0, verbose: bool = True) -> List[Dict[str, float]]:
    """
    Minimize the embedding loss with AdamW. History rows: {epoch, loss, mean_cosine};
    row 0 is the untrained student.
    """
    if teacher.dim != student.config.d_model:
        raise DimensionError(f"Teacher dim {teacher.dim} != student dim {student.config.d_model}")
    params = _trainable(student)
    optimizer = Optimizer(params, "adamw", section.weight_decay)

    def mean_loss() -> float:
        batch = DistillBatch([s for s, _ in pairs], [t for _, t in pairs])
        return float(distill_loss(teacher, student, batch, section.loss_reduction).data)

    history = [{"epoch": 0, "loss": mean_loss(), "mean_cosine": float(cross_lingual_cosine(student, pairs).mean())}]
    step = 0
    for epoch in tqdm(range(1, section.epochs + 1), desc="distill", disable=not verbose):
        order = rng_for(seed, epoch).permutation(len(pairs))
        losses = []
        for i in range(0, len(order), section.batch_size):
            chunk = [pairs[int(k)] for k in order[i:i + section.batch_size]]
            batch = DistillBatch([s for s, _ in chunk], [t for _, t in chunk])
            optimizer.zero_grad()
            with Tape():
                loss = distill_loss(teacher, student, batch, section.loss_reduction, training=True, step=step)
                ad.backward(loss)
            optimizer.step(section.lr)
            losses.append(float(loss.data))
            step += 1
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "mean_cosine": float(cross_lingual_cosine(student, pairs).mean())})
        teacher.verify()

    teacher.verify()
    if verbose:
        print(f"[Distill] mean cosine {history[0]['mean_cosine']:.3f} -> {history[-1]['mean_cosine']:.3f}")
    return history


# ========== BRIDGE + DECODER ==========
class BridgedModel:
    """Frozen student -> bridge -> decoder, shaped like a TransformerModel for decoding."""

    def __init__(self, student: Encoder, bridge: Bridge, decoder: TransformerModel):
        if bridge.d_out != decoder.config.d_model:
            raise ConfigError(f"Bridge output dim {bridge.d_out} != decoder d_model {decoder.config.d_model}")
        if bridge.weight.shape[0] != student.config.d_model:
            raise ConfigError(f"Bridge input dim {bridge.weight.shape[0]} != student dim {student.config.d_model}")
        self.student = student
        self.bridge = bridge
        self.decoder = decoder
        self.config = decoder.config

    def parameters(self) -> Dict[str, Tensor]:
        params = dict(self.bridge.parameters())
        params.update({f"decoder.{n}": p for n, p in self.decoder.parameters().items()})
        return params

    def encode(self, src: np.ndarray, training: bool = False, step: int = 0) -> Tuple[Tensor, np.ndarray]:
        states, mask = self.student.encode(src)
        return self.bridge(Tensor(states.data)), mask

    def forward(self, src: np.ndarray, tgt_in: np.ndarray, training: bool = False, step: int = 0) -> Tensor:
        memory, mask = self.encode(src)
        return self.decoder.decode(tgt_in, memory, mask, training, step)

    def next_log_probs(self, memory: Tensor, src_mask: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        return self.decoder.next_log_probs(memory, src_mask, prefixes)


def decoder_config(student: Encoder, vocab_size: int, section: BridgeSection) -> TransformerConfig:
    base = student.config
    return TransformerConfig(num_layers=section.decoder_layers, num_heads=base.num_heads,
                             d_model=base.d_model, d_ff=base.d_ff, vocab_size=vocab_size, dropout=0.0,
                             max_len=base.max_len, tie_softmax=True, label_smoothing=0.0,
                             parts="decoder").validate()


def _loss_on(model: BridgedModel, pairs: Sequence[EncodedPair]) -> float:
    batch = make_batch(pairs)
    logits = model.forward(batch.src, batch.tgt_in)
    return float(ad.cross_entropy(logits, batch.tgt_out, PAD_ID, 0.0).data)


def train_bridge_decoder(student: Encoder, bridge: Bridge, decoder: TransformerModel,
                         train_pairs: Sequence[EncodedPair], eval_pairs: Sequence[EncodedPair],
                         vocab: Vocabulary, section: BridgeSection, seed: int = 0,
                         verbose: bool = True) -> List[Dict[str, float]]:
    """
    Student states -> bridge -> cross-attention memory; decoder trained with cross-entropy.
    History rows: {epoch, train_loss, eval_loss, bleu}. The student must stay unchanged.
    """
    model = BridgedModel(student, bridge, decoder)
    student_hash = student.param_hash()
    for p in {**student.parameters(), **_trainable(student)}.values():
        p.requires_grad = False
    optimizer = Optimizer(model.parameters(), "adam")
    eval_pairs = list(eval_pairs) or list(train_pairs)
    references = [decode_bpe(vocab.decode(t)) for _, t in eval_pairs]
    cap = min(decoder.config.max_len, max(len(t) for _, t in eval_pairs) + 10)

    history: List[Dict[str, float]] = []
    step = 0
    for epoch in range(1, section.epochs + 1):
        losses = []
        for batch in token_batches(train_pairs, section.token_batch_size, seed, epoch):
            optimizer.zero_grad()
            with Tape():
                logits = model.forward(batch.src, batch.tgt_in, training=True, step=step)
                loss = ad.cross_entropy(logits, batch.tgt_out, PAD_ID, 0.0)
                ad.backward(loss)
            optimizer.step(section.lr)
            losses.append(float(loss.data))
            step += 1
        outs = greedy_batch(model, [s for s, _ in eval_pairs], cap)
        hyps = [decode_bpe(vocab.decode(o)) for o in outs]
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else 0.0,
                  "eval_loss": _loss_on(model, eval_pairs), "bleu": bleu(hyps, references).bleu_percent}
        history.append(record)
        if verbose:
            print(f"[Bridge] epoch {epoch} train_loss={record['train_loss']:.4f} "
                  f"eval_loss={record['eval_loss']:.4f} bleu={record['bleu']:.2f}")

    if student.param_hash() != student_hash:
        raise IntegrityError("Student encoder changed during decoder training")
    return history


# ========== EMBEDDING DUMPS ==========
def dump_embeddings(encoder: Encoder, sentences: Sequence[Sequence[int]], language: str, path: str) -> np.ndarray:
    """Raw little-endian float32 matrix at `path`, sidecar JSON {dim, count, language} at path + '.json'."""
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    matrix = embed_all(encoder, sentences).astype("<f4")
    with open(path, "wb") as f:
        f.write(matrix.tobytes())
    write_json(path + ".json", {"dim": int(matrix.shape[1]), "count": int(matrix.shape[0]), "language": language})
    return matrix


def load_embeddings(path: str) -> Tuple[np.ndarray, Dict[str, object]]:
    meta = read_json(path + ".json")
    with open(path, "rb") as f:
        matrix = np.frombuffer(f.read(), dtype="<f4").reshape(meta["count"], meta["dim"])
    return matrix, meta


# ========== CONFIGS AND CHECKPOINTS ==========
def encoder_config(section: DistillSection, vocab_size: int) -> TransformerConfig:
    """Teacher and student share one encoder-only layout; no dropout at desk scale."""
    layers, heads, d_model, d_ff = PRESETS[section.model_architecture]
    if section.embedding_dimension:
        d_ff = d_ff * section.embedding_dimension // d_model
        d_model = section.embedding_dimension
    return TransformerConfig(num_layers=layers, num_heads=heads, d_model=d_model, d_ff=d_ff,
                             vocab_size=vocab_size, dropout=0.0, max_len=section.max_len,
                             label_smoothing=0.0, parts="encoder").validate()


def save_bridge(path: str, bridge: Bridge, decoder: TransformerModel, student_hash: str,
                vocab_hash: Optional[str] = None) -> str:
    arrays = {f"param.{n}": a for n, a in decoder.param_arrays().items()}
    arrays.update({n: t.data for n, t in bridge.parameters().items()})
    manifest = {"kind": "bridge", "model_config": decoder.config.to_dict(), "seed": decoder.seed,
                "student_hash": student_hash, "vocab_hash": vocab_hash}
    return checkpoint.save(path, arrays, manifest)


def load_bridge(path: str, student: Encoder, vocab_hash: Optional[str] = None) -> BridgedModel:
    """Load bridge + decoder on top of `student`; when `vocab_hash` is given it must match the checkpoint's."""
    manifest, arrays = checkpoint.load(path)
    if manifest.get("kind") != "bridge":
        raise IntegrityError(f"{path} is not a bridge checkpoint (kind={manifest.get('kind')})")
    if manifest.get("student_hash") != student.param_hash():
        raise IntegrityError("Bridge checkpoint was trained on a different student encoder")
    if vocab_hash is not None and manifest.get("vocab_hash") not in (None, vocab_hash):
        raise IntegrityError("Vocabulary does not match the bridge checkpoint (vocab hash differs)")
    decoder = model_from_arrays(manifest, arrays)
    w, b = arrays["bridge.w"], arrays["bridge.b"]
    bridge = Bridge(w.shape[0], w.shape[1])
    bridge.weight.data = w.astype(np.float32)
    bridge.bias.data = b.astype(np.float32)
    return BridgedModel(student, bridge, decoder)
