# transformer.py - Encoder-decoder Transformer on the autodiff tape
# Responsibility: configurations, parameter init, forward pass, model checkpoints
from __future__ import annotations
import math
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np

import autodiff as ad
import checkpoint
from autodiff import Tensor
from config import MAX_LEN, PAD_ID, TrainSection
from utils import ConfigError, DimensionError, IntegrityError, hash_arrays

NEG_INF = -1e9

# (layers, heads, d_model, d_ff)
PRESETS: Dict[str, Tuple[int, int, int, int]] = {
    "T1": (4, 4, 128, 512),
    "T2": (6, 8, 256, 1024),
    "T3": (6, 8, 512, 2048),
    "T1-quarter": (4, 4, 32, 128),
}

Parts = Literal["both", "encoder", "decoder"]


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int
    num_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    dropout: float = 0.2
    max_len: int = MAX_LEN
    tie_softmax: bool = True
    label_smoothing: float = 0.1
    parts: Parts = "both"

    def validate(self) -> "TransformerConfig":
        if self.d_model % self.num_heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size must cover the four specials plus one token, got {self.vocab_size}")
        if self.num_layers < 1 or self.d_ff < 1:
            raise ConfigError("num_layers and d_ff must be positive")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "TransformerConfig":
        return cls(**raw).validate()


def preset(name: str, vocab_size: int, **overrides: Any) -> TransformerConfig:
    if name not in PRESETS:
        raise ConfigError(f"Unknown model preset '{name}' (expected one of {sorted(PRESETS)})")
    layers, heads, d_model, d_ff = PRESETS[name]
    cfg = TransformerConfig(num_layers=layers, num_heads=heads, d_model=d_model, d_ff=d_ff,
                            vocab_size=vocab_size)
    return replace(cfg, **overrides).validate()


def config_from_train(section: TrainSection, vocab_size: int) -> TransformerConfig:
    """`embedding_dimension`, when set, overrides the preset width; d_ff keeps the preset ratio."""
    layers, heads, d_model, d_ff = PRESETS[section.model_architecture]
    if section.embedding_dimension:
        d_ff = d_ff * section.embedding_dimension // d_model
        d_model = section.embedding_dimension
    return TransformerConfig(
        num_layers=layers, num_heads=heads, d_model=d_model, d_ff=d_ff, vocab_size=vocab_size,
        dropout=section.dropout, max_len=section.max_len, tie_softmax=section.tie_softmax,
        label_smoothing=section.label_smoothing,
    ).validate()


# ========== PARAMETER LAYOUT ==========
def _attn_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    out = []
    for p in ("q", "k", "v", "o"):
        out.append((f"{prefix}.w{p}", (d, d)))
        out.append((f"{prefix}.b{p}", (d,)))
    return out


def _ln_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _ff_shapes(prefix: str, d: int, d_ff: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.w1", (d, d_ff)), (f"{prefix}.b1", (d_ff,)),
            (f"{prefix}.w2", (d_ff, d)), (f"{prefix}.b2", (d,))]


def param_shapes(cfg: TransformerConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter name and shape, in initialization order."""
    d, V = cfg.d_model, cfg.vocab_size
    shapes: List[Tuple[str, Tuple[int, ...]]] = [("emb", (V, d))]
    if cfg.parts in ("both", "encoder"):
        for i in range(cfg.num_layers):
            shapes += _ln_shapes(f"enc.{i}.ln1", d) + _attn_shapes(f"enc.{i}.attn", d)
            shapes += _ln_shapes(f"enc.{i}.ln2", d) + _ff_shapes(f"enc.{i}.ff", d, cfg.d_ff)
        shapes += _ln_shapes("enc.ln", d)
    if cfg.parts in ("both", "decoder"):
        for i in range(cfg.num_layers):
            shapes += _ln_shapes(f"dec.{i}.ln1", d) + _attn_shapes(f"dec.{i}.self", d)
            shapes += _ln_shapes(f"dec.{i}.ln2", d) + _attn_shapes(f"dec.{i}.cross", d)
            shapes += _ln_shapes(f"dec.{i}.ln3", d) + _ff_shapes(f"dec.{i}.ff", d, cfg.d_ff)
        shapes += _ln_shapes("dec.ln", d)
        if not cfg.tie_softmax:
            shapes.append(("out", (d, V)))
    return shapes


def attention_prefixes(cfg: TransformerConfig) -> List[str]:
    return [name[:-3] for name, _ in param_shapes(cfg) if name.endswith(".wq")]


def sinusoid_table(max_len: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d, 2, dtype=np.float64) * (-math.log(10000.0) / d))
    table = np.zeros((max_len, d), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return table.astype(dtype)


def _init_array(rng: np.random.Generator, name: str, shape: Tuple[int, ...], dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if len(shape) == 2:
        fan_in, fan_out = shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape).astype(dtype)
    if leaf == "g":
        return np.ones(shape, dtype=dtype)
    return np.zeros(shape, dtype=dtype)


# ========== MODEL ==========
class TransformerModel:
    """
    Pre-LN encoder-decoder. `parts` restricts the model to its encoder (sentence encoders)
    or its decoder (decoding from an external memory).
    """

    def __init__(self, config: TransformerConfig, params: Dict[str, Tensor], seed: int = 0):
        self.config = config
        self.params = params
        self.seed = seed
        self.capture_attention = False
        self.attention_maps: List[np.ndarray] = []
        dtype = params["emb"].dtype
        self._pos = sinusoid_table(config.max_len, config.d_model, dtype)

    # ---- parameters ----
    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def weight(self, name: str) -> Tensor:
        """Effective weight used by the forward pass; adapters override this."""
        return self.params[name]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def param_arrays(self) -> Dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def param_hash(self) -> str:
        return hash_arrays(self.param_arrays())

    def copy(self) -> "TransformerModel":
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n) for n, p in self.params.items()}
        return TransformerModel(self.config, params, self.seed)

    # ---- building blocks ----
    def _check_len(self, ids: np.ndarray, what: str) -> None:
        if ids.ndim != 2:
            raise DimensionError(f"{what} ids must be (batch, time), got shape {ids.shape}")
        if ids.shape[1] > self.config.max_len:
            raise DimensionError(f"{what} length {ids.shape[1]} exceeds max_len={self.config.max_len}")

    def _dropout(self, x: Tensor, training: bool, step: int, layer: int, site: int) -> Tensor:
        return ad.dropout(x, self.config.dropout, key=(self.seed, layer, step, site), training=training)

    def _embed(self, ids: np.ndarray, training: bool, step: int, site: int) -> Tensor:
        d = self.config.d_model
        x = ad.scale(ad.embedding_lookup(self.weight("emb"), ids), math.sqrt(d))
        x = x + Tensor(self._pos[None, : ids.shape[1]])
        return self._dropout(x, training, step, layer=0, site=site)

    def _linear(self, x: Tensor, w: str, b: Optional[str]) -> Tensor:
        y = ad.matmul(x, self.weight(w))
        return y + self.params[b] if b else y

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attention(self, xq: Tensor, xkv: Tensor, prefix: str, mask: np.ndarray,
                   training: bool, step: int, layer: int, site: int) -> Tensor:
        B, T, d = xq.shape
        S = xkv.shape[1]
        H = self.config.num_heads
        dk = d // H

        def heads(x: Tensor, n: int) -> Tensor:
            return ad.transpose(ad.reshape(x, (B, n, H, dk)), (0, 2, 1, 3))

        q = heads(self._linear(xq, f"{prefix}.wq", f"{prefix}.bq"), T)
        k = heads(self._linear(xkv, f"{prefix}.wk", f"{prefix}.bk"), S)
        v = heads(self._linear(xkv, f"{prefix}.wv", f"{prefix}.bv"), S)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        probs = ad.softmax(scores + Tensor(mask.astype(scores.dtype)), axis=-1)
        if self.capture_attention:
            self.attention_maps.append(probs.data)
        probs = self._dropout(probs, training, step, layer, site)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, T, d))
        return self._linear(ctx, f"{prefix}.wo", f"{prefix}.bo")

    def _ff(self, x: Tensor, prefix: str, training: bool, step: int, layer: int, site: int) -> Tensor:
        h = ad.relu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        h = self._dropout(h, training, step, layer, site)
        return self._linear(h, f"{prefix}.w2", f"{prefix}.b2")

    # ---- masks ----
    @staticmethod
    def pad_mask(ids: np.ndarray) -> np.ndarray:
        """Additive key mask (batch, 1, 1, time): 0 for tokens, -1e9 for padding."""
        return np.where(ids == PAD_ID, NEG_INF, 0.0)[:, None, None, :]

    @staticmethod
    def causal_mask(t: int) -> np.ndarray:
        return np.triu(np.full((t, t), NEG_INF), k=1)[None, None]

    # ---- encoder / decoder ----
    def encode(self, src: np.ndarray, training: bool = False, step: int = 0,
               src_mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
        """
        Final-layer encoder states (batch, src_time, d_model) and the additive source mask.
        The mask is derived from pad ids unless given.
        """
        if self.config.parts == "decoder":
            raise ConfigError("This model has no encoder")
        src = np.asarray(src, dtype=np.int64)
        self._check_len(src, "source")
        mask = self.pad_mask(src) if src_mask is None else src_mask
        x = self._embed(src, training, step, site=0)
        for i in range(self.config.num_layers):
            layer = 1 + i
            h1 = self._ln(x, f"enc.{i}.ln1")
            h = self._attention(h1, h1, f"enc.{i}.attn", mask, training, step, layer, site=1)
            x = x + self._dropout(h, training, step, layer, site=2)
            h = self._ff(self._ln(x, f"enc.{i}.ln2"), f"enc.{i}.ff", training, step, layer, site=3)
            x = x + self._dropout(h, training, step, layer, site=4)
        return self._ln(x, "enc.ln"), mask

    def decode(self, tgt_in: np.ndarray, memory: Tensor, src_mask: np.ndarray,
               training: bool = False, step: int = 0) -> Tensor:
        """Logits (batch, tgt_time, vocab) for every prefix position of tgt_in."""
        if self.config.parts == "encoder":
            raise ConfigError("This model has no decoder")
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        self._check_len(tgt_in, "target")
        T = tgt_in.shape[1]
        self_mask = self.causal_mask(T) + self.pad_mask(tgt_in)
        x = self._embed(tgt_in, training, step, site=10)
        base = 1 + self.config.num_layers
        for i in range(self.config.num_layers):
            layer = base + i
            h1 = self._ln(x, f"dec.{i}.ln1")
            h = self._attention(h1, h1, f"dec.{i}.self", self_mask, training, step, layer, site=1)
            x = x + self._dropout(h, training, step, layer, site=2)
            h = self._attention(self._ln(x, f"dec.{i}.ln2"), memory, f"dec.{i}.cross", src_mask,
                                training, step, layer, site=3)
            x = x + self._dropout(h, training, step, layer, site=4)
            h = self._ff(self._ln(x, f"dec.{i}.ln3"), f"dec.{i}.ff", training, step, layer, site=5)
            x = x + self._dropout(h, training, step, layer, site=6)
        x = self._ln(x, "dec.ln")
        if self.config.tie_softmax:
            return ad.matmul(x, ad.transpose(self.weight("emb")))
        return ad.matmul(x, self.weight("out"))

    def forward(self, src: np.ndarray, tgt_in: np.ndarray, training: bool = False, step: int = 0,
                src_mask: Optional[np.ndarray] = None) -> Tensor:
        memory, mask = self.encode(src, training, step, src_mask)
        return self.decode(tgt_in, memory, mask, training, step)

    def next_log_probs(self, memory: Tensor, src_mask: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        """Log-probabilities of the next token for each (memory row, prefix) pair."""
        logits = self.decode(prefixes, memory, src_mask).data[:, -1, :].astype(np.float64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def build_model(config: TransformerConfig, seed: int, dtype=None) -> TransformerModel:
    """Xavier-uniform weight matrices, zero biases, unit layer-norm gains; deterministic under seed."""
    config.validate()
    dtype = np.dtype(dtype) if dtype is not None else ad.default_dtype()
    rng = np.random.default_rng(seed)
    params = {name: Tensor(_init_array(rng, name, shape, dtype), requires_grad=True, name=name)
              for name, shape in param_shapes(config)}
    return TransformerModel(config, params, seed)


def expected_param_count(cfg: TransformerConfig) -> int:
    """Closed form for the layout above."""
    d, f, V, L = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.num_layers
    attn = 4 * d * d + 4 * d
    ff = 2 * d * f + f + d
    ln = 2 * d
    total = V * d
    if cfg.parts in ("both", "encoder"):
        total += L * (attn + ff + 2 * ln) + ln
    if cfg.parts in ("both", "decoder"):
        total += L * (2 * attn + ff + 3 * ln) + ln
        if not cfg.tie_softmax:
            total += V * d
    return total


def gather_ids(rows: List[List[int]], pad_id: int = PAD_ID) -> np.ndarray:
    width = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), max(width, 1)), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# ========== CHECKPOINTS ==========
def save_model(path: str, model: TransformerModel, vocab_hash: Optional[str] = None, step: int = 0,
               schedule: Optional[Dict[str, Any]] = None, optimizer: Optional[ad.Optimizer] = None,
               extra: Optional[Dict[str, Any]] = None) -> str:
    arrays = {f"param.{n}": a for n, a in model.param_arrays().items()}
    if optimizer is not None:
        arrays.update(optimizer.moments())
    manifest = {
        "kind": "transformer",
        "model_config": model.config.to_dict(),
        "seed": model.seed,
        "vocab_hash": vocab_hash,
        "step": step,
        "schedule": schedule or {},
        "optimizer": optimizer is not None,
        "optimizer_t": optimizer.state.t if optimizer is not None else 0,
    }
    if extra:
        manifest.update(extra)
    return checkpoint.save(path, arrays, manifest)


def model_from_arrays(manifest: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> TransformerModel:
    cfg = TransformerConfig.from_dict(manifest["model_config"])
    params = {}
    for name, shape in param_shapes(cfg):
        key = f"param.{name}"
        if key not in arrays or tuple(arrays[key].shape) != shape:
            raise IntegrityError(f"Checkpoint is missing or misshapes parameter '{name}'")
        params[name] = Tensor(arrays[key].astype(np.float32), requires_grad=True, name=name)
    return TransformerModel(cfg, params, int(manifest.get("seed", 0)))


def load_model(path: str, vocab_hash: Optional[str] = None) -> Tuple[TransformerModel, Dict[str, Any]]:
    """Load a model; when `vocab_hash` is given it must match the checkpoint's vocabulary."""
    manifest, arrays = checkpoint.load(path)
    if manifest.get("kind") != "transformer":
        raise IntegrityError(f"{path} is not a transformer checkpoint (kind={manifest.get('kind')})")
    if vocab_hash is not None and manifest.get("vocab_hash") not in (None, vocab_hash):
        raise IntegrityError("Vocabulary does not match the checkpoint (vocab hash differs)")
    return model_from_arrays(manifest, arrays), manifest
