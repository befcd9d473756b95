from __future__ import annotations
import json
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils import ConfigError, read_json, write_json

# ---- Paths ----
ROOT_DIR = os.path.dirname(os.path.abspath(__file__))
DATA_DIR = os.path.join(ROOT_DIR, "data")
FIXTURE_DIR = os.path.join(DATA_DIR, "fixtures")
CONFIG_DIR = os.path.join(ROOT_DIR, "configs")
RUNS_DIR = os.path.abspath("runs")

# ---- Corpus ----
DEFAULT_SYSTEM_PROMPT = "Traduire cette phrase du français en bambara"
SPLIT_RATIOS = (0.8, 0.1, 0.1)
REPETITION_THRESHOLD = 4

# ---- Segmentation ----
DEFAULT_NUM_MERGES = 5000
CONTINUATION = "@@"
PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

# ---- Optimization ----
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ADAMW_WEIGHT_DECAY = 0.01
LR_FLOOR = 1e-10
LABEL_SMOOTHING = 0.1
PATIENCE = 4

# ---- Model / decoding ----
MAX_LEN = 128
LENGTH_ALPHA = 1.0
BEAM_WIDTHS = (5, 10)

# ---- LoRA ----
LORA_RANKS = (8, 16)
LORA_INIT_STD = 0.01
LORA_TARGETS = ("q", "v")

# ---- Analysis ----
HIST_BINS = 50
PCA_TOL = 1e-9
PCA_MAX_ITER = 1000


# ========== RUN CONFIG SECTIONS ==========
class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PreprocessSection(_Strict):
    """Rule toggles; the rule order itself is fixed."""
    drop_links: bool = True
    drop_repetition: bool = True
    clean_pairs: bool = True
    dedup: bool = True
    repetition_threshold: int = Field(REPETITION_THRESHOLD, ge=2)
    input_format: Literal["tsv", "pair"] = "tsv"
    src_lang: str = "fr"
    tgt_lang: str = "bm"
    system_prompt: str = DEFAULT_SYSTEM_PROMPT


class SplitSection(_Strict):
    ratios: Tuple[float, float, float] = SPLIT_RATIOS

    @field_validator("ratios")
    @classmethod
    def _sum_to_one(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1.0, got {sum(v)}")
        if any(r < 0 for r in v):
            raise ValueError("ratios must be non-negative")
        return v


class BpeSection(_Strict):
    num_merges: int = Field(DEFAULT_NUM_MERGES, ge=0)


class SynthSection(_Strict):
    n: int = Field(64, ge=1)
    vocab_size: int = Field(20, ge=4)
    min_words: int = Field(3, ge=1)
    max_words: int = Field(6, ge=1)


class TrainSection(_Strict):
    """Keys mirror the hyper-parameter table of the first pipeline verbatim."""
    model_architecture: Literal["T1", "T2", "T3", "T1-quarter"] = "T1"
    embedding_dimension: Optional[int] = None
    epochs: int = Field(300, ge=0)
    token_batch_size: int = Field(..., ge=1)
    beam_width: int = Field(5, ge=1)
    lr_initial: float = Field(5e-5, gt=0)
    lr_min: float = Field(LR_FLOOR, ge=0)
    lr_decrease_factor: float = Field(0.5, gt=0, le=1)
    dropout: float = Field(0.2, ge=0, lt=1)
    # not part of the table
    scheduler: Literal["constant", "linear", "plateau", "cyclic"] = "plateau"
    lr_max: Optional[float] = None
    cycle_step_size: Optional[int] = None
    cycle_mode: Literal["triangular", "triangular2", "exp_range"] = "triangular"
    patience: int = Field(PATIENCE, ge=1)
    lr_patience: int = Field(2, ge=1)
    validate_every: int = Field(1, ge=1)
    label_smoothing: float = Field(LABEL_SMOOTHING, ge=0, lt=1)
    max_len: int = Field(MAX_LEN, ge=2)
    length_alpha: float = LENGTH_ALPHA
    tie_softmax: bool = True
    optimizer: Literal["adam", "adamw"] = "adam"
    weight_decay: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _lr_bounds(self) -> "TrainSection":
        if self.lr_min > self.lr_initial:
            raise ValueError("lr_min must not exceed lr_initial")
        return self


class LoraSection(_Strict):
    rank: int = Field(8, ge=1)
    alpha: Optional[float] = None
    targets: List[str] = Field(default_factory=lambda: list(LORA_TARGETS))
    epochs: int = Field(3, ge=0)
    lr: float = Field(5e-5, gt=0)
    scheduler: Literal["linear", "constant"] = "linear"
    batch_size: int = Field(8, ge=1)


class DistillSection(_Strict):
    model_architecture: Literal["T1", "T2", "T3", "T1-quarter"] = "T1-quarter"
    embedding_dimension: Optional[int] = None
    max_len: int = Field(MAX_LEN, ge=2)
    teacher_noise: float = Field(0.15, ge=0, lt=1)
    epochs: int = Field(100, ge=0)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(ADAMW_WEIGHT_DECAY, ge=0)
    batch_size: int = Field(16, ge=1)
    teacher_epochs: int = Field(30, ge=0)
    loss_reduction: Literal["sum", "mean"] = "sum"
    lora_rank: Optional[int] = None
    mix_weights: List[float] = Field(default_factory=list)


class BridgeSection(_Strict):
    epochs: int = Field(40, ge=0)
    lr: float = Field(1e-3, gt=0)
    token_batch_size: int = Field(256, ge=1)
    decoder_layers: int = Field(2, ge=1)


class EvaluateSection(_Strict):
    beam_width: int = Field(5, ge=1)
    smooth: Literal["none", "floor", "add-k", "exp"] = "none"


class AnalyzeSection(_Strict):
    bins: int = Field(HIST_BINS, ge=1)


class RunConfig(_Strict):
    seed: int = 1
    paths: Dict[str, str] = Field(default_factory=dict)
    preprocess: PreprocessSection = Field(default_factory=PreprocessSection)
    split: SplitSection = Field(default_factory=SplitSection)
    bpe: BpeSection = Field(default_factory=BpeSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    train: Optional[TrainSection] = None
    lora: LoraSection = Field(default_factory=LoraSection)
    distill: DistillSection = Field(default_factory=DistillSection)
    bridge: BridgeSection = Field(default_factory=BridgeSection)
    evaluate: EvaluateSection = Field(default_factory=EvaluateSection)
    analyze: AnalyzeSection = Field(default_factory=AnalyzeSection)


# ========== LOADING ==========
def _format_validation_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e.get("loc", ()))
        parts.append(f"{loc}: {e.get('msg')}")
    return "; ".join(parts)


def _coerce_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """
    Apply `--set key=value` overrides on dotted paths.
    E.g., "train.lr_initial=5e-5" -> raw["train"]["lr_initial"] = 5e-05
    """
    out = json.loads(json.dumps(raw))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"Override must look like key=value: {item!r}")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Cannot override below scalar key: {key}")
        node[parts[-1]] = _coerce_scalar(value.strip())
    return out


def parse_config(raw: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {_format_validation_error(e)}") from e


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None,
                seed: Optional[int] = None) -> RunConfig:
    raw: Dict[str, Any] = read_json(path) if path else {}
    if not isinstance(raw, dict):
        raise ConfigError("Config root must be a JSON object")
    raw = apply_overrides(raw, overrides or [])
    if seed is not None:
        raw["seed"] = seed
    return parse_config(raw)


def require_train(cfg: RunConfig) -> TrainSection:
    if cfg.train is None:
        raise ConfigError("Invalid config: train: section is required (token_batch_size: Field required)")
    return cfg.train


def write_resolved(cfg: RunConfig, out_dir: str) -> str:
    path = os.path.join(out_dir, "resolved_config.json")
    write_json(path, cfg.model_dump(mode="json"))
    return path
