# autodiff.py - Minimal reverse-mode automatic differentiation on numpy
# Responsibility: Tensor, Tape, differentiable ops, optimizers and learning-rate schedules
from __future__ import annotations
import contextlib
import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import ADAM_BETAS, ADAM_EPS, LR_FLOOR, PATIENCE
from utils import ConfigError, DimensionError, LabError, NumericError, rng_for

LN_EPS = 1e-6
ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


# ========== PRECISION ==========
_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype of newly created tensors (float64 for gradient checks)."""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


# ========== TENSOR ==========
class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and np.issubdtype(data.dtype, np.floating):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other): return add(self, _wrap(other, self))
    def __radd__(self, other): return add(_wrap(other, self), self)
    def __sub__(self, other): return sub(self, _wrap(other, self))
    def __rsub__(self, other): return sub(_wrap(other, self), self)
    def __mul__(self, other): return mul(self, _wrap(other, self))
    def __rmul__(self, other): return mul(_wrap(other, self), self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


# ========== TAPE ==========
@dataclass
class _Record:
    out: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of differentiable ops executed while the tape is active.
    Ops run outside any tape are forward-only.
    """

    def __init__(self) -> None:
        self.records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> None:
        out.requires_grad = True
        out._tape = self
        self.records.append(_Record(out, tuple(inputs), fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise LabError("backward() already ran on this tape; record a new tape first")
        if loss.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=inp.data.dtype)
                if gi.shape != inp.shape:
                    gi = _unbroadcast(gi, inp.shape)
                inp.grad = gi if inp.grad is None else inp.grad + gi


def _tape_stack() -> List[Tape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _track(out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`."""
    if loss._tape is None:
        raise LabError("Loss was not computed under an active Tape")
    loss._tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ========== ELEMENTWISE ==========
def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _track(Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return _track(Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return _track(Tensor(a.data * b.data), (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _track(Tensor(x.data * c), (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _track(Tensor(np.where(mask, x.data, x.dtype.type(0))), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, p: float, key: Sequence[int] = (0,), training: bool = True) -> Tensor:
    """
    Inverted dropout. The mask is drawn from a counter-based generator keyed by
    (seed, layer, step, site), so replaying a run replays its masks.
    """
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ConfigError(f"dropout probability must be < 1, got {p}")
    keep = (rng_for(*key).random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _track(Tensor(x.data * keep), (x,), lambda g: (g * keep,))


# ========== SHAPE ==========
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _track(Tensor(out), (a, b), _bw)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _track(Tensor(np.transpose(x.data, axes)), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _track(Tensor(out), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}") from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _track(Tensor(out), tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding_lookup: ids outside [0, {table.shape[0]})")

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _track(Tensor(table.data[ids]), (table,), _bw)


# ========== REDUCTIONS ==========
def sum_(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _track(Tensor(np.asarray(out, dtype=x.dtype)), (x,), _bw)


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    total = sum_(x, axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(total, 1.0 / n)


# ========== FUSED ==========
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _track(Tensor(y), (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _track(Tensor(y), (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    n = x.shape[-1]

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _track(Tensor(xhat * gain.data + bias.data), (x, gain, bias), _bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, x.dtype.type(eps))
    y = x.data / norm
    return _track(Tensor(y), (x,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,))


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: Optional[int] = 0,
                  label_smoothing: float = 0.0) -> Tensor:
    """
    Mean token NLL over non-pad positions. With smoothing eps the target keeps 1-eps
    and eps is spread evenly over the other non-pad entries.
    E.g., logits (0, ln 3), target 1 -> ln(4/3)
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    V = logits.shape[-1]
    mask = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    count = int(mask.sum())
    if count == 0:
        raise LabError("cross_entropy: every target position is padding")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    dtype = logits.dtype
    q = np.zeros(logits.shape, dtype=dtype)
    if label_smoothing > 0.0:
        others = V - 1 if pad_id is None else V - 2
        if others < 1:
            raise ConfigError("label smoothing needs at least one non-target, non-pad class")
        q[...] = dtype.type(label_smoothing / others)
        if pad_id is not None:
            q[..., pad_id] = 0.0
    np.put_along_axis(q, targets[..., None], dtype.type(1.0 - label_smoothing), axis=-1)
    q *= mask[..., None]

    loss = -(q * logp).sum() / count
    if not np.isfinite(loss):
        raise NumericError(f"cross_entropy: non-finite loss {loss}")

    def _bw(g):
        p = np.exp(logp)
        return ((p * mask[..., None] - q) * (g / count),)

    return _track(Tensor(np.asarray(loss, dtype=dtype)), (logits,), _bw)


# ========== GRADIENT CHECKS ==========
def numeric_grad(fn: Callable[[], Union[Tensor, float]], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar fn() w.r.t. every entry of tensor.data (mutated in place, restored)."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(np.asarray(_scalar(fn())))
        flat[i] = orig - h
        minus = float(np.asarray(_scalar(fn())))
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2 * h)
    return grad


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(np.asarray(analytic, np.float64) - np.asarray(numeric, np.float64))
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return 0.0 if den == 0 else float(num / den)


# ========== OPTIMIZERS ==========
@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS
    weight_decay: float = 0.0

    def hyper(self) -> Dict[str, float]:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "t": self.t}


def _check_finite(params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> None:
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"Non-finite gradient for parameter '{name}'")


def _adam_update(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimizerState,
                 lr: float, decoupled: bool) -> OptimizerState:
    _check_finite(params, grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if p.shape != g.shape:
            raise DimensionError(f"Gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise DimensionError(f"Optimizer moments for '{name}' do not match parameter shape {p.shape}")
        dtype = p.dtype.type
        if decoupled and state.weight_decay:
            p.data -= dtype(lr * state.weight_decay) * p.data
        m *= dtype(b1)
        m += dtype(1.0 - b1) * g
        v *= dtype(b2)
        v += dtype(1.0 - b2) * (g * g)
        m_hat = m / dtype(c1)
        v_hat = v / dtype(c2)
        p.data -= dtype(lr) * m_hat / (np.sqrt(v_hat) + dtype(state.eps))
    return state


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimizerState,
              lr: float) -> OptimizerState:
    """
    Bias-corrected Adam, in place: theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    E.g., theta=0, g=1, lr=0.1, t=1 -> theta ~= -0.1
    """
    return _adam_update(params, grads, state, lr, decoupled=False)


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimizerState,
               lr: float) -> OptimizerState:
    """Adam with decoupled weight decay lr * wd * theta applied before the Adam update."""
    return _adam_update(params, grads, state, lr, decoupled=True)


class Optimizer:
    """Binds a named parameter set to Adam/AdamW and reads gradients off the tensors."""

    def __init__(self, params: Dict[str, Tensor], kind: str = "adam", weight_decay: float = 0.0):
        if kind not in ("adam", "adamw"):
            raise ConfigError(f"Unknown optimizer '{kind}'")
        self.params = params
        self.kind = kind
        self.state = OptimizerState(weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        fn = adamw_step if self.kind == "adamw" else adam_step
        fn(self.params, grads, self.state, lr)

    def moments(self) -> Dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a for n, a in self.state.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.state.v.items()})
        return out

    def load_moments(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        for key, arr in arrays.items():
            if key.startswith("adam.m."):
                self.state.m[key[len("adam.m."):]] = arr.astype(self.params[key[len("adam.m."):]].dtype)
            elif key.startswith("adam.v."):
                self.state.v[key[len("adam.v."):]] = arr.astype(self.params[key[len("adam.v."):]].dtype)
        self.state.t = t


# ========== LEARNING-RATE SCHEDULES ==========
SCHEDULE_KINDS = ("constant", "linear", "plateau", "cyclic")


@dataclass
class LrSchedule:
    kind: str
    base_lr: float
    max_lr: Optional[float] = None
    min_lr: float = LR_FLOOR
    decrease_factor: float = 0.5
    step_size: Optional[int] = None
    patience: int = PATIENCE
    total_steps: Optional[int] = None
    mode: str = "triangular"
    gamma: float = 1.0

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def plateau_events(history: Sequence[float], patience: int) -> int:
    """
    Number of completed stretches of `patience` validations without a new best.
    The stagnation counter restarts after every event.
    """
    events, stale = 0, 0
    best = -math.inf
    for score in history:
        if score > best:
            best, stale = score, 0
            continue
        stale += 1
        if stale >= patience:
            events += 1
            stale = 0
    return events


def lr_at(schedule: LrSchedule, t: int, history: Sequence[float] = ()) -> float:
    """
    E.g., cyclic with s=100: t=0 -> min_lr, t=100 -> max_lr, t=200 -> min_lr
    E.g., plateau from 5e-5 after two decay events -> 1.25e-5
    """
    if t < 0:
        raise ConfigError(f"step must be >= 0, got {t}")
    kind = schedule.kind
    floor = schedule.min_lr

    if kind == "constant":
        return schedule.base_lr

    if kind == "linear":
        if not schedule.total_steps:
            raise ConfigError("linear schedule needs total_steps")
        return max(floor, schedule.base_lr * (1.0 - t / schedule.total_steps))

    if kind == "plateau":
        k = plateau_events(history, schedule.patience)
        return max(floor, schedule.base_lr * schedule.decrease_factor ** k)

    if kind == "cyclic":
        if not schedule.step_size:
            raise ConfigError("cyclic schedule needs step_size")
        lo = floor
        hi = schedule.max_lr if schedule.max_lr is not None else schedule.base_lr
        s = schedule.step_size
        cycle = math.floor(1 + t / (2 * s))
        x = abs(t / s - 2 * cycle + 1)
        if schedule.mode == "triangular":
            amp_scale = 1.0
        elif schedule.mode == "triangular2":
            amp_scale = 1.0 / (2.0 ** (cycle - 1))
        elif schedule.mode == "exp_range":
            amp_scale = schedule.gamma ** t
        else:
            raise ConfigError(f"Unknown cyclic mode '{schedule.mode}'")
        amp = max(0.0, 1.0 - x) * amp_scale
        if amp == 0.0:
            return lo
        if amp == 1.0:
            return hi
        return lo + (hi - lo) * amp

    raise ConfigError(f"Unknown schedule kind '{kind}' (expected one of {SCHEDULE_KINDS})")
