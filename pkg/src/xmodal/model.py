"""Shared encoder with two classifier heads, trained by hand-derived backprop and SGD."""

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_matrix, check_count, check_real
from .exceptions import ConfigError, ParseError, TrainingError
from .losses import softmax

PARAM_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "head_v_w", "head_v_b", "head_r_w", "head_r_b")
HEADS = ("visible", "infrared")
CHECKPOINT_MAGIC = "xmodal-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Encoder ``D_in -> H (tanh) -> D_emb`` and affine heads ``D_emb -> C_v`` / ``D_emb -> C_r``."""

    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    head_v_w: np.ndarray
    head_v_b: np.ndarray
    head_r_w: np.ndarray
    head_r_b: np.ndarray

    @classmethod
    def init(cls, d_in, hidden, d_emb, n_classes_v, n_classes_r, seed=0):
        check_count(d_in, "d_in")
        check_count(hidden, "hidden")
        check_count(d_emb, "d_emb", 2)
        check_count(n_classes_v, "n_classes_v")
        check_count(n_classes_r, "n_classes_r")
        rng = np.random.default_rng(seed)
        return cls(
            rng.standard_normal((d_in, hidden)) / np.sqrt(d_in),
            np.zeros(hidden),
            rng.standard_normal((hidden, d_emb)) / np.sqrt(hidden),
            np.zeros(d_emb),
            rng.standard_normal((d_emb, n_classes_v)) / np.sqrt(d_emb),
            np.zeros(n_classes_v),
            rng.standard_normal((d_emb, n_classes_r)) / np.sqrt(d_emb),
            np.zeros(n_classes_r),
        )

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def copy(self):
        return ModelParams(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(a, b) for (_, a), (_, b) in zip(self.items(), other.items()))

    @property
    def d_in(self):
        return self.enc_w1.shape[0]

    @property
    def d_emb(self):
        return self.enc_w2.shape[1]

    @property
    def n_classes(self):
        return {"visible": self.head_v_w.shape[1], "infrared": self.head_r_w.shape[1]}

    def head(self, name):
        if name == "visible":
            return self.head_v_w, self.head_v_b
        if name == "infrared":
            return self.head_r_w, self.head_r_b
        raise ValueError(f"unknown head {name!r}")


@dataclass(frozen=True)
class SgdConfig:
    lr_stage1: float = 0.1
    lr_stage2: float = 0.01
    momentum: float = 0.9
    warmup_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        check_real(self.lr_stage1, "lr_stage1", low=0, low_open=True)
        check_real(self.lr_stage2, "lr_stage2", low=0, low_open=True)
        check_real(self.momentum, "momentum", low=0, high=1, high_open=True)
        check_count(self.warmup_epochs, "warmup_epochs", 0)


@dataclass
class ForwardCache:
    """Intermediates of a forward pass through the encoder and both heads."""

    X: np.ndarray
    hidden: np.ndarray
    raw: np.ndarray
    norms: np.ndarray
    embeddings: np.ndarray
    zero_rows: np.ndarray
    probs: dict = field(default_factory=dict)


def forward_all(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d_in:
        raise ConfigError(f"expected inputs with {params.d_in} columns, got shape {X.shape}")
    hidden = np.tanh(X @ params.enc_w1 + params.enc_b1)
    raw = hidden @ params.enc_w2 + params.enc_b2
    norms = np.sqrt(np.sum(raw * raw, axis=1))
    zero_rows = norms == 0
    emb = raw / np.where(zero_rows, 1.0, norms)[:, None]
    probs = {}
    for name in HEADS:
        w, b = params.head(name)
        probs[name] = softmax(emb @ w + b)
    return ForwardCache(X, hidden, raw, norms, emb, zero_rows, probs)


def forward(params, X, head):
    """Embeddings (unit rows, zero rows left as is) and softmax probabilities of one head."""
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    cache = forward_all(params, as_matrix(X))
    return cache.embeddings, cache.probs[head]


def backward(params, cache, grad_emb=None, grad_logits_v=None, grad_logits_r=None):
    """Chain-rule parameter gradients from gradients w.r.t. embeddings and head logits."""
    B = cache.X.shape[0]
    g_emb = np.zeros((B, params.d_emb)) if grad_emb is None else np.array(grad_emb, dtype=np.float64)
    grads = {}
    for name, g_logits, prefix in (("visible", grad_logits_v, "head_v"), ("infrared", grad_logits_r, "head_r")):
        w, _ = params.head(name)
        if g_logits is None:
            grads[f"{prefix}_w"] = np.zeros_like(w)
            grads[f"{prefix}_b"] = np.zeros(w.shape[1])
            continue
        grads[f"{prefix}_w"] = cache.embeddings.T @ g_logits
        grads[f"{prefix}_b"] = g_logits.sum(axis=0)
        g_emb = g_emb + g_logits @ w.T

    f = cache.embeddings
    safe = np.where(cache.zero_rows, 1.0, cache.norms)[:, None]
    g_raw = (g_emb - f * np.sum(f * g_emb, axis=1, keepdims=True)) / safe
    g_raw[cache.zero_rows] = g_emb[cache.zero_rows]

    grads["enc_w2"] = cache.hidden.T @ g_raw
    grads["enc_b2"] = g_raw.sum(axis=0)
    g_pre = (g_raw @ params.enc_w2.T) * (1.0 - cache.hidden**2)
    grads["enc_w1"] = cache.X.T @ g_pre
    grads["enc_b1"] = g_pre.sum(axis=0)
    return grads


def evaluate_closure(params, X, loss_closure):
    """Run forward, then the closure; returns ``(value, grads_by_param)``.

    ``loss_closure(cache)`` must return ``(value, {"embeddings": ..., "logits_v": ..., "logits_r": ...})``
    where any key may be omitted.
    """
    cache = forward_all(params, X)
    value, g = loss_closure(cache)
    for key, arr in g.items():
        if arr is not None and not np.all(np.isfinite(arr)):
            raise TrainingError(f"non-finite gradient from loss term '{key}'")
    grads = backward(params, cache, g.get("embeddings"), g.get("logits_v"), g.get("logits_r"))
    for name, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
    return float(value), grads


class MomentumSGD:
    """SGD with heavy-ball momentum: ``buf = mu * buf + g``; ``p -= lr * buf``."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.buffers = {}

    def step(self, params, grads, lr):
        for name in PARAM_NAMES:
            g = grads[name]
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            if lr:
                setattr(params, name, getattr(params, name) - lr * buf)
        return params


def backward_and_step(params, batch_inputs, loss_closure, optimizer, lr):
    """One SGD step on ``params`` (updated in place); returns ``(params, loss)``."""
    value, grads = evaluate_closure(params, batch_inputs, loss_closure)
    optimizer.step(params, grads, lr)
    return params, value


def grad_check(params, batch, loss_closure, step=1e-5, analytic=None, per_block=False):
    """Largest relative disagreement between analytic and central-difference gradients.

    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``. Pass
    ``analytic`` to check a supplied gradient dict instead of the one produced
    by :func:`backward` (useful to confirm the checker catches bad gradients).
    """
    check_real(step, "step", low=0, low_open=True)
    if analytic is None:
        _, analytic = evaluate_closure(params, batch, loss_closure)
    probe = params.copy()
    worst = {}
    for name in PARAM_NAMES:
        arr = getattr(probe, name)
        a = analytic[name]
        err = 0.0
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = loss_closure(forward_all(probe, batch))[0]
            arr[idx] = orig - step
            f_minus = loss_closure(forward_all(probe, batch))[0]
            arr[idx] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            err = max(err, abs(a[idx] - num) / max(1e-8, abs(a[idx]) + abs(num)))
        worst[name] = err
    overall = max(worst.values())
    return (overall, worst) if per_block else overall


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(params, path):
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for name, arr in params.items():
        lines.append(f"{name} {arr.ndim} " + " ".join(str(s) for s in arr.shape))
        lines.append(" ".join(f"{x:.17g}" for x in arr.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split() != [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION)]:
        raise ParseError("not a version-1 xmodal checkpoint", line=1)
    arrays = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        try:
            name, ndim = head[0], int(head[1])
            shape = tuple(int(s) for s in head[2:2 + ndim])
        except (IndexError, ValueError):
            raise ParseError("bad parameter header", line=i + 1) from None
        if name not in PARAM_NAMES or len(shape) != ndim:
            raise ParseError(f"unexpected parameter header {lines[i]!r}", line=i + 1)
        if i + 1 >= len(lines):
            raise ParseError(f"missing values for {name}", line=i + 2)
        tokens = lines[i + 1].split()
        try:
            values = np.array([float(t) for t in tokens])
        except ValueError:
            raise ParseError(f"non-numeric value in {name}", line=i + 2) from None
        if values.size != int(np.prod(shape)):
            raise ParseError(f"{name}: expected {int(np.prod(shape))} values, got {values.size}", line=i + 2)
        arrays[name] = values.reshape(shape)
        i += 2
    missing = [n for n in PARAM_NAMES if n not in arrays]
    if missing:
        raise ParseError(f"checkpoint lacks {', '.join(missing)}")
    return ModelParams(**arrays)
