"""The three training criteria, their gradients, and the matching decode rules.

The numpy functions are the reference: they work on probabilities or
pre-activations and come with closed-form gradients. :func:`torch_criterion`
gives the autograd versions the trainer optimizes; the test-suite pins the
two against each other.

Head widths: cross-entropy 4 logits, MSE 1 scalar, ordinal 3 threshold logits.
"""
from __future__ import annotations

import enum

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyBatch, NonFinite
from .ingest import NUM_CLASSES

PROB_EPS = 1e-7


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    MSE = "mse"
    ORDINAL = "ordinal_cross_entropy"

    @property
    def short(self) -> str:
        return _SHORT[self]

    @property
    def head_width(self) -> int:
        return _WIDTH[self]

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        text = text.strip().lower()
        for kind, short in _SHORT.items():
            if text in (short, kind.value):
                return kind
        raise ValueError(f"unknown loss {text!r}; expected one of ce, mse, ordinal")


_SHORT = {LossKind.CROSS_ENTROPY: "ce", LossKind.MSE: "mse", LossKind.ORDINAL: "ordinal"}
_WIDTH = {LossKind.CROSS_ENTROPY: NUM_CLASSES, LossKind.MSE: 1, LossKind.ORDINAL: NUM_CLASSES - 1}


def _targets(targets) -> np.ndarray:
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.size == 0:
        raise EmptyBatch("empty batch")
    return t


def _rows(x, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, width)


# --- cross-entropy -----------------------------------------------------------

def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(probs, target) -> float:
    """Mean of ``-log p[target]`` over the batch; accepts one row or a batch."""
    p = _rows(probs, NUM_CLASSES)
    t = _targets(target)
    picked = np.clip(p[np.arange(len(t)), t], PROB_EPS, 1.0)
    return float(np.mean(-np.log(picked)))


def cross_entropy_logits(logits, targets) -> float:
    z = _rows(logits, NUM_CLASSES)
    t = _targets(targets)
    return float(np.mean(-log_softmax(z)[np.arange(len(t)), t]))


def cross_entropy_logits_grad(logits, targets) -> np.ndarray:
    z = _rows(logits, NUM_CLASSES)
    t = _targets(targets)
    g = softmax(z)
    g[np.arange(len(t)), t] -= 1.0
    return g / len(t)


# --- mean squared error --------------------------------------------------------

def mse_loss(preds, targets) -> float:
    y_hat = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = _targets(targets).astype(np.float64)
    if y_hat.size != y.size:
        raise ValueError("preds and targets differ in length")
    return float(np.mean((y - y_hat) ** 2))


def mse_grad(preds, targets) -> np.ndarray:
    y_hat = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = _targets(targets).astype(np.float64)
    return 2.0 * (y_hat - y) / y.size


def mse_decode(scalar) -> int:
    """Nearest class, halves rounded away from zero, clamped to the valid range."""
    x = float(scalar)
    if not np.isfinite(x):
        raise NonFinite(f"cannot decode {x!r}")
    rounded = np.sign(x) * np.floor(abs(x) + 0.5)
    return int(np.clip(rounded, 0, NUM_CLASSES - 1))


# --- ordinal cross-entropy ----------------------------------------------------

def ordinal_encode(target) -> np.ndarray:
    """Cumulative code: class k becomes k ones followed by zeros."""
    k = int(target)
    if not 0 <= k < NUM_CLASSES:
        raise ValueError(f"class index {k} out of range")
    return (np.arange(NUM_CLASSES - 1) < k).astype(np.int64)


def ordinal_targets(targets) -> np.ndarray:
    t = _targets(targets)
    return (np.arange(NUM_CLASSES - 1)[None, :] < t[:, None]).astype(np.float64)


def ordinal_ce(sigmoid3, target, eps: float = PROB_EPS) -> float:
    """Summed per-threshold binary cross-entropy, averaged over the batch."""
    s = np.clip(_rows(sigmoid3, NUM_CLASSES - 1), eps, 1.0 - eps)
    y = ordinal_targets(target)
    bce = -(y * np.log(s) + (1.0 - y) * np.log1p(-s))
    return float(np.mean(bce.sum(axis=1)))


def softplus(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-softplus(-x))


def ordinal_ce_logits(logits, targets) -> float:
    z = _rows(logits, NUM_CLASSES - 1)
    y = ordinal_targets(targets)
    # BCE(sigmoid(z), y) = softplus(z) - y*z
    return float(np.mean((softplus(z) - y * z).sum(axis=1)))


def ordinal_ce_logits_grad(logits, targets) -> np.ndarray:
    z = _rows(logits, NUM_CLASSES - 1)
    y = ordinal_targets(targets)
    return (sigmoid(z) - y) / len(y)


def ordinal_decode(sigmoid3, rule: str = "scan"):
    """Class from threshold probabilities.

    ``scan`` counts leading thresholds above 0.5 and stops at the first one
    that is not; ``count`` counts every threshold above 0.5. They disagree
    only on non-monotone outputs. Returns an int for one row, an array for a batch.
    """
    s = np.asarray(sigmoid3, dtype=np.float64)
    rows = s.reshape(-1, NUM_CLASSES - 1) > 0.5
    if rule == "scan":
        k = np.cumprod(rows, axis=1).sum(axis=1)
    elif rule == "count":
        k = rows.sum(axis=1)
    else:
        raise ValueError(f"unknown ordinal decode rule {rule!r}")
    return int(k[0]) if s.ndim == 1 else k.astype(np.int64)


# --- dispatch ------------------------------------------------------------------

LOSS_FROM_LOGITS = {
    LossKind.CROSS_ENTROPY: (cross_entropy_logits, cross_entropy_logits_grad),
    LossKind.MSE: (mse_loss, mse_grad),
    LossKind.ORDINAL: (ordinal_ce_logits, ordinal_ce_logits_grad),
}


def decode_scores(kind: LossKind, scores, ordinal_rule: str = "scan") -> np.ndarray:
    """Class predictions for a batch of raw head outputs."""
    s = np.asarray(scores, dtype=np.float64).reshape(len(scores), -1)
    if kind is LossKind.CROSS_ENTROPY:
        return s.argmax(axis=1)
    if kind is LossKind.MSE:
        return np.array([mse_decode(v) for v in s[:, 0]], dtype=np.int64)
    return ordinal_decode(sigmoid(s), rule=ordinal_rule)


def torch_criterion(kind: LossKind):
    """Batch-mean loss over raw head outputs and integer targets."""
    if kind is LossKind.CROSS_ENTROPY:
        return F.cross_entropy
    if kind is LossKind.MSE:
        def mse(out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
            return F.mse_loss(out.reshape(-1), target.to(out.dtype))
        return mse

    thresholds = torch.arange(NUM_CLASSES - 1)

    def ordinal(out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        bits = (thresholds[None, :] < target[:, None]).to(out.dtype)
        per_bit = F.binary_cross_entropy_with_logits(out, bits, reduction="none")
        return per_bit.sum(dim=1).mean()
    return ordinal
