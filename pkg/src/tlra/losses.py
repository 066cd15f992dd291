"""Alignment, prototype-structure and task objectives, and their weighted total."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .data import MODALITIES
from .numeric import Tensor, cosine_sim, ensure_tensor


class ProtocolError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.7
    lambda4: float = 0.7
    lambda5: float = 0.2
    delta: float = 0.2

    def __post_init__(self):
        for k in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass
class LossReport:
    align: float
    intra: float
    inter: float
    task: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _sqdist(a, b) -> Tensor:
    diff = ensure_tensor(a) - ensure_tensor(b)
    return (diff * diff).sum(axis=-1)


def align_loss(q: dict, completed: dict, refs: dict, weights: LossWeights) -> Tensor:
    """lambda1 * sum over observed |q - F|^2 + lambda2 * sum over missing |F_hat - F|^2.

    References are used as constants, so no gradient reaches them.
    """
    total = Tensor(0.0)
    for m, v in q.items():
        if m not in refs:
            raise ProtocolError(f"no reference feature for observed modality {m}")
        total = total + weights.lambda1 * _sqdist(v, ensure_tensor(refs[m]).detach())
    for m, v in completed.items():
        if m not in refs:
            raise ProtocolError(f"no reference feature for missing modality {m}")
        total = total + weights.lambda2 * _sqdist(v, ensure_tensor(refs[m]).detach())
    return total


def align_loss_batch(q: Tensor, completed: Tensor, refs, obs: np.ndarray, weights: LossWeights) -> Tensor:
    """Batch mean of align_loss; q, completed, refs are (B, 3, d), obs is a (B, 3) 0/1 mask."""
    refs = ensure_tensor(refs).detach()
    obs = np.asarray(obs, dtype=np.float64)
    per = weights.lambda1 * (_sqdist(q, refs) * obs) + weights.lambda2 * (_sqdist(completed, refs) * (1.0 - obs))
    return per.sum(axis=1).mean()


def _anchors(bank) -> tuple[Tensor, Tensor]:
    a = bank if isinstance(bank, Tensor) else ensure_tensor(getattr(bank, "anchors", bank))
    return a[:, 0, :], a[:, 1, :]


def intra_loss(bank, delta: float = 0.2, variant: str = "separation") -> Tensor:
    """Per-modality hinge on cos(B^P, B^N).

    ``separation`` penalises P/N similarity above ``delta``; ``literal``
    is max(0, delta - cos) as the objective is usually printed.
    """
    pos, neg = _anchors(bank)
    c = cosine_sim(pos, neg)
    if variant == "separation":
        return (c - delta).relu().sum()
    if variant == "literal":
        return (delta - c).relu().sum()
    raise ValueError(f"unknown intra variant {variant!r}")


def inter_loss(bank) -> Tensor:
    """Sum over ordered modality pairs of (1 - cos) between same-class anchors."""
    pos, neg = _anchors(bank)
    total = Tensor(0.0)
    for i, j in itertools.permutations(range(len(MODALITIES)), 2):
        total = total + (1.0 - cosine_sim(pos[i], pos[j])) + (1.0 - cosine_sim(neg[i], neg[j]))
    return total


def task_loss(pred, target, kind: str = "mae") -> Tensor:
    pred, target = ensure_tensor(pred), ensure_tensor(target)
    diff = pred - target
    if kind == "mae":
        return diff.abs().mean()
    if kind == "mse":
        return (diff * diff).mean()
    raise ValueError(f"unknown task loss {kind!r}")


def total_loss(align, intra, inter, task, weights: LossWeights):
    """lambda3 intra + lambda4 inter + lambda5 task + align (align carries its own weights)."""
    return weights.lambda3 * intra + weights.lambda4 * inter + weights.lambda5 * task + align
