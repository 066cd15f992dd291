"""Per-modality positive/negative prototype memory, soft guidance and voting."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import MODALITIES, Modality
from .numeric import DegenerateInputError, Tensor, cosine_sim, ensure_tensor, where

log = logging.getLogger(__name__)

P, N = 0, 1
CLASSES = ("P", "N")


def class_of(label: float) -> int:
    return P if label >= 0 else N


def _cls(c) -> int:
    if c in (P, N):
        return int(c)
    if c in CLASSES:
        return CLASSES.index(c)
    raise ValueError(f"unknown class {c!r}")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / (np.linalg.norm(v) + 1e-12)


class PrototypeBank:
    """anchors[m, c] is the unit-norm anchor of modality m and class c (P=0, N=1).

    The bank is a running statistic: it is updated by momentum mixing,
    never by gradient descent.
    """

    def __init__(self, d: int, eta: float = 0.1, rng: np.random.Generator | None = None, anchors=None):
        if not 0.0 <= eta <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.d = d
        self.eta = eta
        if anchors is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            anchors = rng.standard_normal((3, 2, d))
        anchors = np.asarray(anchors, dtype=np.float64)
        if anchors.shape != (3, 2, d):
            raise ValueError(f"anchors must have shape (3, 2, {d})")
        norms = np.linalg.norm(anchors, axis=-1, keepdims=True)
        if np.any(norms == 0):
            raise DegenerateInputError("prototype anchors must be nonzero")
        self.anchors = anchors / norms

    def get(self, m: Modality, c) -> np.ndarray:
        return self.anchors[Modality(m).index, _cls(c)]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.d, self.eta, anchors=self.anchors.copy())

    def max_norm_error(self) -> float:
        return float(np.max(np.abs(np.linalg.norm(self.anchors, axis=-1) - 1.0)))

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "d": self.d,
            **{f"{m.value}_{c}": self.anchors[m.index, i].tolist() for m in MODALITIES for i, c in enumerate(CLASSES)},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PrototypeBank":
        d = int(obj["d"])
        anchors = np.array([[obj[f"{m.value}_{c}"] for c in CLASSES] for m in MODALITIES], dtype=np.float64)
        bank = cls(d, float(obj["eta"]), anchors=np.ones((3, 2, d)))
        bank.anchors = anchors
        return bank


def mix_prototype(F, bank: PrototypeBank, m: Modality, c) -> tuple[Tensor, Tensor]:
    """(alpha_m, B') with alpha_m = clamp(cos(F, B), 0, 1) and B' = alpha_m F + (1 - alpha_m) B."""
    F = ensure_tensor(F)
    if np.all(F.data == 0):
        raise DegenerateInputError("cannot mix a zero feature into the prototype")
    B = bank.get(m, c)
    alpha = cosine_sim(F, B).clip(0.0, 1.0)
    a = alpha.unsqueeze(-1) if alpha.ndim else alpha
    return alpha, a * F + (1.0 - a) * B


def update_bank(bank: PrototypeBank, F, c, m: Modality) -> PrototypeBank:
    """Momentum update of one anchor, in place; returns the bank."""
    F = np.asarray(F.data if isinstance(F, Tensor) else F, dtype=np.float64)
    i, j = Modality(m).index, _cls(c)
    try:
        _, mixed = mix_prototype(F, bank, m, j)
    except DegenerateInputError:
        log.warning("skipping prototype update for %s/%s: zero feature", Modality(m).value, CLASSES[j])
        return bank
    mixed = mixed.data
    if np.linalg.norm(mixed) == 0:
        log.warning("skipping prototype update for %s/%s: zero mix", Modality(m).value, CLASSES[j])
        return bank
    if bank.eta == 0:
        return bank
    new = (1.0 - bank.eta) * bank.anchors[i, j] + bank.eta * _unit(mixed)
    if np.linalg.norm(new) == 0:
        log.warning("skipping prototype update for %s/%s: momentum cancelled", Modality(m).value, CLASSES[j])
        return bank
    bank.anchors[i, j] = new / np.linalg.norm(new)
    return bank


@dataclass
class GuidanceResult:
    s_pos: Tensor
    s_neg: Tensor
    vote: int
    selected: np.ndarray
    beta: Tensor
    guided: Tensor


def soft_guidance(F, bank: PrototypeBank, m: Modality) -> GuidanceResult:
    """Pull F toward its nearer class anchor by 1 - beta, beta = clamp(max cosine, 0, 1)."""
    F = ensure_tensor(F)
    bp, bn = bank.get(m, P), bank.get(m, N)
    sp, sn = cosine_sim(F, bp), cosine_sim(F, bn)
    vote = P if sp.item() >= sn.item() else N
    selected = bp if vote == P else bn
    beta = (sp if vote == P else sn).clip(0.0, 1.0)
    guided = beta * F + (1.0 - beta) * selected
    return GuidanceResult(sp, sn, vote, selected, beta, guided)


def majority(votes) -> int | None:
    """Majority class of the given votes, or None on a tie."""
    votes = list(votes)
    if not votes:
        raise ValueError("no votes")
    npos = sum(1 for v in votes if v == P)
    nneg = len(votes) - npos
    if npos == nneg:
        return None
    return P if npos > nneg else N


def vote_and_suppress(results: dict, bank: PrototypeBank) -> dict:
    """Replace modalities that disagree with the majority vote by the majority anchor."""
    if not results:
        raise ValueError("vote_and_suppress needs at least one modality")
    maj = majority(r.vote for r in results.values())
    out = {}
    for m, r in results.items():
        if maj is None or r.vote == maj:
            out[m] = r.guided
        else:
            out[m] = Tensor(bank.get(m, maj))
    return out


# ---- batched forms used by the model -------------------------------------------

def guidance_batch(G: Tensor, bank: PrototypeBank) -> tuple[Tensor, np.ndarray, Tensor, Tensor]:
    """Soft guidance for a (B, 3, d) feature block.

    Returns guided features, (B, 3) votes, and the positive/negative cosine
    scores.
    """
    bp = bank.anchors[:, P, :]
    bn = bank.anchors[:, N, :]
    sp = cosine_sim(G, bp)
    sn = cosine_sim(G, bn)
    pos = sp.data >= sn.data
    votes = np.where(pos, P, N)
    beta = where(pos, sp, sn).clip(0.0, 1.0).unsqueeze(-1)
    selected = np.where(pos[..., None], bp[None], bn[None])
    guided = beta * G + (1.0 - beta) * selected
    return guided, votes, sp, sn


def suppress_batch(guided: Tensor, votes: np.ndarray, voters: np.ndarray, bank: PrototypeBank) -> tuple[Tensor, np.ndarray]:
    """Batched voting over a (B, 3, d) block.

    ``voters`` marks the modalities whose votes count; every slot that
    disagrees with the majority is replaced, voter or not. Returns the
    outputs and a (B, 3) boolean mask of suppressed entries.
    """
    voters = np.asarray(voters, dtype=bool)
    npos = ((votes == P) & voters).sum(axis=1)
    nneg = ((votes == N) & voters).sum(axis=1)
    maj = np.where(npos > nneg, P, N)
    decided = npos != nneg
    suppressed = decided[:, None] & (votes != maj[:, None])
    idx = np.arange(3)
    replacement = bank.anchors[idx[None, :], maj[:, None]]  # (B, 3, d)
    return where(suppressed[..., None], replacement, guided), suppressed
