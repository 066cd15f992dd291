"""Model container and the batched forward pass through both alignment levels."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .completion import TemplateLibrary, complete_batch
from .data import MODALITIES, MaskedView, MissingPattern, Modality, SampleRecord, SchemaError
from .encoders import DualPathEncoder, Linear
from .numeric import Parameter, Tensor, stack, where
from .prototypes import PrototypeBank, guidance_batch, suppress_batch


class Stage(enum.IntEnum):
    STAGE1 = 1
    STAGE2 = 2


class FusionHead:
    """concat(L, A, V) -> linear -> tanh -> linear -> scalar."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = Linear(3 * d, d, "fusion.fc1", rng)
        self.fc2 = Linear(d, 1, "fusion.fc2", rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).tanh())

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()


class TLRAModel:
    """All trainable parameters plus the non-gradient prototype bank."""

    def __init__(
        self,
        dims: dict,
        d: int = 32,
        K: int = 16,
        eta: float = 0.1,
        seed: int = 0,
        share_paths: bool = False,
    ):
        self.dims = {Modality(m): int(v) for m, v in dims.items()}
        self.d = d
        rng = np.random.default_rng(seed)
        self.encoder = DualPathEncoder(self.dims, d, rng, share_paths=share_paths)
        self.library = TemplateLibrary(K, d, rng)
        self.head = FusionHead(d, rng)
        self.bank = PrototypeBank(d, eta, rng)
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names")

    def parameters(self) -> list[Parameter]:
        seen, out = set(), []
        for p in self.encoder.parameters() + self.library.parameters() + self.head.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(p.data.tobytes())
        h.update(self.bank.anchors.tobytes())
        return h.hexdigest()


@dataclass
class Batch:
    """Padded per-modality inputs for B samples.

    ``x[m]`` is (B, T_max, d_m) with zero rows past each sample's length,
    ``tmask[m]`` marks the valid rows, ``obs`` is the (B, 3) observed mask.
    Unobserved modalities carry a single zero row so pooling stays defined.
    """

    x: dict
    tmask: dict
    obs: np.ndarray
    y: np.ndarray
    ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.y)


def make_batch(samples: Sequence, dims: dict, patterns: Sequence[MissingPattern] | None = None) -> Batch:
    """Build a batch from MaskedViews, or from records plus patterns.

    With records the full features of every modality are loaded (training
    needs them as alignment targets); the observed mask alone decides what
    the forward pass may use. With views only the observed features exist.
    """
    n = len(samples)
    obs = np.zeros((n, 3))
    feats = [[None] * 3 for _ in range(n)]
    for i, s in enumerate(samples):
        if isinstance(s, MaskedView):
            pattern = s.pattern
            for j, m in enumerate(MODALITIES):
                if m in pattern.observed:
                    feats[i][j] = s[m]
        elif isinstance(s, SampleRecord):
            pattern = patterns[i] if patterns is not None else MissingPattern.full()
            for j, m in enumerate(MODALITIES):
                feats[i][j] = s.features[m]
        else:
            raise TypeError(f"cannot batch {type(s).__name__}")
        obs[i] = pattern.mask()
    x, tmask = {}, {}
    for j, m in enumerate(MODALITIES):
        d_m = dims[m]
        lens = [1 if f[j] is None else f[j].shape[0] for f in feats]
        t_max = max(lens)
        arr = np.zeros((n, t_max, d_m))
        mask = np.zeros((n, t_max))
        for i, f in enumerate(feats):
            mask[i, : lens[i]] = 1.0
            if f[j] is not None:
                if f[j].shape[1] != d_m:
                    raise SchemaError(f"sample {getattr(samples[i], 'id', i)!r}: modality {m.value} has {f[j].shape[1]} features, model expects {d_m}")
                arr[i, : lens[i]] = f[j]
        x[m], tmask[m] = arr, mask
    y = np.array([float(s.label) for s in samples])
    return Batch(x, tmask, obs, y, [getattr(s, "id", str(i)) for i, s in enumerate(samples)])


@dataclass
class Switches:
    """Which alignment components the forward pass uses."""

    completion: bool = True
    guidance: bool = True
    voting: bool = True
    # "observed": only truly observed modalities vote; "all": completed slots vote too
    voters: str = "observed"


@dataclass
class Intermediates:
    F: Tensor              # (B, 3, d) modal-encoder features
    q: Tensor              # (B, 3, d) query vectors
    completed: Tensor      # (B, 3, d) completion used for missing slots
    consistency: Tensor | None
    fused_in: Tensor       # (B, 3, d) features entering decision alignment
    guided: Tensor         # (B, 3, d)
    outputs: Tensor        # (B, 3, d) what the fusion head sees
    votes: np.ndarray | None
    s_pos: Tensor | None
    s_neg: Tensor | None
    suppressed: np.ndarray  # (B, 3) bool
    obs: np.ndarray

    @property
    def suppression_occurred(self) -> bool:
        return bool(self.suppressed.any())

    def completed_modalities(self, i: int = 0) -> list[Modality]:
        return [m for j, m in enumerate(MODALITIES) if self.obs[i, j] == 0]


def forward_batch(model: TLRAModel, batch: Batch, stage: Stage, switches: Switches = Switches()) -> tuple[Tensor, Intermediates]:
    n, d = len(batch), model.d
    F = stack([model.encoder.encode_modal(batch.x[m], m, batch.tmask[m]) for m in MODALITIES], axis=1)
    q = stack([model.encoder.encode_query(batch.x[m], m, batch.tmask[m])[1] for m in MODALITIES], axis=1)
    obs = batch.obs
    if switches.completion:
        comp, alpha = complete_batch(q, obs, model.library)
        completed = stack([comp, comp, comp], axis=1)
    else:
        completed, alpha = Tensor(np.zeros((n, 3, d))), None
    G = where(obs[..., None] > 0, F, completed)
    votes = sp = sn = None
    if switches.guidance:
        guided, votes, sp, sn = guidance_batch(G, model.bank)
    else:
        guided = G
    suppressed = np.zeros((n, 3), dtype=bool)
    out = guided
    if stage == Stage.STAGE2 and switches.voting and votes is not None:
        voters = obs > 0 if switches.voters == "observed" else np.ones((n, 3), dtype=bool)
        out, suppressed = suppress_batch(guided, votes, voters, model.bank)
    yhat = model.head(out.reshape(n, 3 * d)).reshape(n)
    return yhat, Intermediates(F, q, completed, alpha, G, guided, out, votes, sp, sn, suppressed, obs)


def forward(view, pattern: MissingPattern | None, model: TLRAModel, stage: Stage, switches: Switches = Switches()):
    """Single-sample forward; ``view`` is a MaskedView or a record masked by ``pattern``."""
    if isinstance(view, SampleRecord):
        pattern = pattern if pattern is not None else MissingPattern.full()
        batch = make_batch([view], model.dims, [pattern])
    else:
        batch = make_batch([view], model.dims)
    yhat, inter = forward_batch(model, batch, stage, switches)
    return yhat[0], inter


def predict(model: TLRAModel, records: Sequence[SampleRecord], pattern: MissingPattern, stage: Stage = Stage.STAGE2,
            switches: Switches = Switches(), chunk: int = 256) -> np.ndarray:
    from .data import apply_mask

    out = []
    for i in range(0, len(records), chunk):
        views = [apply_mask(r, pattern) for r in records[i : i + chunk]]
        yhat, _ = forward_batch(model, make_batch(views, model.dims), stage, switches)
        out.append(yhat.data.copy())
    return np.concatenate(out) if out else np.zeros(0)
