"""Modal-encoder and query-encoder paths into the shared d-dim space."""
from __future__ import annotations

import numpy as np

from .data import Modality, SchemaError
from .numeric import Parameter, Tensor, concat, ensure_tensor, mean_pool


class Linear:
    def __init__(self, d_in: int, d_out: int, name: str, rng: np.random.Generator):
        self.W = Parameter(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in), f"{name}.W")
        self.b = Parameter(np.zeros(d_out), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


class FeedForward:
    """linear -> tanh -> linear with hidden width 2d."""

    def __init__(self, d: int, name: str, rng: np.random.Generator):
        self.fc1 = Linear(d, 2 * d, f"{name}.fc1", rng)
        self.fc2 = Linear(2 * d, d, f"{name}.fc2", rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).tanh())

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()


class Conv1d:
    """Kernel-3, stride-1 convolution over time with one zero row of padding on each side."""

    def __init__(self, d_in: int, d_out: int, name: str, rng: np.random.Generator):
        self.d_in = d_in
        self.W = Parameter(rng.standard_normal((3 * d_in, d_out)) / np.sqrt(3 * d_in), f"{name}.W")
        self.b = Parameter(np.zeros(d_out), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        x = ensure_tensor(x)
        pad_shape = x.shape[:-2] + (1, x.shape[-1])
        zero = Tensor(np.zeros(pad_shape))
        xp = concat([zero, x, zero], axis=-2)
        t = x.shape[-2]
        windows = concat([xp[..., 0:t, :], xp[..., 1 : t + 1, :], xp[..., 2 : t + 2, :]], axis=-1)
        return windows @ self.W + self.b

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


def _check_input(h: Tensor, d_m: int, m: Modality) -> None:
    if h.ndim < 2 or h.shape[-2] < 1:
        raise SchemaError(f"modality {m.value}: expected a nonempty T x d sequence")
    if h.shape[-1] != d_m:
        raise SchemaError(f"modality {m.value}: feature size {h.shape[-1]} != {d_m}")


class ModalEncoder:
    """Projection d_m -> d, feed-forward, mean over time."""

    def __init__(self, m: Modality, d_m: int, d: int, rng: np.random.Generator, ff: FeedForward | None = None):
        self.m, self.d_m, self.d = m, d_m, d
        name = f"modal.{m.value}"
        self.proj = Linear(d_m, d, f"{name}.proj", rng)
        self.ff = ff if ff is not None else FeedForward(d, f"{name}.ff", rng)

    def __call__(self, h, mask=None) -> Tensor:
        h = ensure_tensor(h)
        _check_input(h, self.d_m, self.m)
        return mean_pool(self.ff(self.proj(h)), mask)

    def parameters(self) -> list[Parameter]:
        return self.proj.parameters() + self.ff.parameters()


class QueryEncoder:
    """Conv1d d_m -> d, feed-forward; returns the sequence and its time mean."""

    def __init__(self, m: Modality, d_m: int, d: int, rng: np.random.Generator, ff: FeedForward | None = None):
        self.m, self.d_m, self.d = m, d_m, d
        name = f"query.{m.value}"
        self.conv = Conv1d(d_m, d, f"{name}.conv", rng)
        self.ff = ff if ff is not None else FeedForward(d, f"{name}.ff", rng)
        self._owns_ff = ff is None

    def __call__(self, h, mask=None) -> tuple[Tensor, Tensor]:
        h = ensure_tensor(h)
        _check_input(h, self.d_m, self.m)
        seq = self.ff(self.conv(h))
        return seq, mean_pool(seq, mask)

    def parameters(self) -> list[Parameter]:
        own = self.conv.parameters()
        return own + self.ff.parameters() if self._owns_ff else own


class DualPathEncoder:
    """Both encoder paths for all three modalities.

    With ``share_paths`` the feed-forward block of a modality is shared
    between its modal path and its query path; the input stages (linear
    projection vs. convolution) stay separate.
    """

    def __init__(self, dims: dict, d: int, rng: np.random.Generator, share_paths: bool = False):
        self.d = d
        self.modal: dict[Modality, ModalEncoder] = {}
        self.query: dict[Modality, QueryEncoder] = {}
        for m in (Modality.L, Modality.A, Modality.V):
            self.modal[m] = ModalEncoder(m, dims[m], d, rng)
            shared = self.modal[m].ff if share_paths else None
            self.query[m] = QueryEncoder(m, dims[m], d, rng, ff=shared)

    def encode_modal(self, h, m: Modality, mask=None) -> Tensor:
        return self.modal[Modality(m)](h, mask)

    def encode_query(self, h, m: Modality, mask=None) -> tuple[Tensor, Tensor]:
        return self.query[Modality(m)](h, mask)

    def parameters(self) -> list[Parameter]:
        out = []
        for m in self.modal:
            out += self.modal[m].parameters() + self.query[m].parameters()
        return out
