"""Template-guided completion of missing modalities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MODALITIES, InvalidPatternError, MissingPattern, Modality
from .numeric import DimensionError, Parameter, Tensor, cosine_sim, ensure_tensor, softmax


class TemplateLibrary:
    """K learnable d-dim templates shared by all modalities."""

    def __init__(self, K: int, d: int, rng: np.random.Generator | None = None, values=None):
        if K < 1:
            raise ValueError("template library needs K >= 1")
        if values is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            values = rng.standard_normal((K, d)) / np.sqrt(d)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (K, d):
            raise DimensionError(f"templates must have shape ({K}, {d})")
        self.templates = Parameter(values, "templates")

    @property
    def K(self) -> int:
        return self.templates.shape[0]

    @property
    def d(self) -> int:
        return self.templates.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.templates]


@dataclass
class CompletionResult:
    similarities: Tensor
    weights: Tensor
    context: Tensor
    consistency: Tensor
    completed: Tensor


def template_context(q, lib: TemplateLibrary) -> tuple[Tensor, Tensor]:
    """Softmax over raw dot products with the templates; returns (weights, context)."""
    q = ensure_tensor(q)
    if q.shape[-1] != lib.d:
        raise DimensionError(f"query size {q.shape[-1]} != template size {lib.d}")
    weights = softmax(q @ lib.templates.T)
    return weights, weights @ lib.templates


def complete(q, context) -> tuple[Tensor, Tensor]:
    """Blend query and template context by their clamped cosine; returns (alpha_c, completed)."""
    q, context = ensure_tensor(q), ensure_tensor(context)
    if q.shape != context.shape:
        raise DimensionError(f"query {q.shape} and context {context.shape} differ")
    alpha = cosine_sim(q, context).clip(0.0, 1.0)
    a = alpha.unsqueeze(-1)
    return alpha, a * q + (1.0 - a) * context


def complete_query(q, lib: TemplateLibrary) -> CompletionResult:
    q = ensure_tensor(q)
    weights, ctx = template_context(q, lib)
    alpha, out = complete(q, ctx)
    return CompletionResult(q @ lib.templates.T, weights, ctx, alpha, out)


def missing_query(queries: dict) -> Tensor:
    """Query used for a missing modality: mean of the observed query vectors."""
    if not queries:
        raise InvalidPatternError("no observed modality to build a query from")
    qs = list(queries.values())
    total = qs[0]
    for q in qs[1:]:
        total = total + q
    return total * (1.0 / len(qs))


def complete_missing(view, pattern: MissingPattern, encoders, lib: TemplateLibrary) -> dict:
    """Completed d-vectors for every modality the pattern leaves out."""
    if pattern is None or not pattern.observed:
        raise InvalidPatternError("empty pattern")
    if not pattern.missing:
        return {}
    queries = {m: encoders.encode_query(view[m], m)[1] for m in MODALITIES if m in pattern.observed}
    res = complete_query(missing_query(queries), lib)
    return {m: res.completed for m in MODALITIES if m in pattern.missing}


def complete_batch(q: Tensor, obs: np.ndarray, lib: TemplateLibrary) -> tuple[Tensor, Tensor]:
    """Batched completion.

    ``q`` is (B, 3, d) query vectors and ``obs`` a (B, 3) 0/1 mask of
    observed modalities. Returns (B, d) completed vectors and (B,)
    consistency weights; every missing modality of a sample shares them.
    """
    obs = np.asarray(obs, dtype=np.float64)
    counts = obs.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise InvalidPatternError("a sample has no observed modality")
    query = (q * obs[:, :, None]).sum(axis=1) / counts
    _, ctx = template_context(query, lib)
    alpha, out = complete(query, ctx)
    return out, alpha
