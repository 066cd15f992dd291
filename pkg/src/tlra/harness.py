"""Binary metrics, per-pattern evaluation and prototype-similarity export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import MODALITIES, FeatureBundle, InvalidPatternError, MissingPattern, SchemaError, all_patterns
from .model import Stage, TLRAModel, forward_batch, make_batch, predict
from .numeric import cosine_sim
from .prototypes import CLASSES, class_of
from .trainer import TrainerConfig, load_checkpoint

SIM_COLUMNS = tuple(f"{m.value}_{c}" for m in MODALITIES for c in CLASSES)


def confusion(pairs: Iterable[tuple[float, float]]) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) with the non-negative class as positive."""
    tp = fp = fn = tn = 0
    for pred, y in pairs:
        p, t = pred >= 0, y >= 0
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def binary_metrics(predictions: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Accuracy and F1 of (prediction, label) pairs thresholded at 0."""
    predictions = list(predictions)
    if not predictions:
        raise ValueError("binary_metrics needs at least one prediction")
    pred = np.array([p for p, _ in predictions], dtype=np.float64)
    y = np.array([t for _, t in predictions], dtype=np.float64)
    pp, tt = pred >= 0, y >= 0
    acc = float(np.mean(pp == tt))
    tp = int(np.sum(pp & tt))
    npred, ntrue = int(pp.sum()), int(tt.sum())
    if tp == 0:
        return acc, 0.0
    precision, recall = tp / npred, tp / ntrue
    return acc, 2 * precision * recall / (precision + recall)


def parse_patterns(text: str | None) -> list[MissingPattern]:
    if text is None or not text.strip():
        return all_patterns()
    out = []
    for part in text.split(","):
        if not part.strip():
            raise InvalidPatternError(f"empty pattern in {text!r}")
        out.append(MissingPattern.parse(part))
    return out


@dataclass
class MetricRow:
    pattern: MissingPattern
    acc: float
    f1: float
    count: int


@dataclass
class MetricReport:
    rows: list[MetricRow]

    def __len__(self) -> int:
        return len(self.rows)

    def mean_acc(self) -> float:
        return float(np.mean([r.acc for r in self.rows]))

    def row(self, pattern) -> MetricRow:
        if isinstance(pattern, str):
            pattern = MissingPattern.parse(pattern)
        for r in self.rows:
            if r.pattern == pattern:
                return r
        raise KeyError(str(pattern))

    def to_table(self) -> str:
        lines = [f"{'pattern':<8}{'ACC':>8}{'F1':>8}{'n':>6}"]
        for r in self.rows:
            lines.append(f"{r.pattern.name:<8}{100 * r.acc:>8.2f}{100 * r.f1:>8.2f}{r.count:>6d}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["pattern", "acc", "f1", "n"])
        for r in self.rows:
            w.writerow([r.pattern.name, repr(r.acc), repr(r.f1), r.count])
        return buf.getvalue()


def _resolve(checkpoint) -> tuple[TLRAModel, TrainerConfig]:
    if isinstance(checkpoint, tuple):
        return checkpoint[0], checkpoint[1]
    model, config, _ = load_checkpoint(checkpoint)
    return model, config


def _check_dims(model: TLRAModel, bundle: FeatureBundle) -> None:
    for m in MODALITIES:
        if model.dims[m] != bundle.dims[m]:
            raise SchemaError(
                f"checkpoint expects d_{m.value.lower()}={model.dims[m]}, bundle has {bundle.dims[m]}"
            )


def evaluate_patterns(checkpoint, bundle: FeatureBundle, patterns: Sequence[MissingPattern] | None = None,
                      split: str = "test") -> MetricReport:
    """Stage-2 forward of every test sample under each fixed pattern.

    ``checkpoint`` is a path or a ``(model, config)`` pair.
    """
    model, config = _resolve(checkpoint)
    _check_dims(model, bundle)
    records = bundle.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    patterns = all_patterns() if patterns is None else list(patterns)
    y = np.array([r.label for r in records])
    rows = []
    for p in patterns:
        pred = predict(model, records, p, Stage.STAGE2, config.switches)
        acc, f1 = binary_metrics(list(zip(pred, y)))
        rows.append(MetricRow(p, acc, f1, len(records)))
    return MetricReport(rows)


@dataclass
class SimilarityMatrix:
    epoch: int
    ids: list
    labels: np.ndarray
    values: np.ndarray  # (20, 6) in SIM_COLUMNS order

    def own_class_similarity(self) -> float:
        """Mean over samples and modalities of cos(F_m, own-class anchor)."""
        cls = np.array([class_of(y) for y in self.labels])
        own = [self.values[i, 2 * j + cls[i]] for i in range(len(cls)) for j in range(3)]
        return float(np.mean(np.abs(own)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["id", "label", "epoch", *SIM_COLUMNS])
        for i, rid in enumerate(self.ids):
            w.writerow([rid, repr(float(self.labels[i])), self.epoch, *(repr(float(v)) for v in self.values[i])])
        return buf.getvalue()


def select_similarity_samples(bundle: FeatureBundle, seed: int, per_class: int = 10, split: str = "test"):
    records = bundle.split(split)
    pos = [r for r in records if r.label >= 0]
    neg = [r for r in records if r.label < 0]
    if len(pos) < per_class or len(neg) < per_class:
        raise ValueError(f"need {per_class} samples of each class in {split!r}, have {len(pos)} / {len(neg)}")
    rng = np.random.default_rng(seed)
    pick = lambda rs: [rs[i] for i in sorted(rng.choice(len(rs), per_class, replace=False))]
    return pick(pos) + pick(neg)


def similarity_matrix(model: TLRAModel, samples, epoch: int) -> SimilarityMatrix:
    batch = make_batch(samples, model.dims)
    _, inter = forward_batch(model, batch, Stage.STAGE1)
    F = inter.F.data
    values = np.empty((len(samples), 6))
    for j in range(3):
        for c in range(2):
            values[:, 2 * j + c] = cosine_sim(F[:, j, :], model.bank.anchors[j, c]).data
    return SimilarityMatrix(epoch, [s.id for s in samples], batch.y, values)


def export_similarity(checkpoint, bundle: FeatureBundle, seed: int = 0, out=None) -> SimilarityMatrix:
    if isinstance(checkpoint, tuple):
        model, epoch = checkpoint[0], checkpoint[2] if len(checkpoint) > 2 else 0
    else:
        model, _, epoch = load_checkpoint(checkpoint)
    _check_dims(model, bundle)
    mat = similarity_matrix(model, select_similarity_samples(bundle, seed), epoch)
    if out is not None:
        Path(out).write_text(mat.to_csv(), encoding="utf-8")
    return mat


def gradcheck_total_loss(seed: int = 0, stage: Stage = Stage.STAGE2, prototype_grads: bool = False,
                         h: float = 1e-5) -> float:
    """Finite-difference check of the full training objective on a 2-sample batch.

    Uses a tiny freshly initialised model; the first sample observes only L
    and the second A and V, so both alignment terms and completion are live.
    """
    from .data import synth_generate
    from .trainer import compute_losses

    bundle = synth_generate(2, dims=(4, 3, 3), seq_lens=(3, 2, 4), noise=0.5, seed=seed, split_counts=(2, 0, 0))
    config = TrainerConfig(epochs=2, d=4, K=3, seed=seed, prototype_grads=prototype_grads)
    model = TLRAModel(bundle.dims, d=config.d, K=config.K, eta=config.eta, seed=seed)
    patterns = [MissingPattern.parse("L"), MissingPattern.parse("AV")]
    batch = make_batch(bundle.records, model.dims, patterns)

    # targets are constants of the objective, so freeze them at the base point
    refs = compute_losses(model, batch, stage, config)[2].F.detach()

    def f():
        return compute_losses(model, batch, stage, config, refs)[0]

    from .numeric import grad_check

    return grad_check(f, model.parameters(), h=h)
