"""Two-stage training loop, AdamW, cosine schedule and JSON checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .data import MODALITIES, FeatureBundle, MissingPattern, Modality, random_mask_policy
from .losses import LossReport, LossWeights, align_loss_batch, inter_loss, intra_loss, task_loss, total_loss
from .model import Batch, Stage, Switches, TLRAModel, forward_batch, make_batch, predict
from .numeric import Tensor, stack
from .prototypes import N, P, class_of, mix_prototype, update_bank

log = logging.getLogger(__name__)

CKPT_FORMAT = "tlra-ckpt-v1"
LOG_FIELDS = ("epoch", "align", "intra", "inter", "task", "total")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    stage_switch_epoch: int | None = None
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eta: float = 0.1
    K: int = 16
    d: int = 32
    drop_prob: float = 0.3
    intra_variant: str = "separation"
    share_paths: bool = False
    prototype_grads: bool = False
    task_loss: str = "mae"
    use_completion: bool = True
    use_guidance: bool = True
    use_voting: bool = True
    voters: str = "observed"
    snapshot_epochs: tuple = ()

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.snapshot_epochs = tuple(int(e) for e in self.snapshot_epochs)
        if self.stage_switch_epoch is None:
            self.stage_switch_epoch = max(1, self.epochs // 2)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.stage_switch_epoch <= self.epochs:
            raise ValueError("stage_switch_epoch must satisfy 0 < switch <= epochs")
        if not 0 <= self.drop_prob < 1:
            raise ValueError("drop_prob must lie in [0, 1)")
        if self.intra_variant not in ("separation", "literal"):
            raise ValueError(f"unknown intra_variant {self.intra_variant!r}")

    @property
    def switches(self) -> Switches:
        return Switches(self.use_completion, self.use_guidance, self.use_voting, self.voters)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["snapshot_epochs"] = list(self.snapshot_epochs)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def baseline(cls, **kw) -> "TrainerConfig":
        """Plain late fusion: no alignment losses, zero completion, no prototypes."""
        lw = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0, lambda4=0.0)
        epochs = kw.get("epochs", cls.epochs)
        base = dict(loss_weights=lw, eta=0.0, use_completion=False, use_guidance=False, use_voting=False,
                    stage_switch_epoch=epochs)
        base.update(kw)
        return cls(**base)

    @classmethod
    def rla_only(cls, **kw) -> "TrainerConfig":
        """Baseline plus representation-level alignment (completion and its loss)."""
        lw = LossWeights(lambda3=0.0, lambda4=0.0)
        epochs = kw.get("epochs", cls.epochs)
        base = dict(loss_weights=lw, eta=0.0, use_completion=True, use_guidance=False, use_voting=False,
                    stage_switch_epoch=epochs)
        base.update(kw)
        return cls(**base)


def stage_of_epoch(epoch: int, config: TrainerConfig) -> Stage:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return Stage.STAGE1 if epoch < config.stage_switch_epoch else Stage.STAGE2


def cosine_lr(epoch: int, lr0: float, epochs: int) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


class AdamW:
    """Adam with bias correction and weight decay applied directly to the weights."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _bank_anchor_tensors(model: TLRAModel, batch: Batch, F: Tensor, config: TrainerConfig):
    """Anchors for the prototype losses.

    Without ``prototype_grads`` the bank is a constant. With it, each anchor
    seen in the batch is replaced by its momentum step toward the batch mean
    of mixed prototypes, which lets the prototype losses reach F.
    """
    if not config.prototype_grads:
        return Tensor(model.bank.anchors)
    rows = []
    classes = np.array([class_of(y) for y in batch.y])
    for j, m in enumerate(MODALITIES):
        pair = []
        for c in (P, N):
            idx = np.flatnonzero((classes == c) & (batch.obs[:, j] > 0))
            base = Tensor(model.bank.anchors[j, c])
            if idx.size == 0:
                pair.append(base)
                continue
            mixed = [mix_prototype(F[int(i), j], model.bank, m, c)[1] for i in idx]
            mean = stack(mixed, axis=0).mean(axis=0)
            pair.append((1.0 - model.bank.eta) * base + model.bank.eta * mean)
        rows.append(stack(pair, axis=0))
    return stack(rows, axis=0)


def compute_losses(model: TLRAModel, batch: Batch, stage: Stage, config: TrainerConfig, refs=None):
    """Forward plus all loss terms; returns (total Tensor, LossReport, intermediates).

    ``refs`` are the (B, 3, d) alignment targets; by default the detached
    modal-encoder features of this same forward pass.
    """
    w = config.loss_weights
    yhat, inter = forward_batch(model, batch, stage, config.switches)
    refs = inter.F.detach() if refs is None else refs
    align = align_loss_batch(inter.q, inter.completed, refs, batch.obs, w)
    anchors = _bank_anchor_tensors(model, batch, inter.F, config)
    intra = intra_loss(anchors, w.delta, config.intra_variant)
    inter_l = inter_loss(anchors)
    task = task_loss(yhat, batch.y, config.task_loss)
    total = total_loss(align, intra, inter_l, task, w)
    report = LossReport(align.item(), intra.item(), inter_l.item(), task.item(), total.item())
    return total, report, inter


def train_step(batch_records, model: TLRAModel, optimizer: AdamW, config: TrainerConfig, epoch: int,
               rng: np.random.Generator) -> LossReport:
    patterns = random_mask_policy(len(batch_records), config.drop_prob, rng)
    batch = make_batch(batch_records, model.dims, patterns)
    stage = stage_of_epoch(epoch, config)
    model.zero_grad()
    total, report, inter = compute_losses(model, batch, stage, config)
    if not math.isfinite(report.total):
        raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {report.as_dict()}")
    total.backward()
    optimizer.step()
    F = inter.F.data
    for i, y in enumerate(batch.y):
        c = class_of(y)
        for j, m in enumerate(MODALITIES):
            if batch.obs[i, j] > 0:
                update_bank(model.bank, F[i, j], c, m)
    return report


# ---- checkpoints ---------------------------------------------------------------

def checkpoint_dict(model: TLRAModel, config: TrainerConfig, epoch: int) -> dict:
    return {
        "format": CKPT_FORMAT,
        "config": config.to_dict(),
        "dims": {m.value: model.dims[m] for m in MODALITIES},
        "params": {name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                   for name, p in model.named_parameters().items()},
        "bank": model.bank.to_dict(),
        "epoch": epoch,
    }


def save_checkpoint(model: TLRAModel, config: TrainerConfig, epoch: int, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(model, config, epoch)), encoding="utf-8")
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[TLRAModel, TrainerConfig, int]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: not a {CKPT_FORMAT} checkpoint")
    config = TrainerConfig.from_dict(obj["config"])
    dims = {Modality(k): int(v) for k, v in obj["dims"].items()}
    model = TLRAModel(dims, d=config.d, K=config.K, eta=config.eta, seed=config.seed, share_paths=config.share_paths)
    params = model.named_parameters()
    if set(params) != set(obj["params"]):
        raise CheckpointError(f"{path}: parameter names do not match the model")
    for name, p in params.items():
        entry = obj["params"][name]
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        p.data[...] = np.asarray(entry["data"], dtype=np.float64).reshape(p.shape)
    from .prototypes import PrototypeBank

    model.bank = PrototypeBank.from_dict(obj["bank"])
    return model, config, int(obj["epoch"])


# ---- the loop ----------------------------------------------------------------------

@dataclass
class TrainingResult:
    best_path: Path
    final_path: Path
    log_path: Path
    history: list
    valid_acc: list
    snapshots: dict
    model: TLRAModel


def binary_acc(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((pred >= 0) == (y >= 0)))


def run_training(bundle: FeatureBundle, config: TrainerConfig, out_dir, on_epoch: Callable | None = None) -> TrainingResult:
    train = bundle.split("train")
    valid = bundle.split("valid")
    if not train or not valid:
        raise ValueError("bundle needs nonempty train and valid splits")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = TLRAModel(bundle.dims, d=config.d, K=config.K, eta=config.eta, seed=config.seed,
                      share_paths=config.share_paths)
    optimizer = AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    shuffle_seq, mask_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    mask_rng = np.random.default_rng(mask_seq)

    best_path = out_dir / "ckpt_best.json"
    final_path = out_dir / "ckpt_final.json"
    log_path = out_dir / "train_log.csv"
    history, valid_acc, snapshots = [], [], {}
    best = -1.0
    valid_y = np.array([r.label for r in valid])
    full = MissingPattern.full()

    with log_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for epoch in range(config.epochs):
            optimizer.lr = cosine_lr(epoch, config.learning_rate, config.epochs)
            order = shuffle_rng.permutation(len(train))
            reports = []
            for start in range(0, len(order), config.batch_size):
                chunk = [train[i] for i in order[start : start + config.batch_size]]
                reports.append(train_step(chunk, model, optimizer, config, epoch, mask_rng))
            mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in LOG_FIELDS[1:]}
            history.append(mean)
            writer.writerow([epoch] + [repr(mean[k]) for k in LOG_FIELDS[1:]])
            fh.flush()

            acc = binary_acc(predict(model, valid, full, Stage.STAGE2, config.switches), valid_y)
            valid_acc.append(acc)
            if acc > best:
                best = acc
                save_checkpoint(model, config, epoch + 1, best_path)
            if epoch + 1 in config.snapshot_epochs:
                snapshots[epoch + 1] = save_checkpoint(model, config, epoch + 1, out_dir / f"ckpt_epoch{epoch + 1}.json")
            if on_epoch is not None:
                on_epoch(epoch, model, mean, acc)
            log.info("epoch %d total %.4f valid acc %.4f", epoch, mean["total"], acc)
    save_checkpoint(model, config, config.epochs, final_path)
    return TrainingResult(best_path, final_path, log_path, history, valid_acc, snapshots, model)
