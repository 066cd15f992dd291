"""Feature bundles: JSONL I/O, synthetic generation and missing-modality masks."""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

BUNDLE_FORMAT = "tlra-bundle-v1"
SPLITS = ("train", "valid", "test")


class BundleParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class InvalidPatternError(ValueError):
    pass


class Modality(str, enum.Enum):
    L = "L"
    A = "A"
    V = "V"

    @property
    def index(self) -> int:
        return _ORDER[self]


MODALITIES = (Modality.L, Modality.A, Modality.V)
_ORDER = {m: i for i, m in enumerate(MODALITIES)}


@dataclass(frozen=True)
class MissingPattern:
    observed: frozenset

    def __post_init__(self):
        obs = frozenset(Modality(m) for m in self.observed)
        if not obs:
            raise InvalidPatternError("a missing pattern must observe at least one modality")
        object.__setattr__(self, "observed", obs)

    @classmethod
    def of(cls, *mods) -> "MissingPattern":
        return cls(frozenset(mods))

    @classmethod
    def full(cls) -> "MissingPattern":
        return cls(frozenset(MODALITIES))

    @classmethod
    def parse(cls, text: str) -> "MissingPattern":
        """Parse letter strings such as ``"L"``, ``"AV"`` or ``"avl"``."""
        letters = text.strip().upper()
        if not letters:
            raise InvalidPatternError("empty pattern string")
        try:
            mods = [Modality(ch) for ch in letters]
        except ValueError:
            raise InvalidPatternError(f"invalid modality letters in {text!r}") from None
        if len(set(mods)) != len(mods):
            raise InvalidPatternError(f"repeated modality in {text!r}")
        return cls(frozenset(mods))

    @property
    def missing(self) -> frozenset:
        return frozenset(MODALITIES) - self.observed

    def mask(self) -> np.ndarray:
        return np.array([m in self.observed for m in MODALITIES], dtype=np.float64)

    @property
    def name(self) -> str:
        # Table layout uses A, V, L order
        return "".join(m.value for m in (Modality.A, Modality.V, Modality.L) if m in self.observed)

    def __str__(self) -> str:
        return self.name


def all_patterns() -> list[MissingPattern]:
    """The seven nonempty patterns, singles first, full last."""
    out = []
    for r in (1, 2, 3):
        for combo in itertools.combinations(MODALITIES, r):
            out.append(MissingPattern(frozenset(combo)))
    return out


@dataclass(frozen=True)
class SampleRecord:
    id: str
    label: float
    features: Mapping[Modality, np.ndarray]
    split: str = "train"

    def checksum(self) -> int:
        return hash(tuple(self.features[m].tobytes() for m in MODALITIES))


@dataclass
class FeatureBundle:
    dims: dict[Modality, int]
    records: list[SampleRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def validate(self) -> None:
        for r in self.records:
            _check_record(r, self.dims)


class MaskedView:
    """Read-only view of a record exposing only the observed modalities."""

    def __init__(self, record: SampleRecord, pattern: MissingPattern):
        self._record = record
        self.pattern = pattern
        self.features = MappingProxyType(
            {m: record.features[m] for m in MODALITIES if m in pattern.observed}
        )

    @property
    def id(self) -> str:
        return self._record.id

    @property
    def label(self) -> float:
        return self._record.label

    @property
    def observed(self) -> frozenset:
        return self.pattern.observed

    def __getitem__(self, m: Modality) -> np.ndarray:
        m = Modality(m)
        if m not in self.pattern.observed:
            raise KeyError(f"modality {m.value} is masked")
        return self.features[m]


def apply_mask(sample: SampleRecord, pattern: MissingPattern) -> MaskedView:
    if not isinstance(pattern, MissingPattern):
        raise InvalidPatternError("apply_mask needs a MissingPattern")
    return MaskedView(sample, pattern)


def draw_drops(n: int, drop_prob, rng: np.random.Generator) -> np.ndarray:
    """Raw (n, 3) boolean drop decisions, before the forced-retention rule."""
    p = np.broadcast_to(np.asarray(drop_prob, dtype=np.float64), (3,))
    if np.any(p < 0) or np.any(p >= 1):
        raise ValueError("drop probabilities must lie in [0, 1)")
    return rng.random((n, 3)) < p


def random_mask_policy(n: int, drop_prob, rng: np.random.Generator) -> list[MissingPattern]:
    """Independent per-modality Bernoulli drops; if all three drop, keep one at random."""
    drops = draw_drops(n, drop_prob, rng)
    keep = rng.integers(0, 3, size=n)
    out = []
    for i in range(n):
        obs = [m for j, m in enumerate(MODALITIES) if not drops[i, j]]
        if not obs:
            obs = [MODALITIES[keep[i]]]
        out.append(MissingPattern(frozenset(obs)))
    return out


# ---- file I/O ---------------------------------------------------------------

def _check_record(r: SampleRecord, dims: Mapping[Modality, int]) -> None:
    for m in MODALITIES:
        if m not in r.features:
            raise SchemaError(f"record {r.id!r}: modality {m.value} absent")
        x = r.features[m]
        if x.ndim != 2 or x.shape[0] < 1:
            raise SchemaError(f"record {r.id!r}: modality {m.value} must be a nonempty T x d matrix")
        if x.shape[1] != dims[m]:
            raise SchemaError(
                f"record {r.id!r}: modality {m.value} row length {x.shape[1]} != d_{m.value.lower()}={dims[m]}"
            )
        if not np.all(np.isfinite(x)):
            raise SchemaError(f"record {r.id!r}: modality {m.value} has non-finite values")
    if r.split not in SPLITS:
        raise SchemaError(f"record {r.id!r}: unknown split {r.split!r}")


def load_bundle(path) -> FeatureBundle:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise BundleParseError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise BundleParseError(f"{path}: line 1: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != BUNDLE_FORMAT:
        raise BundleParseError(f"{path}: line 1: header must declare format {BUNDLE_FORMAT!r}")
    try:
        dims = {m: int(header[f"d_{m.value.lower()}"]) for m in MODALITIES}
    except (KeyError, TypeError, ValueError):
        raise BundleParseError(f"{path}: line 1: header needs integer d_l, d_a, d_v") from None
    if any(d < 1 for d in dims.values()):
        raise SchemaError(f"{path}: header dimensions must be >= 1")

    bundle = FeatureBundle(dims=dims)
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rid = str(obj["id"])
            label = float(obj["label"])
            split = obj.get("split", "train")
            feats = {m: np.asarray(obj[m.value], dtype=np.float64) for m in MODALITIES}
        except json.JSONDecodeError as exc:
            raise BundleParseError(f"{path}: line {lineno}: {exc.msg}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise BundleParseError(f"{path}: line {lineno}: bad record ({exc})") from None
        if rid in seen:
            raise SchemaError(f"{path}: line {lineno}: duplicate record id {rid!r}")
        seen.add(rid)
        if not -3.0 <= label <= 3.0:
            raise SchemaError(f"record {rid!r}: label {label} outside [-3, 3]")
        rec = SampleRecord(id=rid, label=label, features=_freeze(feats), split=split)
        _check_record(rec, dims)
        bundle.records.append(rec)
    return bundle


def save_bundle(bundle: FeatureBundle, path) -> None:
    path = Path(path)
    header = {"format": BUNDLE_FORMAT, **{f"d_{m.value.lower()}": bundle.dims[m] for m in MODALITIES}}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in bundle.records:
            obj = {"id": r.id, "label": r.label, "split": r.split}
            obj.update({m.value: r.features[m].tolist() for m in MODALITIES})
            fh.write(json.dumps(obj) + "\n")


def _freeze(feats: Mapping[Modality, np.ndarray]) -> Mapping[Modality, np.ndarray]:
    for x in feats.values():
        x.setflags(write=False)
    return MappingProxyType(dict(feats))


# ---- synthetic data -----------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the latent-factor generator beyond the required arguments."""

    nuisance_dim: int = 4
    # per-modality scale of the sentiment column of the mixing map
    signal: tuple[float, float, float] = (1.0, 1.0, 1.0)
    splits: tuple[float, float, float] = (0.7, 0.15, 0.15)


def synth_generate(
    n: int,
    dims: Sequence[int] = (16, 12, 12),
    seq_lens: Sequence[int] = (8, 8, 8),
    noise: Sequence[float] | float = 0.5,
    seed: int = 0,
    spec: SynthSpec = SynthSpec(),
    split_counts: Sequence[int] | None = None,
) -> FeatureBundle:
    """Sample a bundle whose modalities share one latent sentiment ``z``.

    Each time step of modality m is ``W_m @ [z/3, u] + noise_m * e`` with
    ``u`` a per-sample nuisance vector and ``e`` standard normal. The maps
    ``W_m`` are drawn from the seed, so two bundles with the same seed share
    them. Labels are ``z`` itself.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(dims) != 3 or len(seq_lens) != 3 or min(dims) < 1 or min(seq_lens) < 1:
        raise ValueError("dims and seq_lens need three entries >= 1")
    noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), (3,))
    rng = np.random.default_rng(seed)
    k = spec.nuisance_dim
    maps = []
    for j, d in enumerate(dims):
        w = rng.standard_normal((d, 1 + k)) / np.sqrt(1 + k)
        w[:, 0] *= spec.signal[j] * np.sqrt(1 + k)
        maps.append(w)

    if split_counts is None:
        n_tr = int(round(spec.splits[0] * n))
        n_va = int(round(spec.splits[1] * n))
        split_counts = (n_tr, n_va, n - n_tr - n_va)
    if sum(split_counts) != n:
        raise ValueError("split counts must sum to n")
    tags = [s for s, c in zip(SPLITS, split_counts) for _ in range(c)]

    dims_map = {m: int(d) for m, d in zip(MODALITIES, dims)}
    bundle = FeatureBundle(dims=dims_map)
    z = rng.uniform(-3.0, 3.0, size=n)
    for i in range(n):
        u = rng.standard_normal(k)
        feats = {}
        for j, m in enumerate(MODALITIES):
            t = seq_lens[j]
            latent = np.concatenate([[z[i] / 3.0], u])
            clean = np.tile(maps[j] @ latent, (t, 1))
            feats[m] = clean + noise[j] * rng.standard_normal((t, dims[j]))
        bundle.records.append(
            SampleRecord(id=f"s{i:05d}", label=float(z[i]), features=_freeze(feats), split=tags[i])
        )
    return bundle


def bundle_from_records(dims: Mapping[Modality, int], records: Iterable[SampleRecord]) -> FeatureBundle:
    b = FeatureBundle(dims=dict(dims), records=list(records))
    b.validate()
    return b
