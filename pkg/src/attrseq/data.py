"""Datasets, attribute vocabularies, emission orders, and label sequences.

File formats
------------
Dataset: JSON lines, one object per image:
    {"id": str, "regions": [[float; d_region]; m], "global": [float; d_global],
     "attrs": [0|1; n_attr]}
Vocab sidecar: a single JSON object:
    {"names": [str; n_attr], "region_hint": [int; n_attr] | null,
     "granularity": ["global"|"local"; n_attr] | null}

Attribute frequencies are never stored; they are recomputed from the
training split whenever a vocab is paired with one, so the test split can
never leak into ordering policies.

The synthetic generator stands in for real region features at desk scale:
labels follow a chain-structured dependency (attribute j is biased toward
attribute j-1 with a configurable strength), every attribute owns a
signature vector inside one region's feature block, and region features are
sums of the present attributes' signatures plus Gaussian noise. Signatures
are orthonormalized per region, so with zero noise a least-squares probe on
the right region recovers the labels exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataFileError
from .numerics import Array, Rng, require_finite

GRANULARITIES = ("global", "local")
NAMED_ORDER_KINDS = ("rare_first", "frequent_first", "top_down", "bottom_up",
                     "global_local", "local_global")


@dataclass
class AttributeVocab:
    names: list[str]
    train_frequency: Array | None = None
    region_hint: list[int] | None = None
    granularity: list[str] | None = None

    def __post_init__(self):
        if len(self.names) == 0:
            raise ContractError("vocab: needs at least one attribute")
        if len(set(self.names)) != len(self.names):
            raise ContractError("vocab: attribute names must be unique")
        n = len(self.names)
        if self.train_frequency is not None:
            self.train_frequency = np.asarray(self.train_frequency, dtype=np.float64)
            if self.train_frequency.shape != (n,):
                raise ContractError("vocab: frequency vector length mismatch")
            if ((self.train_frequency < 0) | (self.train_frequency > 1)).any():
                raise ContractError("vocab: frequencies must lie in [0, 1]")
        if self.region_hint is not None and len(self.region_hint) != n:
            raise ContractError("vocab: region_hint length mismatch")
        if self.granularity is not None:
            if len(self.granularity) != n:
                raise ContractError("vocab: granularity length mismatch")
            bad = set(self.granularity) - set(GRANULARITIES)
            if bad:
                raise ContractError(f"vocab: unknown granularity values {sorted(bad)}")

    @property
    def n_attr(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class OrderSpec:
    """A total emission order over attribute indices."""

    kind: str
    permutation: tuple[int, ...]
    seed: int | None = None

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.permutation))):
            raise ContractError(f"OrderSpec: permutation {self.permutation} is not a bijection")

    def label(self) -> str:
        return self.kind if self.seed is None else f"{self.kind}({self.seed})"


@dataclass
class Sample:
    id: str
    regions: Array
    global_feature: Array
    labels: Array

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=np.float64)
        self.global_feature = np.asarray(self.global_feature, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.regions.ndim != 2:
            raise ContractError(f"sample {self.id}: regions must be (m x d_region)")
        require_finite(self.regions, f"sample {self.id} regions")
        require_finite(self.global_feature, f"sample {self.id} global feature")
        if not np.isin(self.labels, (0, 1)).all():
            raise ContractError(f"sample {self.id}: labels must be binary")


def build_orders(vocab: AttributeVocab, n_random: int = 4, base_seed: int = 0) -> list[OrderSpec]:
    """The ensemble's order list: six named policies plus n_random shuffles.

    Named policies that need missing metadata (region hints or granularity)
    are replaced by extra random permutations so the ensemble size is stable.
    Random seeds are consumed in a fixed slot order, so the result is fully
    determined by (vocab, n_random, base_seed).
    """
    if vocab.train_frequency is None:
        raise ContractError("build_orders: vocab frequencies are not populated")
    next_seed = base_seed + n_random  # replacement seeds follow the standard ones
    orders = [make_order(vocab, "rare_first"), make_order(vocab, "frequent_first")]
    if vocab.region_hint is not None:
        orders.append(make_order(vocab, "top_down"))
        orders.append(make_order(vocab, "bottom_up"))
    else:
        orders.append(make_order(vocab, "random", next_seed))
        orders.append(make_order(vocab, "random", next_seed + 1))
        next_seed += 2
    if vocab.granularity is not None:
        orders.append(make_order(vocab, "global_local"))
        orders.append(make_order(vocab, "local_global"))
    else:
        orders.append(make_order(vocab, "random", next_seed))
        orders.append(make_order(vocab, "random", next_seed + 1))
    orders.extend(make_order(vocab, "random", base_seed + i) for i in range(n_random))
    return orders


def make_order(vocab: AttributeVocab, kind: str, seed: int = 0) -> OrderSpec:
    """A single named or random order, erroring when metadata is missing."""
    n = vocab.n_attr
    if kind == "random":
        return OrderSpec(kind="random", permutation=tuple(int(i) for i in Rng(seed).permutation(n)),
                         seed=seed)
    if kind not in NAMED_ORDER_KINDS:
        raise ContractError(f"unknown order kind {kind!r}")
    if kind in ("rare_first", "frequent_first", "global_local", "local_global") \
            and vocab.train_frequency is None:
        raise ContractError(f"order {kind} needs training frequencies")
    if kind in ("top_down", "bottom_up") and vocab.region_hint is None:
        raise ContractError(f"order {kind} needs region_hint metadata in the vocab")
    if kind in ("global_local", "local_global") and vocab.granularity is None:
        raise ContractError(f"order {kind} needs granularity metadata in the vocab")
    freq = vocab.train_frequency
    idx = list(range(n))
    if kind == "rare_first":
        perm = sorted(idx, key=lambda i: (freq[i], i))
    elif kind == "frequent_first":
        perm = sorted(idx, key=lambda i: (-freq[i], i))
    elif kind == "top_down":
        perm = sorted(idx, key=lambda i: (vocab.region_hint[i], i))
    elif kind == "bottom_up":
        perm = sorted(idx, key=lambda i: (-vocab.region_hint[i], i))
    elif kind == "global_local":
        perm = sorted(idx, key=lambda i: (vocab.granularity[i] != "global", -freq[i], i))
    else:  # local_global
        perm = sorted(idx, key=lambda i: (vocab.granularity[i] != "local", -freq[i], i))
    return OrderSpec(kind=kind, permutation=tuple(perm))


def labels_to_sequence(labels: Array, order: OrderSpec) -> list[int]:
    """Present attributes in emission order, terminated by the stop token."""
    labels = np.asarray(labels)
    n_attr = len(order.permutation)
    if labels.shape != (n_attr,):
        raise ContractError(f"labels_to_sequence: {labels.shape} labels vs {n_attr}-way order")
    seq = [i for i in order.permutation if labels[i]]
    seq.append(n_attr)
    return seq


def sequence_to_labels(seq: list[int], n_attr: int) -> Array:
    """Inverse of labels_to_sequence: a binary vector from an emitted sequence."""
    validate_sequence(seq, n_attr)
    labels = np.zeros(n_attr, dtype=np.int64)
    for tok in seq[:-1]:
        labels[tok] = 1
    return labels


def validate_sequence(seq: list[int], n_attr: int) -> None:
    stop = n_attr
    if len(seq) == 0 or seq[-1] != stop:
        raise ContractError("attribute sequence must end with the stop token")
    body = seq[:-1]
    if stop in body:
        raise ContractError("stop token may appear only once, at the end")
    if any(t < 0 or t > n_attr for t in seq):
        raise ContractError(f"sequence token out of range for n_attr={n_attr}")
    if len(set(body)) != len(body):
        raise ContractError("attribute sequence contains duplicates")


def compute_frequencies(samples: list[Sample], n_attr: int) -> Array:
    if not samples:
        raise ContractError("cannot compute frequencies from an empty split")
    stacked = np.stack([s.labels for s in samples])
    if stacked.shape[1] != n_attr:
        raise ContractError(f"samples carry {stacked.shape[1]} labels, vocab has {n_attr}")
    return stacked.mean(axis=0)


def with_frequencies(vocab: AttributeVocab, train_samples: list[Sample]) -> AttributeVocab:
    """Vocab with frequencies recomputed from the given training split."""
    return replace(vocab, train_frequency=compute_frequencies(train_samples, vocab.n_attr))


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthSpec:
    n_attr: int
    m: int
    d_region: int
    d_global: int
    n_train: int
    n_test: int
    noise_sigma: float
    correlation_strength: float

    def __post_init__(self):
        for name in ("n_attr", "m", "d_region", "d_global", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ContractError(f"SynthSpec: {name} must be >= 1")
        if self.noise_sigma < 0:
            raise ContractError("SynthSpec: noise_sigma must be >= 0")
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise ContractError("SynthSpec: correlation_strength must lie in [0, 1]")
        # the global feature is the mean over regions, so the dims must agree
        if self.d_global != self.d_region:
            raise ContractError("SynthSpec: d_global must equal d_region (global = mean of regions)")
        per_region = np.bincount(self.region_hints(), minlength=self.m)
        if per_region.max() > self.d_region:
            raise ContractError("SynthSpec: more attributes share a region than d_region supports")

    def region_hints(self) -> Array:
        """Block assignment of attributes to regions, top-down."""
        return np.array([j * self.m // self.n_attr for j in range(self.n_attr)])

    def granularities(self) -> list[str]:
        return [GRANULARITIES[j % 2] for j in range(self.n_attr)]


def attribute_signatures(spec: SynthSpec, rng: Rng) -> Array:
    """Per-attribute signature vectors, orthonormalized within each region group."""
    hints = spec.region_hints()
    signatures = np.zeros((spec.n_attr, spec.d_region))
    for r in range(spec.m):
        members = np.flatnonzero(hints == r)
        if members.size == 0:
            continue
        raw = rng.normal(0.0, 1.0, (spec.d_region, members.size))
        q, _ = np.linalg.qr(raw)
        signatures[members] = q[:, : members.size].T
    return signatures


def generate_synthetic(spec: SynthSpec, rng: Rng):
    """Deterministic train/test splits plus a vocab with populated metadata.

    Returns (train, test, vocab, signatures); signatures are exposed so
    tests can run the linear-probe oracle against the generating model.
    """
    hints = spec.region_hints()
    base_freq = rng.uniform(0.2, 0.8, spec.n_attr)
    signatures = attribute_signatures(spec, rng)

    def draw_split(prefix: str, count: int) -> list[Sample]:
        samples = []
        for i in range(count):
            labels = np.zeros(spec.n_attr, dtype=np.int64)
            prev = 0
            for j in range(spec.n_attr):
                p = base_freq[j]
                if j > 0:
                    p = (1.0 - spec.correlation_strength) * base_freq[j] \
                        + spec.correlation_strength * prev
                labels[j] = 1 if rng.random() < p else 0
                prev = labels[j]
            regions = np.zeros((spec.m, spec.d_region))
            for j in np.flatnonzero(labels):
                regions[hints[j]] += signatures[j]
            if spec.noise_sigma > 0:
                regions += rng.normal(0.0, spec.noise_sigma, regions.shape)
            samples.append(Sample(
                id=f"{prefix}-{i:06d}",
                regions=regions,
                global_feature=regions.mean(axis=0),
                labels=labels,
            ))
        return samples

    train = draw_split("train", spec.n_train)
    test = draw_split("test", spec.n_test)
    vocab = AttributeVocab(
        names=[f"attr{j:02d}" for j in range(spec.n_attr)],
        train_frequency=compute_frequencies(train, spec.n_attr),
        region_hint=[int(h) for h in hints],
        granularity=spec.granularities(),
    )
    return train, test, vocab, signatures


# ---------------------------------------------------------------------------
# file I/O


def write_dataset(path: str | Path, samples: list[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "id": s.id,
                "regions": [[float(v) for v in row] for row in s.regions],
                "global": [float(v) for v in s.global_feature],
                "attrs": [int(v) for v in s.labels],
            }
            fh.write(json.dumps(record, separators=(",", ":")))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[Sample]:
    path = Path(path)
    if not path.exists():
        raise DataFileError(f"dataset file not found: {path}")
    samples = []
    shape = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                sample = Sample(
                    id=str(record["id"]),
                    regions=record["regions"],
                    global_feature=record["global"],
                    labels=record["attrs"],
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFileError(f"{path}:{lineno}: malformed dataset record ({exc})") from exc
            dims = (sample.regions.shape, sample.global_feature.shape, sample.labels.shape)
            if shape is None:
                shape = dims
            elif dims != shape:
                raise DataFileError(f"{path}:{lineno}: inconsistent dimensions {dims} vs {shape}")
            samples.append(sample)
    if not samples:
        raise DataFileError(f"dataset file is empty: {path}")
    return samples


def write_vocab(path: str | Path, vocab: AttributeVocab) -> None:
    record = {
        "names": vocab.names,
        "region_hint": vocab.region_hint,
        "granularity": vocab.granularity,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, separators=(",", ":"))
        fh.write("\n")


def read_vocab(path: str | Path) -> AttributeVocab:
    path = Path(path)
    if not path.exists():
        raise DataFileError(f"vocab file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            record = json.load(fh)
        return AttributeVocab(
            names=list(record["names"]),
            region_hint=record.get("region_hint"),
            granularity=record.get("granularity"),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ContractError) as exc:
        raise DataFileError(f"malformed vocab file {path}: {exc}") from exc
