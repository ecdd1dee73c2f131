"""Datasets, partition regimes and the label-flipping injector."""

from __future__ import annotations

import gzip
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lfshield.errors import ConfigError, ContractError, FormatError

log = logging.getLogger(__name__)

REGIMES = ("iid", "mild", "extreme")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if not np.isfinite(self.features).all():
            raise ContractError("features contain NaN or Inf")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ContractError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


@dataclass
class PartitionPlan:
    assignments: list[np.ndarray]
    regime: str
    inventories: list[dict[int, int]] = field(default_factory=list)
    proportions: np.ndarray | None = None  # mild regime: (classes, peers) Dirichlet draws

    @property
    def peers(self) -> int:
        return len(self.assignments)

    def holders(self, cls: int) -> list[int]:
        """Peers owning at least one example of ``cls``."""
        return [k for k, inv in enumerate(self.inventories) if inv.get(cls, 0) > 0]

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "assignments": [a.tolist() for a in self.assignments],
        }


@dataclass(frozen=True)
class AttackSpec:
    source: int
    target: int
    attacker_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.source == self.target:
            raise ConfigError("source and target class must differ")


# -- loading ---------------------------------------------------------------


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file into an array of its declared shape."""
    path = Path(path)
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad IDX magic {raw[:4].hex()}", offset=0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise FormatError(f"{path}: unknown IDX type code 0x{code:02x}", offset=2)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated IDX dimension block", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_DTYPES[code]
    expected = math.prod(dims) * dtype.itemsize
    if len(raw) - header_end < expected:
        raise FormatError(
            f"{path}: IDX payload holds {len(raw) - header_end} bytes, header promises {expected}",
            offset=len(raw),
        )
    return np.frombuffer(raw, dtype=dtype, count=math.prod(dims), offset=header_end).reshape(dims)


def _check_magic(path: Path, want: int) -> None:
    with _open(path) as f:
        head = f.read(4)
    if len(head) < 4:
        raise FormatError(f"{path}: truncated IDX header", offset=len(head))
    magic = struct.unpack(">I", head)[0]
    if magic != want:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{want:08x}", offset=0)


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """Load an IDX image/label pair (e.g. MNIST); pixels are scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    _check_magic(images_path, IDX_IMAGES_MAGIC)
    _check_magic(labels_path, IDX_LABELS_MAGIC)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), classes)


def load_digits() -> Dataset:
    """The 8x8 handwritten digits bundled with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    return Dataset(bunch.data / 16.0, bunch.target, 10)


def synth_gaussian(classes: int, n: int, dim: int, spread: float = 1.0, seed: int = 0) -> Dataset:
    """Gaussian blobs, one per class, with equal class counts (up to n % classes)."""
    if classes < 2 or n < classes or dim < 1 or spread <= 0:
        raise ConfigError("synth_gaussian needs classes >= 2, n >= classes, dim >= 1, spread > 0")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 3.0, size=(classes, dim))
    labels = np.arange(n) % classes
    labels = np.sort(labels)
    features = means[labels] + rng.normal(0.0, spread, size=(n, dim))
    return Dataset(features, labels, classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


# -- partitioning ----------------------------------------------------------


def _plan(ds: Dataset, parts: list[np.ndarray], regime: str) -> PartitionPlan:
    assignments = [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]
    inventories = []
    for idx in assignments:
        counts = np.bincount(ds.labels[idx], minlength=ds.classes)
        inventories.append({int(c): int(counts[c]) for c in np.flatnonzero(counts)})
    return PartitionPlan(assignments, regime, inventories)


def partition_iid(ds: Dataset, k: int, seed: int) -> PartitionPlan:
    if k <= 0:
        raise ConfigError(f"peer count must be positive, got {k}")
    if len(ds) < k:
        raise ConfigError(f"{len(ds)} examples cannot cover {k} peers")
    order = np.random.default_rng(seed).permutation(len(ds))
    return _plan(ds, [order[p::k] for p in range(k)], "iid")


def sample_gamma(shape: float, rng: np.random.Generator) -> float:
    """Marsaglia-Tsang gamma(shape, 1) draw from normal and uniform variates."""
    if shape < 1.0:
        # boost: G(a) = G(a+1) * U^(1/a)
        u = rng.random()
        return sample_gamma(shape + 1.0, rng) * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.standard_normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * x**4:
            return d * v
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def sample_dirichlet(alpha: float, k: int, rng: np.random.Generator) -> np.ndarray:
    g = np.array([sample_gamma(alpha, rng) for _ in range(k)])
    total = g.sum()
    if total <= 0.0:
        # every draw underflowed (tiny alpha): put all mass on one peer
        g = np.zeros(k)
        g[rng.integers(k)] = 1.0
        total = 1.0
    return g / total


def partition_dirichlet(
    ds: Dataset, k: int, alpha: float, seed: int, max_attempts: int = 1000
) -> PartitionPlan:
    """Per class, split its examples across peers by Dirichlet(alpha) proportions.

    The whole draw is repeated if any peer ends up empty.
    """
    if k <= 0:
        raise ConfigError(f"peer count must be positive, got {k}")
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    if len(ds) < k:
        raise ConfigError(f"{len(ds)} examples cannot cover {k} peers")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.classes)]
    for _ in range(max_attempts):
        parts: list[list[np.ndarray]] = [[] for _ in range(k)]
        proportions = []
        for idx in by_class:
            idx = rng.permutation(idx)
            p = sample_dirichlet(alpha, k, rng)
            proportions.append(p)
            cuts = (np.cumsum(p)[:-1] * len(idx)).astype(np.int64)
            for peer, chunk in enumerate(np.split(idx, cuts)):
                parts[peer].append(chunk)
        merged = [np.concatenate(p) for p in parts]
        if min(len(m) for m in merged) > 0:
            plan = _plan(ds, merged, "mild")
            plan.proportions = np.array(proportions)
            return plan
    raise ConfigError(f"could not give every one of {k} peers an example in {max_attempts} draws")


def partition_extreme(ds: Dataset, k: int, seed: int) -> PartitionPlan:
    """Each peer holds one class; k/classes peers share each class evenly."""
    if k < ds.classes or k % ds.classes:
        raise ConfigError(
            f"extreme partition needs a peer count divisible by {ds.classes} classes, got {k}"
        )
    rng = np.random.default_rng(seed)
    per_class = k // ds.classes
    peer_order = rng.permutation(k)
    parts: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * k
    for c in range(ds.classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        if len(idx) < per_class:
            raise ConfigError(f"class {c} has {len(idx)} examples for {per_class} peers")
        owners = peer_order[c * per_class:(c + 1) * per_class]
        for peer, chunk in zip(owners, np.array_split(idx, per_class)):
            parts[peer] = chunk
    return _plan(ds, parts, "extreme")


def partition(ds: Dataset, regime: str, k: int, seed: int, alpha: float = 1.0) -> PartitionPlan:
    if regime == "iid":
        return partition_iid(ds, k, seed)
    if regime == "mild":
        return partition_dirichlet(ds, k, alpha, seed)
    if regime == "extreme":
        return partition_extreme(ds, k, seed)
    raise ConfigError(f"unknown partition regime {regime!r}; expected one of {REGIMES}")


# -- attack ----------------------------------------------------------------


def flip_labels(peer_ds: Dataset, spec: AttackSpec) -> Dataset:
    labels = peer_ds.labels.copy()
    labels[labels == spec.source] = spec.target
    return Dataset(peer_ds.features, labels, peer_ds.classes)


def threat_model_violation(plan: PartitionPlan, n_attackers: int, source: int, target: int) -> str | None:
    """Describe how the attacker count breaks the threat-model bound, or None."""
    if plan.regime == "extreme":
        k_target = len(plan.holders(target))
        if n_attackers >= k_target:
            return f"{n_attackers} attackers >= {k_target} target-class peers"
        return None
    k_source = len(plan.holders(source))
    if n_attackers > k_source / 2:
        return f"{n_attackers} attackers > half of {k_source} source-class peers"
    return None


def select_attackers(
    plan: PartitionPlan, ratio: float, source: int, target: int, seed: int
) -> frozenset[int]:
    """Draw round(ratio * pool) attackers uniformly from peers holding source examples."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"attacker ratio must lie in [0, 1], got {ratio}")
    if source == target:
        raise ConfigError("source and target class must differ")
    pool = plan.holders(source)
    if ratio > 0 and not pool:
        raise ConfigError(f"no peer holds source class {source}")
    n = int(math.floor(ratio * len(pool) + 0.5))
    if n == 0:
        return frozenset()
    rng = np.random.default_rng(seed)
    chosen = rng.choice(np.asarray(pool), size=n, replace=False)
    why = threat_model_violation(plan, n, source, target)
    if why:
        log.warning("threat-model bound exceeded: %s", why)
    return frozenset(int(c) for c in chosen)
