"""Synthetic ordered-domain data: rotated 2-D point clouds, class-prior
shifting, and the batch-construction protocols used by the training harness.

A suite is an ordered list of domains generated from one set of base points.
Every domain rotates the same base points by its own angle and then adds
fresh Gaussian noise, so the sample sharing ``base_id`` across domains is a
near- (not exact-) rotation of itself. That shared ``base_id`` is what makes
paired batches and the paired-prediction diagnostics possible.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .losses import BatchLabels

DEFAULT_ANGLES = (0.0, 15.0, 30.0, 45.0, 60.0, 75.0)
GENERATOR_KINDS = ("moons", "gaussians")

# Offset that roughly centers the standard two-moons construction on the
# origin, so domain rotations spin the cloud in place.
_MOONS_CENTER = np.array([0.5, 0.25])
_GAUSSIAN_RADIUS = 2.0
_GAUSSIAN_SPREAD = 0.35


@dataclass(frozen=True)
class Sample:
    """One labeled point; ``base_id`` identifies its pre-rotation origin."""

    x: np.ndarray
    y: int
    base_id: int


@dataclass
class DomainDataset:
    """Array-backed collection of samples from a single domain."""

    x: np.ndarray
    y: np.ndarray
    base_id: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.base_id = np.asarray(self.base_id, dtype=np.int64).reshape(-1)
        if self.x.shape[0] != self.y.size or self.y.size != self.base_id.size:
            raise ContractError("x, y and base_id must agree in length")

    def __len__(self) -> int:
        return self.y.size

    def sample(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]), int(self.base_id[i]))

    def subset(self, indices) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return DomainDataset(self.x[idx], self.y[idx], self.base_id[idx])

    def class_counts(self, class_count: int) -> np.ndarray:
        return np.bincount(self.y, minlength=class_count)


@dataclass
class DomainSuite:
    """Ordered domains plus the per-domain transformation parameter (degrees)."""

    domains: list[DomainDataset]
    domain_params: list[float]
    class_count: int

    def __post_init__(self):
        if len(self.domains) != len(self.domain_params):
            raise ContractError("one parameter per domain required")

    def __len__(self) -> int:
        return len(self.domains)

    @property
    def feature_dim(self) -> int:
        return self.domains[0].x.shape[1]

    def drop(self, index: int) -> "DomainSuite":
        """Suite without domain ``index``; shares the underlying arrays."""
        keep = [i for i in range(len(self.domains)) if i != index]
        return DomainSuite([self.domains[i] for i in keep],
                           [self.domain_params[i] for i in keep], self.class_count)


@dataclass
class PriorShiftSpec:
    """Per-domain class probabilities P(Y | D); each row sums to 1."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ConfigError("probs must be a (domains x classes) matrix")
        if np.any(self.probs < 0):
            raise ConfigError("class probabilities must be nonnegative")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigError("each domain's class probabilities must sum to 1")


def rotate(points: np.ndarray, degrees: float) -> np.ndarray:
    """Counterclockwise rotation about the origin."""
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    return points @ np.array([[c, s], [-s, c]])


def _moons_base(n_per_class: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t = rng.uniform(0.0, np.pi, size=n_per_class)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    t = rng.uniform(0.0, np.pi, size=n_per_class)
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = np.vstack([upper, lower]) - _MOONS_CENTER
    y = np.repeat([0, 1], n_per_class)
    return x, y


def _gaussians_base(n_per_class: int, class_count: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    blocks, labels = [], []
    for c in range(class_count):
        angle = 2.0 * np.pi * c / class_count
        center = _GAUSSIAN_RADIUS * np.array([np.cos(angle), np.sin(angle)])
        blocks.append(center + rng.normal(0.0, _GAUSSIAN_SPREAD, size=(n_per_class, 2)))
        labels.append(np.full(n_per_class, c))
    return np.vstack(blocks), np.concatenate(labels)


def gen_rotated_suite(kind: str, n_per_class: int, angles=DEFAULT_ANGLES,
                      noise_sd: float = 0.08, seed: int = 0,
                      class_count: int = 3) -> DomainSuite:
    """Generate one base point cloud and one rotated domain per angle.

    Domain k holds the base points rotated by ``angles[k]`` plus fresh
    per-domain Gaussian noise of sd ``noise_sd``. ``base_id`` runs over the
    base points and is shared across domains. ``class_count`` only applies
    to the "gaussians" kind; "moons" is binary.
    """
    if kind not in GENERATOR_KINDS:
        raise ConfigError(f"unknown generator kind {kind!r}; expected one of {GENERATOR_KINDS}")
    angles = [float(a) for a in angles]
    if len(set(angles)) != len(angles):
        raise ConfigError("angles must be distinct")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(len(angles) + 1)
    base_rng = np.random.default_rng(streams[0])
    if kind == "moons":
        base_x, base_y = _moons_base(n_per_class, base_rng)
        m = 2
    else:
        base_x, base_y = _gaussians_base(n_per_class, class_count, base_rng)
        m = class_count
    base_ids = np.arange(base_y.size)
    domains = []
    for k, angle in enumerate(angles):
        rng = np.random.default_rng(streams[k + 1])
        noise = rng.normal(0.0, noise_sd, size=base_x.shape) if noise_sd > 0 else 0.0
        domains.append(DomainDataset(rotate(base_x, angle) + noise, base_y.copy(), base_ids.copy()))
    return DomainSuite(domains, angles, m)


def _apportion(target_probs: np.ndarray, available: np.ndarray) -> np.ndarray:
    """Largest subsample whose class mix matches ``target_probs`` within one.

    Total T is the largest integer with p_c * T <= available_c for every
    class with p_c > 0; counts are floor(p_c * T) topped up by largest
    fractional remainder until they sum to T.
    """
    with np.errstate(divide="ignore"):
        caps = np.where(target_probs > 0, available / np.where(target_probs > 0, target_probs, 1.0), np.inf)
    total = int(np.floor(caps.min()))
    raw = target_probs * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - counts.sum()
    if remainder > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def apply_prior_shift(suite: DomainSuite, spec: PriorShiftSpec, seed: int = 0) -> DomainSuite:
    """Subsample each domain so its class frequencies match the spec.

    A class probability of zero empties that class, which later stages
    must tolerate. ``base_id`` values of retained samples are preserved.
    """
    if spec.probs.shape != (len(suite), suite.class_count):
        raise ConfigError(
            f"prior-shift spec shape {spec.probs.shape} does not match "
            f"({len(suite)}, {suite.class_count})"
        )
    streams = np.random.SeedSequence(seed).spawn(len(suite))
    shifted = []
    for d, dataset in enumerate(suite.domains):
        rng = np.random.default_rng(streams[d])
        counts = _apportion(spec.probs[d], dataset.class_counts(suite.class_count))
        keep = []
        for c in range(suite.class_count):
            idx = np.flatnonzero(dataset.y == c)
            if counts[c] > 0:
                keep.append(rng.choice(idx, size=counts[c], replace=False))
        keep = np.sort(np.concatenate(keep)) if keep else np.empty(0, dtype=np.intp)
        shifted.append(dataset.subset(keep))
    return DomainSuite(shifted, list(suite.domain_params), suite.class_count)


def _cycled(order: np.ndarray, start: int, count: int) -> np.ndarray:
    """``count`` entries of ``order`` starting at ``start``, wrapping around."""
    reps = np.arange(start, start + count) % order.size
    return order[reps]


def stratified_batches(suite: DomainSuite, per_class_per_domain: int,
                       paired: bool = False, seed=0):
    """One epoch of batches, each with ``per_class_per_domain`` samples from
    every (domain, class) cell.

    Paired mode draws base_ids common to all domains per class, so every
    domain contributes the same base points; unpaired mode samples each
    cell independently. Cells smaller than the draw size cycle their
    shuffled samples (each sample reused at most once more than any other
    over the epoch); empty cells contribute nothing and raise a warning.
    Deterministic given ``seed``. Yields (x, BatchLabels) pairs.
    """
    if per_class_per_domain < 1:
        raise ConfigError("per_class_per_domain must be >= 1")
    k = per_class_per_domain
    rng = np.random.default_rng(seed)
    n_domains, m = len(suite), suite.class_count

    if paired:
        usable: dict[int, np.ndarray] = {}
        for c in range(m):
            common = None
            for dataset in suite.domains:
                ids = set(dataset.base_id[dataset.y == c].tolist())
                common = ids if common is None else (common & ids)
            common = np.array(sorted(common), dtype=np.int64) if common else np.empty(0, np.int64)
            if common.size == 0:
                warnings.warn(f"paired sampling: class {c} has no base_id common to all domains")
            else:
                usable[c] = common[rng.permutation(common.size)]
        if not usable:
            return
        lookup = [{(int(b), int(cc)): i for i, (b, cc) in enumerate(zip(ds.base_id, ds.y))}
                  for ds in suite.domains]
        n_batches = max(int(np.ceil(ids.size / k)) for ids in usable.values())
        for b in range(n_batches):
            xs, ys, doms, pids = [], [], [], []
            chosen = {c: _cycled(ids, b * k, k) for c, ids in usable.items()}
            for d, dataset in enumerate(suite.domains):
                for c, ids in chosen.items():
                    rows = [lookup[d][(int(bid), c)] for bid in ids]
                    xs.append(dataset.x[rows])
                    ys.append(np.full(k, c, dtype=np.int64))
                    doms.append(np.full(k, d, dtype=np.int64))
                    pids.append(ids)
            yield np.vstack(xs), BatchLabels(np.concatenate(ys), np.concatenate(doms),
                                             np.concatenate(pids))
        return

    orders: dict[tuple[int, int], np.ndarray] = {}
    for d, dataset in enumerate(suite.domains):
        for c in range(m):
            idx = np.flatnonzero(dataset.y == c)
            if idx.size == 0:
                warnings.warn(f"empty cell: domain {d} has no samples of class {c}")
            else:
                orders[(d, c)] = idx[rng.permutation(idx.size)]
    if not orders:
        return
    n_batches = max(int(np.ceil(order.size / k)) for order in orders.values())
    for b in range(n_batches):
        xs, ys, doms = [], [], []
        for d, dataset in enumerate(suite.domains):
            for c in range(m):
                order = orders.get((d, c))
                if order is None:
                    continue
                rows = _cycled(order, b * k, k)
                xs.append(dataset.x[rows])
                ys.append(np.full(k, c, dtype=np.int64))
                doms.append(np.full(k, d, dtype=np.int64))
        yield np.vstack(xs), BatchLabels(np.concatenate(ys), np.concatenate(doms))


def stratified_folds(dataset: DomainDataset, n_folds: int, seed: int = 0) -> list[DomainDataset]:
    """Partition into folds whose per-class counts differ by at most one."""
    if n_folds < 1:
        raise ConfigError("n_folds must be >= 1")
    counts = np.bincount(dataset.y)
    smallest = counts[counts > 0].min()
    if n_folds > smallest:
        raise ConfigError(f"n_folds={n_folds} exceeds smallest class count {smallest}")
    rng = np.random.default_rng(seed)
    fold_members: list[list[np.ndarray]] = [[] for _ in range(n_folds)]
    for c in np.unique(dataset.y):
        idx = np.flatnonzero(dataset.y == c)
        order = idx[rng.permutation(idx.size)]
        for f in range(n_folds):
            fold_members[f].append(order[f::n_folds])
    return [dataset.subset(np.sort(np.concatenate(members))) for members in fold_members]


def train_test_split(dataset: DomainDataset, train_fraction: float,
                     seed: int = 0) -> tuple[DomainDataset, DomainDataset]:
    """Class-stratified random split; deterministic given seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(dataset.y):
        idx = np.flatnonzero(dataset.y == c)
        order = idx[rng.permutation(idx.size)]
        n_train = int(round(train_fraction * idx.size))
        train_idx.append(order[:n_train])
        test_idx.append(order[n_train:])
    return (dataset.subset(np.sort(np.concatenate(train_idx))),
            dataset.subset(np.sort(np.concatenate(test_idx))))


def suite_to_csv(suite: DomainSuite, path) -> None:
    """Write every sample as ``base_id,domain,y,x0,x1,...`` rows.

    Floats use 17 significant digits so a round trip is value-exact.
    """
    dim = suite.feature_dim
    header = "base_id,domain,y," + ",".join(f"x{i}" for i in range(dim))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for d, dataset in enumerate(suite.domains):
            for i in range(len(dataset)):
                coords = ",".join(f"{v:.17g}" for v in dataset.x[i])
                fh.write(f"{dataset.base_id[i]},{d},{dataset.y[i]},{coords}\n")


def suite_from_csv(path, domain_params: list[float] | None = None) -> DomainSuite:
    """Rebuild a suite from :func:`suite_to_csv` output.

    Domain parameters are not stored in the CSV; pass them explicitly or
    the domain indices are used as placeholders.
    """
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:3] != ["base_id", "domain", "y"]:
            raise ContractError(f"unexpected CSV header in {path}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    by_domain: dict[int, list[list[str]]] = {}
    for row in rows:
        by_domain.setdefault(int(row[1]), []).append(row)
    order = sorted(by_domain)
    domains = []
    for d in order:
        chunk = by_domain[d]
        domains.append(DomainDataset(
            np.array([[float(v) for v in r[3:]] for r in chunk]),
            np.array([int(r[2]) for r in chunk]),
            np.array([int(r[0]) for r in chunk]),
        ))
    params = list(domain_params) if domain_params is not None else [float(d) for d in order]
    class_count = int(max(ds.y.max() for ds in domains)) + 1
    return DomainSuite(domains, params, class_count)


@dataclass
class SuiteSpec:
    """Everything needed to regenerate a suite deterministically."""

    kind: str = "moons"
    n_per_class: int = 100
    angles: tuple[float, ...] = DEFAULT_ANGLES
    noise_sd: float = 0.08
    seed: int = 0
    class_count: int = 3
    prior_shift: list[list[float]] | None = None
    prior_shift_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_per_class": self.n_per_class,
            "angles": list(self.angles),
            "noise_sd": self.noise_sd,
            "seed": self.seed,
            "class_count": self.class_count,
            "prior_shift": self.prior_shift,
            "prior_shift_seed": self.prior_shift_seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SuiteSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown suite fields: {sorted(unknown)}")
        spec = cls(**raw)
        if spec.kind not in GENERATOR_KINDS:
            raise ConfigError(f"unknown generator kind {spec.kind!r}")
        return spec

    def build(self) -> DomainSuite:
        suite = gen_rotated_suite(self.kind, self.n_per_class, self.angles,
                                  self.noise_sd, self.seed, self.class_count)
        if self.prior_shift is not None:
            suite = apply_prior_shift(suite, PriorShiftSpec(np.array(self.prior_shift)),
                                      self.prior_shift_seed)
        return suite


def save_manifest(spec: SuiteSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> SuiteSpec:
    with open(path) as fh:
        raw = json.load(fh)
    if "angles" in raw:
        raw["angles"] = tuple(raw["angles"])
    return SuiteSpec.from_dict(raw)
