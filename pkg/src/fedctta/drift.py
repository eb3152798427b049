"""Synthetic non-stationary data streams.

The base task is a mixture of isotropic Gaussian blobs, one per class.
A domain is a covariate shift ``x -> scale * R x + shift + noise`` with ``R``
a plane rotation; labels are never touched. A schedule assigns one domain
to every (client, slot) pair; clients in the same cluster share the whole
domain sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .nn import Batch

SOURCE_DOMAIN = -1

# Labels only: they name the catalog slots so per-domain tables line up
# with the usual corruption-benchmark column order.
CATALOG_NAMES = (
    "gaussian", "shot", "impulse", "defocus", "glass", "motion", "zoom", "snow",
    "frost", "fog", "brightness", "contrast", "elastic", "pixelate", "jpeg",
)


@dataclass
class SyntheticTask:
    means: np.ndarray
    class_std: float
    seed: int
    train: Batch
    test: Batch

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def input_dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        labels = rng.integers(0, self.num_classes, size=n)
        x = self.means[labels] + self.class_std * rng.standard_normal((n, self.input_dim))
        return Batch(x, labels)


def make_task(K: int, input_dim: int, seed: int, class_std: float = 1.0,
              separation: float = 5.0, n_train: int = 2000, n_test: int = 1000) -> SyntheticTask:
    """Gaussian blobs whose closest pair of means sits ``separation * class_std`` apart."""
    if K < 2:
        raise ConfigurationError("need at least 2 classes", key="model.num_classes")
    if input_dim < 1:
        raise ConfigurationError("must be positive", key="model.input_dim")
    if separation < 4.0:
        raise ConfigurationError("class means must be at least 4 std apart", key="task.separation")
    rng = np.random.default_rng([seed, 0])
    raw = rng.standard_normal((K, input_dim))
    raw -= raw.mean(axis=0)
    gaps = np.linalg.norm(raw[:, None, :] - raw[None, :, :], axis=2)
    min_gap = gaps[~np.eye(K, dtype=bool)].min()
    means = raw * (separation * class_std / min_gap)
    task = SyntheticTask(means, class_std, seed, None, None)
    task.train = task.sample(n_train, np.random.default_rng([seed, 1]))
    task.test = task.sample(n_test, np.random.default_rng([seed, 2]))
    return task


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    name: str = ""
    rotation: float = 0.0              # radians, in the (plane[0], plane[1]) plane
    plane: tuple[int, int] = (0, 1)
    scale: float = 1.0
    shift: tuple[float, ...] = ()      # empty means no shift
    noise_std: float = 0.0
    severity: int = 5

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigurationError("scale must be positive", key="drift.catalog")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative", key="drift.catalog")
        if not 1 <= self.severity <= 5:
            raise ConfigurationError("severity must be in 1..5", key="drift.severity")

    def rotation_matrix(self, dim: int) -> np.ndarray:
        R = np.eye(dim)
        if self.rotation == 0.0 or dim < 2:
            return R
        p, q = self.plane
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        R[p, p], R[p, q], R[q, p], R[q, q] = c, -s, s, c
        return R

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id, "name": self.name, "rotation": self.rotation,
            "plane": list(self.plane), "scale": self.scale, "shift": list(self.shift),
            "noise_std": self.noise_std, "severity": self.severity,
        }


def apply_domain(batch: Batch, domain: DomainSpec, seed) -> Batch:
    """Covariate shift of ``batch``; labels are passed through unchanged."""
    x = batch.inputs
    d = x.shape[1]
    out = domain.scale * (x @ domain.rotation_matrix(d).T)
    if domain.shift:
        shift = np.asarray(domain.shift, dtype=np.float64)
        if shift.shape != (d,):
            raise ShapeError(f"domain shift has length {shift.size}, inputs have {d} features")
        out = out + shift
    if domain.noise_std > 0:
        rng = np.random.default_rng(seed)
        out = out + domain.noise_std * rng.standard_normal(out.shape)
    return Batch(out, batch.labels)


def default_catalog(input_dim: int, severity: int = 5, seed: int = 0,
                    common_shift: float = 2.0, specific_shift: float = 2.0,
                    max_rotation: float = 0.6, max_log_scale: float = 0.5,
                    max_noise: float = 0.5) -> list[DomainSpec]:
    """Fifteen domains sharing one common offset plus a domain-specific part.

    Every magnitude grows linearly with ``severity`` (1..5).
    """
    if not 1 <= severity <= 5:
        raise ConfigurationError("severity must be in 1..5", key="drift.severity")
    if input_dim < 2:
        raise ConfigurationError("catalog needs input_dim >= 2", key="model.input_dim")
    rng = np.random.default_rng([seed, 7])
    level = severity / 5.0
    common = rng.standard_normal(input_dim)
    common *= common_shift / np.linalg.norm(common)
    catalog = []
    for k, name in enumerate(CATALOG_NAMES):
        direction = rng.standard_normal(input_dim)
        direction /= np.linalg.norm(direction)
        p, q = rng.choice(input_dim, size=2, replace=False)
        sign = 1.0 if k % 2 == 0 else -1.0
        catalog.append(DomainSpec(
            domain_id=k,
            name=name,
            rotation=float(sign * max_rotation * level * rng.uniform(0.5, 1.0)),
            plane=(int(p), int(q)),
            scale=float(np.exp(max_log_scale * level * rng.uniform(-1.0, 1.0))),
            shift=tuple(float(v) for v in level * (common + specific_shift * direction)),
            noise_std=float(max_noise * level * rng.uniform(0.0, 1.0)),
            severity=severity,
        ))
    return catalog


@dataclass
class DriftSchedule:
    assignment: np.ndarray              # (N, T) domain ids
    cluster_of: np.ndarray              # (N,)
    catalog: list[DomainSpec]
    slot_length: int = 1
    source_domain: int = SOURCE_DOMAIN

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.cluster_of = np.asarray(self.cluster_of, dtype=np.int64)
        if self.assignment.ndim != 2:
            raise ShapeError("assignment must be an N x T matrix")
        if self.cluster_of.shape != (self.assignment.shape[0],):
            raise ShapeError("cluster_of needs one entry per client")
        self._by_id = {d.domain_id: d for d in self.catalog}

    @property
    def N(self) -> int:
        return self.assignment.shape[0]

    @property
    def T(self) -> int:
        return self.assignment.shape[1]

    def domain(self, i: int, t: int) -> DomainSpec:
        return self._by_id[int(self.assignment[i, t])]


def _group_orders(n_groups: int, L: int, rng: np.random.Generator) -> list[list[int]]:
    # forward rotations spread evenly over the catalog, then reversed
    # rotations, then seeded random permutations; all distinct when possible
    orders, seen = [], set()
    base = list(range(L))
    candidates = [base[(g * L // min(n_groups, L)) % L:] + base[:(g * L // min(n_groups, L)) % L]
                  for g in range(min(n_groups, L))]
    rev = base[::-1]
    candidates += [rev[g:] + rev[:g] for g in range(L)]
    for order in candidates:
        if len(orders) == n_groups:
            break
        if tuple(order) not in seen:
            seen.add(tuple(order))
            orders.append(order)
    attempts = 0
    while len(orders) < n_groups:
        order = list(rng.permutation(L))
        attempts += 1
        if tuple(order) not in seen or attempts > 1000:
            seen.add(tuple(order))
            orders.append(order)
    return orders


def build_schedule(N: int, T: int, n_clusters: int, change_period: int,
                   catalog: list[DomainSpec], seed: int = 0) -> DriftSchedule:
    """Contiguous client groups, each cycling through its own ordering of the catalog."""
    if not catalog:
        raise ConfigurationError("catalog is empty", key="drift.catalog")
    if N < 1 or T < 1:
        raise ConfigurationError("N and T must be positive", key="clients")
    if not 1 <= n_clusters <= N:
        raise ConfigurationError(f"must be in 1..{N}", key="drift.n_clusters")
    if change_period < 1:
        raise ConfigurationError("must be at least 1", key="drift.change_period")
    L = len(catalog)
    ids = [d.domain_id for d in catalog]
    orders = _group_orders(n_clusters, L, np.random.default_rng([seed, 11]))
    # contiguous, near-equal groups: sizes differ by at most one, larger groups first
    base, extra = divmod(N, n_clusters)
    sizes = [base + 1] * extra + [base] * (n_clusters - extra)
    cluster_of = np.repeat(np.arange(n_clusters), sizes)
    assignment = np.empty((N, T), dtype=np.int64)
    for i in range(N):
        order = orders[cluster_of[i]]
        for t in range(T):
            assignment[i, t] = ids[order[(t // change_period) % L]]
    return DriftSchedule(assignment, cluster_of, list(catalog))


def compute_sh(schedule: DriftSchedule, t: int) -> float:
    """Spatial heterogeneity: clusters of clients sharing a domain sequence, over N.

    Clients belong to one cluster when their domain sequences agree over the
    full horizon; ``t`` must be a valid slot.
    """
    if not 0 <= t < schedule.T:
        raise IndexError(f"slot {t} outside 0..{schedule.T - 1}")
    rows = {tuple(row) for row in schedule.assignment.tolist()}
    return len(rows) / schedule.N


def compute_th(schedule: DriftSchedule, i: int) -> float:
    """Temporal heterogeneity: domain changes over T for client ``i``.

    A change is a slot whose domain differs from the previous slot's; before
    slot 0 the client sits in the source domain.
    """
    if not 0 <= i < schedule.N:
        raise IndexError(f"client {i} outside 0..{schedule.N - 1}")
    row = schedule.assignment[i]
    prev = np.concatenate([[schedule.source_domain], row[:-1]])
    return int(np.count_nonzero(row != prev)) / schedule.T


def stream_batch(task: SyntheticTask, schedule: DriftSchedule, i: int, t: int,
                 batch_index: int = 0, batch_size: int = 10, seed: int = 0) -> Batch:
    """Clean samples for (client, slot, batch) pushed through that slot's domain."""
    if not 0 <= i < schedule.N:
        raise IndexError(f"client {i} outside 0..{schedule.N - 1}")
    if not 0 <= t < schedule.T:
        raise IndexError(f"slot {t} outside 0..{schedule.T - 1}")
    if batch_index < 0 or batch_size < 1:
        raise IndexError("batch_index must be >= 0 and batch_size >= 1")
    key = [seed, i, t, batch_index]
    clean = task.sample(batch_size, np.random.default_rng([*key, 0]))
    return apply_domain(clean, schedule.domain(i, t), [*key, 1])


def export_schedule(schedule: DriftSchedule, path) -> None:
    """JSON dump of the assignment with per-slot SH and per-client TH."""
    doc = {
        "N": schedule.N,
        "T": schedule.T,
        "cluster_of": schedule.cluster_of.tolist(),
        "assignment": schedule.assignment.tolist(),
        "sh": [compute_sh(schedule, t) for t in range(schedule.T)],
        "th": [compute_th(schedule, i) for i in range(schedule.N)],
        "catalog": [d.to_dict() for d in schedule.catalog],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
