"""Server-side similarity-aware aggregation.

Each client model is fingerprinted by its mean logits over a shared set of
random-noise probes. Pairwise fingerprint similarities pass through a
row-wise softmax to give a collaboration matrix ``C``, and client ``i``
receives ``sum_j C[i, j] * theta_j``.

All reductions whose order could depend on client labelling are done either
with ``math.fsum`` (correctly rounded, so order-free) or in a fixed
``j = 0..N-1`` loop, which keeps results reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigurationError, ShapeError, UsageError

METRICS = ("neg_euclid", "kl", "cross_entropy", "cosine", "feat_neg_euclid", "feat_cosine")


@dataclass(frozen=True)
class ProbeSet:
    samples: np.ndarray
    seed: int

    @property
    def M(self) -> int:
        return self.samples.shape[0]


@dataclass
class Fingerprint:
    mean_logits: np.ndarray
    mean_features: np.ndarray | None = None


@dataclass
class DistanceMatrix:
    D: np.ndarray
    metric: str


@dataclass
class CollaborationMatrix:
    C: np.ndarray
    round: int = 0


def generate_probes(M: int, input_dim: int, seed: int) -> ProbeSet:
    """``M`` i.i.d. standard-normal probe inputs."""
    if M < 1:
        raise ConfigurationError("need at least one probe", key="probes")
    if input_dim < 1:
        raise ConfigurationError("must be positive", key="model.input_dim")
    rng = np.random.default_rng(seed)
    return ProbeSet(rng.standard_normal((M, input_dim)), seed)


def probes_from_samples(samples: np.ndarray, seed: int = 0) -> ProbeSet:
    """Wrap held-out data as a probe set (the "real data" ablation source)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ConfigurationError("probe samples must be a non-empty 2-D array", key="probes")
    return ProbeSet(samples, seed)


def fingerprint(model: nn.Model, probes: ProbeSet, features: bool = False) -> Fingerprint:
    if probes.samples.shape[1] != model.spec.input_dim:
        raise ShapeError(
            f"probe width {probes.samples.shape[1]} != model input_dim {model.spec.input_dim}")
    logits, record = nn.forward(model, probes.samples, "eval", cache=True)
    mean_features = record.inputs[-1].mean(axis=0) if features else None
    return Fingerprint(logits.mean(axis=0), mean_features)


def _kl_rows(p: np.ndarray, logq: np.ndarray, logp: np.ndarray) -> float:
    return float(np.sum(np.where(p > 0, p * (logp - logq), 0.0)))


def pairwise_distance(fps: list[Fingerprint], metric: str = "neg_euclid") -> DistanceMatrix:
    """Similarity matrix; for every metric larger means more alike."""
    if metric not in METRICS:
        raise ConfigurationError(f"unknown metric {metric!r}", key="metric")
    if len(fps) < 2:
        raise UsageError("pairwise distances need at least two fingerprints")
    if metric.startswith("feat_"):
        if any(fp.mean_features is None for fp in fps):
            raise ConfigurationError(f"{metric} needs mean_features on every fingerprint",
                                     key="metric")
        vecs = np.stack([fp.mean_features for fp in fps])
    else:
        vecs = np.stack([fp.mean_logits for fp in fps])
    n = len(fps)
    if vecs.ndim != 2:
        raise ShapeError("fingerprints have mismatched dimensions")

    if metric in ("neg_euclid", "feat_neg_euclid"):
        diff = vecs[:, None, :] - vecs[None, :, :]
        D = -np.sqrt((diff ** 2).sum(axis=2))
    elif metric in ("cosine", "feat_cosine"):
        norms = np.sqrt((vecs ** 2).sum(axis=1))
        dots = (vecs[:, None, :] * vecs[None, :, :]).sum(axis=2)
        denom = norms[:, None] * norms[None, :]
        D = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
        D = np.clip(D, -1.0, 1.0)
        np.fill_diagonal(D, np.where(norms > 0, 1.0, 0.0))
    else:
        logp = nn.log_softmax(vecs)
        p = np.exp(logp)
        D = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                if metric == "kl":
                    D[i, j] = 0.0 if i == j else -_kl_rows(p[i], logp[j], logp[i])
                else:
                    D[i, j] = float(np.sum(p[i] * logp[j]))
    return DistanceMatrix(D, metric)


def collaboration_weights(dist: DistanceMatrix | np.ndarray, temperature: float = 1.0,
                          round: int = 0) -> CollaborationMatrix:
    """Row-wise ``softmax(D / temperature)``."""
    if not temperature > 0:
        raise ConfigurationError("must be positive", key="tau")
    D = dist.D if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=np.float64)
    if not np.all(np.isfinite(D)):
        raise ConfigurationError("distance matrix has non-finite entries", key="metric")
    scaled = D / temperature
    e = np.exp(scaled - scaled.max(axis=1, keepdims=True))
    C = np.empty_like(e)
    for i in range(e.shape[0]):
        C[i] = e[i] / math.fsum(e[i])
    return CollaborationMatrix(C, round)


def _stack(params: list[nn.ParamVector]) -> np.ndarray:
    first = params[0]
    for p in params[1:]:
        if not first.same_layout(p):
            raise ShapeError("client parameter layouts differ")
    return np.stack([p.values for p in params])


def _weighted_sum(weights: np.ndarray, stacked: np.ndarray) -> np.ndarray:
    acc = weights[0] * stacked[0]
    for j in range(1, stacked.shape[0]):
        acc = acc + weights[j] * stacked[j]
    return acc


def aggregate_personalized(params: list[nn.ParamVector], C: CollaborationMatrix | np.ndarray,
                           roles=None) -> list[nn.ParamVector]:
    """``theta_i <- sum_j C[i, j] theta_j`` for every client.

    ``roles`` restricts mixing to those segment roles (e.g. trainable only);
    other segments keep each client's own values.
    """
    weights = C.C if isinstance(C, CollaborationMatrix) else np.asarray(C, dtype=np.float64)
    if not params:
        raise UsageError("nothing to aggregate")
    stacked = _stack(params)
    n = len(params)
    if weights.shape != (n, n):
        raise ShapeError(f"collaboration matrix shape {weights.shape} does not match {n} clients")
    mask = None if roles is None else params[0].role_mask(roles)
    out = []
    for i in range(n):
        mixed = _weighted_sum(weights[i], stacked)
        if mask is not None:
            mixed = np.where(mask, mixed, stacked[i])
        out.append(nn.ParamVector(mixed, params[0].layout))
    return out


def aggregate_fedavg(params: list[nn.ParamVector], client_ids=None) -> nn.ParamVector:
    """Unweighted mean, reduced in ascending client-id order."""
    if not params:
        raise UsageError("nothing to aggregate")
    if client_ids is not None:
        order = sorted(range(len(params)), key=lambda k: client_ids[k])
        params = [params[k] for k in order]
    n = len(params)
    stacked = _stack(params)
    # same kernel and weights as a uniform collaboration row, so the two agree bit for bit
    mean = _weighted_sum(np.full(n, 1.0 / n), stacked)
    return nn.ParamVector(mean, params[0].layout)


def uniform_weights(n: int, round: int = 0) -> CollaborationMatrix:
    return collaboration_weights(np.zeros((n, n)), 1.0, round)


def collab_record(C: CollaborationMatrix, metric: str, temperature: float) -> str:
    """One JSON line describing an aggregation event."""
    return json.dumps({
        "round": int(C.round),
        "metric": metric,
        "tau": float(temperature),
        "matrix": [[float(v) for v in row] for row in C.C],
    }, separators=(",", ":"))


def read_collab_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
