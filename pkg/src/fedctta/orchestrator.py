"""Federated round loop.

A run walks a global slot clock ``t = 0..T-1``. In each slot every client
receives one batch from its drifting stream, predicts, adapts, and after
every ``agg_interval`` slots the method's server step replaces the client
models. Streams depend only on the seed and indices, so every method sees
identical batches at every (client, slot).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import aggregation as agg
from . import drift, nn
from .adaptation import BN_PREDICT, GRAD_SCOPES, TTA_MODES, ClientState, adapt_step
from .errors import ConfigurationError, ShapeError

METHODS = ("no_adapt", "local", "fedavg", "fedavg_ft", "fedctta")
AGGREGATING = ("fedavg", "fedavg_ft", "fedctta")
PROBE_SOURCES = ("noise", "clean")


@dataclass
class ModelConfig:
    input_dim: int = 3
    hidden_dims: tuple[int, ...] = (32,)
    num_classes: int = 6
    # tuned benchmark value; nn.ModelSpec keeps the usual 0.1
    bn_momentum: float = 0.71
    bn_epsilon: float = 1e-5


@dataclass
class TaskConfig:
    class_std: float = 1.0
    separation: float = 4.0
    n_train: int = 2000
    n_test: int = 1000
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.1


@dataclass
class DriftConfig:
    n_clusters: int = 4
    change_period: int = 10
    severity: int = 5
    common_shift: float = 3.71
    specific_shift: float = 1.83
    max_rotation: float = 0.09
    max_log_scale: float = 0.22
    max_noise: float = 0.13


@dataclass
class ExperimentConfig:
    clients: int = 20
    slots: int = 150
    batch_size: int = 10
    tta_mode: str = "bn"
    method: str = "fedctta"
    agg_interval: int = 1
    metric: str = "neg_euclid"
    tau: float = 1.5
    probes: int = 32
    probe_source: str = "noise"
    resample_probes: bool = False
    aggregate_stats: bool = True
    force_uniform: bool = False
    lr: float = 1e-5
    steps_per_batch: int = 1
    grad_scope: str = "all"
    bn_predict: str = "running"
    seed: int = 0
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)

    def validate(self) -> "ExperimentConfig":
        checks = [
            ("clients", self.clients >= 1, "must be at least 1"),
            ("slots", self.slots >= 1, "must be at least 1"),
            ("batch_size", self.batch_size >= 2, "must be at least 2"),
            ("tta_mode", self.tta_mode in TTA_MODES, f"must be one of {TTA_MODES}"),
            ("method", self.method in METHODS, f"must be one of {METHODS}"),
            ("agg_interval", self.agg_interval >= 1, "must be at least 1"),
            ("metric", self.metric in agg.METRICS, f"must be one of {agg.METRICS}"),
            ("tau", self.tau > 0, "must be positive"),
            ("probes", self.probes >= 1, "must be at least 1"),
            ("probe_source", self.probe_source in PROBE_SOURCES, f"must be one of {PROBE_SOURCES}"),
            ("lr", self.lr >= 0 and (self.lr > 0 or self.tta_mode != "grad"),
             "must be positive in grad mode"),
            ("steps_per_batch", self.steps_per_batch >= 1, "must be at least 1"),
            ("grad_scope", self.grad_scope in GRAD_SCOPES, f"must be one of {tuple(GRAD_SCOPES)}"),
            ("bn_predict", self.bn_predict in BN_PREDICT, f"must be one of {BN_PREDICT}"),
            ("workers", self.workers >= 1, "must be at least 1"),
            ("drift.n_clusters", 1 <= self.drift.n_clusters <= self.clients,
             "must be between 1 and the number of clients"),
            ("drift.change_period", self.drift.change_period >= 1, "must be at least 1"),
            ("drift.severity", 1 <= self.drift.severity <= 5, "must be in 1..5"),
            ("task.pretrain_epochs", self.task.pretrain_epochs >= 0, "must be non-negative"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigurationError(message, key=key)
        self.model_spec()
        return self

    def model_spec(self) -> nn.ModelSpec:
        m = self.model
        return nn.ModelSpec(m.input_dim, tuple(m.hidden_dims), m.num_classes,
                            m.bn_momentum, m.bn_epsilon)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["hidden_dims"] = list(self.model.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        model = ModelConfig(**{**d.pop("model", {})})
        model.hidden_dims = tuple(model.hidden_dims)
        task = TaskConfig(**d.pop("task", {}))
        drift_cfg = DriftConfig(**d.pop("drift", {}))
        return cls(**d, model=model, task=task, drift=drift_cfg)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in changes.items():
            section, _, name = key.rpartition(".")
            (d[section] if section else d)[name] = value
        return ExperimentConfig.from_dict(d)


def substream(seed: int, name: str) -> int:
    """Independent integer seed for a named component."""
    tag = [ord(c) for c in name]
    return int(np.random.SeedSequence([seed, *tag]).generate_state(1, np.uint64)[0])


@dataclass
class RoundResult:
    slot: int
    accuracy: np.ndarray
    entropy_before: np.ndarray
    entropy_after: np.ndarray
    domain: np.ndarray
    collab: agg.CollaborationMatrix | None = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rounds: list[RoundResult]
    collab: list[agg.CollaborationMatrix]
    models: list[nn.Model]
    source: nn.Model
    schedule: drift.DriftSchedule
    task: drift.SyntheticTask

    @property
    def summary(self) -> dict:
        return summarize(self.rounds, self.schedule)


def summarize(rounds: list[RoundResult], schedule: drift.DriftSchedule) -> dict:
    acc = np.stack([r.accuracy for r in rounds])         # (T, N)
    dom = np.stack([r.domain for r in rounds])
    names = {d.domain_id: d.name or str(d.domain_id) for d in schedule.catalog}
    per_domain = {}
    for d in schedule.catalog:
        sel = dom == d.domain_id
        if sel.any():
            per_domain[names[d.domain_id]] = float(acc[sel].mean())
    return {
        "mean_accuracy": float(acc.mean()),
        "per_domain": per_domain,
        "per_client": [float(v) for v in acc.mean(axis=0)],
    }


@lru_cache(maxsize=32)
def _task_and_source(seed: int, model_key: tuple, task_key: tuple):
    spec = nn.ModelSpec(*model_key)
    class_std, separation, n_train, n_test, epochs, lr = task_key
    task = drift.make_task(spec.num_classes, spec.input_dim, substream(seed, "task"),
                           class_std=class_std, separation=separation,
                           n_train=n_train, n_test=n_test)
    model = nn.init_model(spec, substream(seed, "init"))
    source = nn.pretrain_source(model, task.train, epochs=epochs, lr=lr,
                                seed=substream(seed, "pretrain"))
    return task, source


def build_world(config: ExperimentConfig):
    """Task, pretrained source model and drift schedule for ``config``."""
    spec = config.model_spec()
    m, t = config.model, config.task
    task, source = _task_and_source(
        config.seed,
        (spec.input_dim, spec.hidden_dims, spec.num_classes, spec.bn_momentum, spec.bn_epsilon),
        (t.class_std, t.separation, t.n_train, t.n_test, t.pretrain_epochs, t.pretrain_lr),
    )
    dc = config.drift
    catalog = drift.default_catalog(
        m.input_dim, severity=dc.severity, seed=substream(config.seed, "catalog"),
        common_shift=dc.common_shift, specific_shift=dc.specific_shift,
        max_rotation=dc.max_rotation, max_log_scale=dc.max_log_scale, max_noise=dc.max_noise)
    schedule = drift.build_schedule(config.clients, config.slots, dc.n_clusters,
                                    dc.change_period, catalog, seed=substream(config.seed, "drift"))
    return task, source.copy(), schedule


def evaluate_on_clean(model: nn.Model, task: drift.SyntheticTask) -> float:
    """Eval-mode accuracy on the held-out clean set."""
    return nn.accuracy(model, task.test)


def step_method_fedctta(clients: list[ClientState], probes: agg.ProbeSet, metric: str = "neg_euclid",
                        tau: float = 1.0, round: int = 0, aggregate_stats: bool = True,
                        force_uniform: bool = False) -> agg.CollaborationMatrix:
    """Fingerprint, compare, weight and mix; client models are replaced in place."""
    ordered = sorted(clients, key=lambda c: c.client_id)
    n = len(ordered)
    if force_uniform or n == 1:
        C = agg.uniform_weights(n, round)
    else:
        features = metric.startswith("feat_")
        fps = [agg.fingerprint(c.model, probes, features=features) for c in ordered]
        C = agg.collaboration_weights(agg.pairwise_distance(fps, metric), tau, round)
    params = [nn.flatten(c.model) for c in ordered]
    roles = None if aggregate_stats else nn.TRAINABLE_ROLES
    mixed = agg.aggregate_personalized(params, C, roles=roles)
    for client, theta in zip(ordered, mixed):
        client.model = nn.unflatten(client.model.spec, theta)
    return C


def step_method_fedavg(clients: list[ClientState], aggregate_stats: bool = True) -> None:
    """Replace every client model by the uniform mean."""
    ordered = sorted(clients, key=lambda c: c.client_id)
    params = [nn.flatten(c.model) for c in ordered]
    mean = agg.aggregate_fedavg(params)
    for client, own in zip(ordered, params):
        values = mean.values
        if not aggregate_stats:
            values = np.where(own.trainable_mask(), mean.values, own.values)
        client.model = nn.unflatten(client.model.spec, nn.ParamVector(values, own.layout))


# fine-tuning after the broadcast is the continual adaptation every method already does
step_method_fedavg_ft = step_method_fedavg


_CKPT_MAGIC = b"FCTTACK1"


class Experiment:
    """Resumable simulation state for one configuration."""

    def __init__(self, config: ExperimentConfig):
        self.config = config.validate()
        self.task, self.source, self.schedule = build_world(config)
        mode = "none" if config.method == "no_adapt" else config.tta_mode
        self.clients = [
            ClientState(i, self.source.copy(), tta_mode=mode, lr=config.lr,
                        steps_per_batch=config.steps_per_batch, grad_scope=config.grad_scope,
                        bn_predict=config.bn_predict)
            for i in range(config.clients)
        ]
        self.slot = 0
        self.round = 0
        self.rounds: list[RoundResult] = []
        self.collab: list[agg.CollaborationMatrix] = []
        self._probes = self._make_probes(0) if config.method == "fedctta" else None

    def _make_probes(self, round_index: int) -> agg.ProbeSet:
        cfg = self.config
        if cfg.probe_source == "clean":
            rng = np.random.default_rng([substream(cfg.seed, "probes"), round_index])
            return agg.probes_from_samples(self.task.sample(cfg.probes, rng).inputs)
        seed = substream(cfg.seed, "probes")
        if cfg.resample_probes:
            seed = int(np.random.SeedSequence([seed, round_index]).generate_state(1)[0])
        return agg.generate_probes(cfg.probes, cfg.model.input_dim, seed)

    @property
    def done(self) -> bool:
        return self.slot >= self.config.slots

    def step(self) -> RoundResult:
        cfg = self.config
        t = self.slot
        stream_seed = substream(cfg.seed, "stream")
        batches = [drift.stream_batch(self.task, self.schedule, c.client_id, t, 0,
                                      cfg.batch_size, stream_seed) for c in self.clients]
        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                outcomes = list(pool.map(adapt_step, self.clients, batches))
        else:
            outcomes = [adapt_step(c, b) for c, b in zip(self.clients, batches)]
        result = RoundResult(
            slot=t,
            accuracy=np.array([o.accuracy for o in outcomes]),
            entropy_before=np.array([o.mean_entropy_before for o in outcomes]),
            entropy_after=np.array([o.mean_entropy_after for o in outcomes]),
            domain=self.schedule.assignment[:, t].copy(),
        )
        if cfg.method in AGGREGATING and (t + 1) % cfg.agg_interval == 0:
            self.round += 1
            if cfg.method == "fedctta":
                if cfg.resample_probes:
                    self._probes = self._make_probes(self.round)
                C = step_method_fedctta(self.clients, self._probes, cfg.metric, cfg.tau,
                                        self.round, cfg.aggregate_stats, cfg.force_uniform)
                result.collab = C
                self.collab.append(C)
            else:
                step_method_fedavg(self.clients, cfg.aggregate_stats)
        self.rounds.append(result)
        self.slot += 1
        return result

    def run(self) -> ExperimentResult:
        while not self.done:
            self.step()
        return ExperimentResult(self.config, self.rounds, self.collab,
                                [c.model for c in self.clients], self.source,
                                self.schedule, self.task)

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path) -> None:
        header = {
            "config": self.config.to_dict(),
            "slot": self.slot,
            "round": self.round,
            "rounds": [_round_to_dict(r) for r in self.rounds],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for c in self.clients:
                fh.write(nn.flatten(c.model).to_bytes())

    @classmethod
    def load_checkpoint(cls, path) -> "Experiment":
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(_CKPT_MAGIC):
            raise ShapeError("not a checkpoint file")
        offset = len(_CKPT_MAGIC)
        (size,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        header = json.loads(data[offset:offset + size])
        offset += size
        exp = cls(ExperimentConfig.from_dict(header["config"]))
        for client in exp.clients:
            vec, offset = nn.ParamVector.read_from(data, offset)
            client.model = nn.unflatten(client.model.spec, vec)
        if offset != len(data):
            raise ShapeError("trailing bytes in checkpoint")
        exp.slot = header["slot"]
        exp.round = header["round"]
        exp.rounds = [_round_from_dict(r) for r in header["rounds"]]
        exp.collab = [r.collab for r in exp.rounds if r.collab is not None]
        if exp.config.method == "fedctta" and exp.config.resample_probes and exp.round > 0:
            exp._probes = exp._make_probes(exp.round)
        return exp


def _round_to_dict(r: RoundResult) -> dict:
    return {
        "slot": r.slot,
        "accuracy": r.accuracy.tolist(),
        "entropy_before": r.entropy_before.tolist(),
        "entropy_after": r.entropy_after.tolist(),
        "domain": r.domain.tolist(),
        "collab": None if r.collab is None else {"round": r.collab.round, "C": r.collab.C.tolist()},
    }


def _round_from_dict(d: dict) -> RoundResult:
    collab = None
    if d["collab"] is not None:
        collab = agg.CollaborationMatrix(np.array(d["collab"]["C"]), d["collab"]["round"])
    return RoundResult(d["slot"], np.array(d["accuracy"]), np.array(d["entropy_before"]),
                       np.array(d["entropy_after"]), np.array(d["domain"], dtype=np.int64), collab)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    return Experiment(config).run()
