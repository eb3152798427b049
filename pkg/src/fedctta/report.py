"""Result files: per-round CSV, collaboration log, summary tables, sweeps, manifest."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import aggregation as agg
from .config import coerce, dump_config, known_keys
from .drift import compute_sh, compute_th, export_schedule
from .errors import ConfigurationError, UsageError
from .orchestrator import ExperimentConfig, ExperimentResult, run_experiment

ROUND_HEADER = ("slot", "client", "domain", "method", "accuracy", "entropy_before", "entropy_after")

# named ablation axes; any other known config key is accepted as-is
AXIS_KEYS = {
    "agg_interval": "agg_interval",
    "batch_size": "batch_size",
    "metric": "metric",
    "tau": "tau",
    "sh": "drift.n_clusters",
    "th": "drift.change_period",
}


def _f6(x: float) -> str:
    return f"{x:.6f}"


def emit_round_csv(result: ExperimentResult, path) -> None:
    """One row per (slot, client), sorted, decimals fixed at 6 places."""
    names = {d.domain_id: d.name or str(d.domain_id) for d in result.schedule.catalog}
    method = result.config.method
    rows = []
    for r in sorted(result.rounds, key=lambda r: r.slot):
        for i in range(len(r.accuracy)):
            rows.append((r.slot, i, names.get(int(r.domain[i]), str(r.domain[i])), method,
                         _f6(r.accuracy[i]), _f6(r.entropy_before[i]), _f6(r.entropy_after[i])))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUND_HEADER)
        writer.writerows(rows)


def emit_collab_log(result: ExperimentResult, path) -> None:
    """Every aggregation event's matrix, one JSON record per line (empty for other methods)."""
    cfg = result.config
    with open(path, "w") as fh:
        for C in result.collab:
            fh.write(agg.collab_record(C, cfg.metric, cfg.tau) + "\n")


def heterogeneity_label(result: ExperimentResult) -> str:
    sched = result.schedule
    th = float(np.mean([compute_th(sched, i) for i in range(sched.N)]))
    return f"SH={compute_sh(sched, 0):.2f} TH={th:.2f}"


@dataclass
class SummaryRow:
    method: str
    tta_mode: str
    setting: str
    seeds: list[int]
    domain_mean: dict[str, float]
    domain_std: dict[str, float]
    overall_mean: float
    overall_std: float


@dataclass
class SummaryTable:
    domains: list[str]
    rows: list[SummaryRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kind": "summary", "domains": self.domains, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "SummaryTable":
        return cls(d["domains"], [SummaryRow(**r) for r in d["rows"]])

    def row(self, method: str, tta_mode: str | None = None) -> SummaryRow:
        for r in self.rows:
            if r.method == method and (tta_mode is None or r.tta_mode == tta_mode):
                return r
        raise KeyError(method)

    def render(self) -> str:
        """Aligned text table, accuracies in percent."""
        head = ["method", "tta", "setting"] + self.domains + ["overall"]
        body = []
        for r in self.rows:
            cells = [r.method, r.tta_mode, r.setting]
            cells += [f"{100 * r.domain_mean[d]:.2f}" if d in r.domain_mean else "-"
                      for d in self.domains]
            cells.append(f"{100 * r.overall_mean:.2f} ± {100 * r.overall_std:.2f}")
            body.append(cells)
        return _align([head] + body, 3)


def _align(table: list[list[str]], left: int) -> str:
    # the first ``left`` columns are labels, the rest numbers
    widths = [max(len(row[c]) for row in table) for c in range(len(table[0]))]
    lines = ["  ".join(cell.rjust(w) if k >= left else cell.ljust(w)
                       for k, (cell, w) in enumerate(zip(row, widths))).rstrip()
             for row in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _std(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def _comparable(config: ExperimentConfig) -> dict:
    d = config.to_dict()
    d.pop("seed")
    d.pop("workers")
    return d


def summarize_results(results: list[ExperimentResult]) -> SummaryTable:
    """Per-domain and overall mean ± std over seeds, one row per (method, mode, setting).

    A seed's overall score is the mean of its per-domain means.
    """
    if not results:
        raise UsageError("no results to summarise")
    domains = []
    for res in results:
        for d in res.schedule.catalog:
            name = d.name or str(d.domain_id)
            if name not in domains and name in res.summary["per_domain"]:
                domains.append(name)
    groups: dict[tuple, list[ExperimentResult]] = {}
    for res in results:
        cfg = res.config
        groups.setdefault((cfg.method, cfg.tta_mode, heterogeneity_label(res)), []).append(res)
    table = SummaryTable(domains)
    for (method, mode, setting), members in groups.items():
        ref = _comparable(members[0].config)
        seeds = [m.config.seed for m in members]
        if any(_comparable(m.config) != ref for m in members[1:]):
            raise UsageError(f"results for {method}/{mode} were produced by different configs")
        if len(set(seeds)) != len(seeds):
            raise UsageError(f"duplicate seeds for {method}/{mode}")
        per_seed = [m.summary["per_domain"] for m in members]
        present = [d for d in domains if all(d in p for p in per_seed)]
        overall = [float(np.mean([p[d] for d in present])) for p in per_seed]
        table.rows.append(SummaryRow(
            method=method, tta_mode=mode, setting=setting, seeds=seeds,
            domain_mean={d: float(np.mean([p[d] for p in per_seed])) for d in present},
            domain_std={d: _std([p[d] for p in per_seed]) for d in present},
            overall_mean=float(np.mean(overall)),
            overall_std=_std(overall),
        ))
    return table


def emit_summary(results: list[ExperimentResult], path) -> SummaryTable:
    """Write the summary as JSON at ``path`` and as an aligned table beside it (``.txt``)."""
    table = summarize_results(results)
    path = Path(path)
    path.write_text(json.dumps(table.to_dict(), indent=1, sort_keys=True) + "\n")
    path.with_suffix(".txt").write_text(table.render())
    return table


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    code_version: str
    seed: int
    started: str
    finished: str
    files: dict[str, str]

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")

    def verify(self, root) -> list[str]:
        """Names of listed files whose current digest no longer matches."""
        return [name for name, digest in self.files.items()
                if file_digest(Path(root) / name) != digest]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, config: ExperimentConfig, started: str, files: list[str]) -> RunManifest:
    out_dir = Path(out_dir)
    manifest = RunManifest(
        config=config.to_dict(), code_version=__version__, seed=config.seed,
        started=started, finished=_now(),
        files={name: file_digest(out_dir / name) for name in sorted(files)},
    )
    manifest.write(out_dir / "manifest.json")
    return manifest


def run_to_dir(config: ExperimentConfig, out_dir) -> ExperimentResult:
    """Run one experiment and write its full output set into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    result = run_experiment(config)
    emit_round_csv(result, out_dir / "rounds.csv")
    emit_collab_log(result, out_dir / "collab.jsonl")
    export_schedule(result.schedule, out_dir / "schedule.json")
    emit_summary([result], out_dir / "summary.json")
    (out_dir / "config.txt").write_text(dump_config(config))
    files = ["rounds.csv", "collab.jsonl", "schedule.json", "summary.json", "summary.txt",
             "config.txt"]
    write_manifest(out_dir, config, started, files)
    return result


# ---- ablation sweeps ----

@dataclass
class SweepRow:
    axis: str
    value: object
    method: str
    sh: float
    th: float
    seeds: list[int]
    per_seed: list[float]
    mean: float
    std: float


@dataclass
class SweepTable:
    axis: str
    rows: list[SweepRow]

    def to_dict(self) -> dict:
        return {"kind": "sweep", "axis": self.axis, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepTable":
        return cls(d["axis"], [SweepRow(**r) for r in d["rows"]])

    def lookup(self, value, method: str) -> SweepRow:
        for r in self.rows:
            if r.value == value and r.method == method:
                return r
        raise KeyError((value, method))

    def render(self) -> str:
        head = ["value", "method", "SH", "TH", "accuracy"]
        body = [[str(r.value), r.method, f"{r.sh:.2f}", f"{r.th:.2f}",
                 f"{100 * r.mean:.2f} ± {100 * r.std:.2f}"] for r in self.rows]
        return f"axis: {self.axis}\n" + _align([head] + body, 2)


def resolve_axis(axis: str) -> str:
    key = AXIS_KEYS.get(axis, axis)
    if key not in known_keys():
        raise ConfigurationError(f"unknown sweep axis {axis!r}", key="axis")
    return key


def _score(res: ExperimentResult) -> tuple[float, float, float]:
    # (mean of per-domain accuracies, SH, mean TH)
    sched = res.schedule
    th = float(np.mean([compute_th(sched, i) for i in range(sched.N)]))
    return float(np.mean(list(res.summary["per_domain"].values()))), compute_sh(sched, 0), th


def _run_summary(config: ExperimentConfig) -> tuple[float, float, float]:
    return _score(run_experiment(config))


def _run_to_dir_summary(config: ExperimentConfig, out_dir) -> tuple[float, float, float]:
    return _score(run_to_dir(config, out_dir))


def run_ablation(axis: str, values, base: ExperimentConfig, seeds=(0,), methods=None,
                 out_dir=None, jobs: int = 1) -> SweepTable:
    """Seed-paired sweep of one config axis; one row per (value, method).

    Only the axis value (and the method, when several are given) differs
    between runs that share a seed. With ``out_dir`` each run also gets its
    own output directory and the table is written as ``sweep.json``/``.txt``.
    """
    key = resolve_axis(axis)
    tp = known_keys()[key]
    values = [coerce(key, v, tp) for v in values]
    methods = list(methods) if methods else [base.method]
    if not values:
        raise UsageError("sweep needs at least one value")
    plan = []
    for value in values:
        for method in methods:
            for seed in seeds:
                plan.append((value, method, seed,
                             base.replace(**{key: value}, method=method, seed=seed).validate()))
    configs = [p[3] for p in plan]
    if out_dir is not None:
        root = Path(out_dir)
        dirs = [root / f"{axis}={v}" / m / f"seed{s}" for v, m, s, _ in plan]
        runner, args = _run_to_dir_summary, list(zip(configs, dirs))
    else:
        runner, args = _run_summary, [(c,) for c in configs]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            outs = list(pool.map(_star, [runner] * len(args), args))
    else:
        outs = [runner(*a) for a in args]
    rows = []
    for value in values:
        for method in methods:
            picked = [(s, o) for (v, m, s, _), o in zip(plan, outs) if v == value and m == method]
            scores = [o[0] for _, o in picked]
            rows.append(SweepRow(axis, value, method, picked[0][1][1], picked[0][1][2],
                                 [s for s, _ in picked], scores,
                                 float(np.mean(scores)), _std(scores)))
    table = SweepTable(axis, rows)
    if out_dir is not None:
        Path(out_dir, "sweep.json").write_text(json.dumps(table.to_dict(), indent=1) + "\n")
        Path(out_dir, "sweep.txt").write_text(table.render())
    return table


def _star(fn, args):
    return fn(*args)


def load_table(path) -> SummaryTable | SweepTable:
    d = json.loads(Path(path).read_text())
    kind = d.get("kind")
    if kind == "summary":
        return SummaryTable.from_dict(d)
    if kind == "sweep":
        return SweepTable.from_dict(d)
    raise UsageError(f"{os.fspath(path)} is not a summary or sweep file")
