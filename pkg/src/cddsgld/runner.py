"""Experiment configuration, grid execution and result persistence.

Config files are flat INI-style text: ``[section]`` headers, one
``key = value`` per line, ``#`` comments.  Lists are written ``[a, b, c]``.
An empty value means "use the default".
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .channel import ChannelParams
from .errors import ConfigParseError, NumericalDivergenceError
from .metrics import CSV_COLUMNS, EvaluationReport, accuracy, ece, ensemble_predict, posterior_moment_error
from .models import TASK_KINDS, AgentGradients, Task, exact_posterior, generate_synthetic_task
from .rng import substream
from .samplers import ALGORITHMS, SamplerConfig, run_chain
from .topology import TOPOLOGY_KINDS, mixing_for


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "softmax-mlp"
    input_dim: int = 10
    hidden: int = 16
    classes: int = 6
    per_class: int = 40
    validation_size: int = 2400
    separation: float = 1.0
    label_noise: float = 0.0
    class_skew: float = 0.0
    observations_per_agent: int = 4
    noise_var: float = 1.0
    data_seed: int | None = None
    batch_fraction: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    topologies: tuple[str, ...] = ("full",)
    n_agents: int = 5
    algorithms: tuple[str, ...] = ("cd-dsgld",)
    step_size: float = 1e-4
    rounds: int = 15_000
    burn_in: int = 14_900
    snr_db: tuple[float, ...] = (20.0,)
    power: float = 1.0
    n_bits: int | None = 10
    unlimited_budget: bool = False
    bins: int = 10
    seeds: tuple[int, ...] = (0,)
    init_scale: float = 1.0
    out_dir: str = "results"
    dump_samples: bool = False

    @property
    def noise_powers(self) -> tuple[float, ...]:
        """``N0 = P / 10^(SNR_dB / 10)`` for each configured SNR."""
        return tuple(self.power / 10.0 ** (s / 10.0) for s in self.snr_db)

    def sampler(self, algorithm: str) -> SamplerConfig:
        return SamplerConfig(
            algorithm, self.step_size, self.rounds, self.burn_in,
            n_bits=self.n_bits, unlimited_budget=self.unlimited_budget,
            batch_fraction=self.task.batch_fraction,
        )

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


# -- parsing -----------------------------------------------------------------


def _parse_scalar(raw: str) -> Any:
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw.strip("\"'")


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    if raw.startswith("["):
        if not raw.endswith("]"):
            raise ValueError("unterminated list")
        inner = raw[1:-1].strip()
        return [_parse_scalar(p.strip()) for p in inner.split(",")] if inner else []
    return _parse_scalar(raw)


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError(f"expected true/false, got {v!r}")
    return v


def _str(v):
    return str(v)


def _opt_int(v):
    return None if v is None else _int(v)


def _list(item, allowed=None, nonempty=True):
    def conv(v):
        vals = v if isinstance(v, list) else [v]
        out = tuple(item(x) for x in vals)
        if nonempty and not out:
            raise ValueError("list must not be empty")
        if allowed is not None:
            bad = [x for x in out if x not in allowed]
            if bad:
                raise ValueError(f"unknown value(s) {bad}; allowed: {list(allowed)}")
        return out
    return conv


def _choice(allowed):
    def conv(v):
        if v not in allowed:
            raise ValueError(f"{v!r} not in {list(allowed)}")
        return v
    return conv


def _check(conv, pred, msg):
    def wrapped(v):
        out = conv(v)
        if not pred(out):
            raise ValueError(msg)
        return out
    return wrapped


def _opt_bits(v):
    return None if v is None else _check(_int, lambda x: x >= 2, "n_bits must be >= 2")(v)


_pos_int = _check(_int, lambda x: x >= 1, "must be a positive integer")
_pos = _check(_num, lambda x: x > 0, "must be positive")
_frac = _check(_num, lambda x: 0 <= x < 1, "must lie in [0, 1)")

# section -> key -> (target field, converter)
SCHEMA: dict[str, dict[str, tuple[str, Callable]]] = {
    "task": {
        "kind": ("task.kind", _choice(TASK_KINDS)),
        "input_dim": ("task.input_dim", _pos_int),
        "hidden": ("task.hidden", _pos_int),
        "classes": ("task.classes", _check(_int, lambda x: x >= 2, "classes must be >= 2")),
        "per_class": ("task.per_class", _pos_int),
        "validation_size": ("task.validation_size", _pos_int),
        "separation": ("task.separation", _pos),
        "label_noise": ("task.label_noise", _frac),
        "class_skew": ("task.class_skew", _frac),
        "observations_per_agent": ("task.observations_per_agent", _check(_int, lambda x: x >= 0, "must be >= 0")),
        "noise_var": ("task.noise_var", _pos),
        "data_seed": ("task.data_seed", _opt_int),
        "batch_fraction": ("task.batch_fraction", _check(_num, lambda x: 0 < x <= 1, "must lie in (0, 1]")),
    },
    "topology": {
        "kinds": ("topologies", _list(_str, TOPOLOGY_KINDS)),
        "n_agents": ("n_agents", _check(_int, lambda x: x >= 2, "n_agents must be >= 2")),
    },
    "sampler": {
        "algorithms": ("algorithms", _list(_str, ALGORITHMS)),
        "step_size": ("step_size", _pos),
        "rounds": ("rounds", _pos_int),
        "burn_in": ("burn_in", _check(_int, lambda x: x >= 0, "burn_in must be >= 0")),
    },
    "channel": {
        "snr_db": ("snr_db", _list(_num)),
        "power": ("power", _pos),
    },
    "compression": {
        "n_bits": ("n_bits", _opt_bits),
        "unlimited_budget": ("unlimited_budget", _bool),
    },
    "metrics": {
        "bins": ("bins", _pos_int),
    },
    "run": {
        "seeds": ("seeds", _list(_check(_int, lambda x: x >= 0, "seeds must be >= 0"))),
        "init_scale": ("init_scale", _check(_num, lambda x: x >= 0, "must be >= 0")),
        "out_dir": ("out_dir", _str),
        "dump_samples": ("dump_samples", _bool),
    },
}
REQUIRED = (("task", "kind"), ("sampler", "algorithms"))


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate config text, filling defaults for absent or empty keys."""
    section = None
    values: dict[str, Any] = {}
    lines: dict[str, int] = {}
    present: set[tuple[str, str]] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigParseError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigParseError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ConfigParseError("key outside of any section", lineno)
        key, raw_val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigParseError(f"unknown key {key!r} in [{section}]", lineno)
        if (section, key) in present:
            raise ConfigParseError(f"duplicate key {key!r} in [{section}]", lineno)
        present.add((section, key))
        target, conv = SCHEMA[section][key]
        lines[target] = lineno
        if raw_val == "":
            continue
        try:
            values[target] = conv(_parse_value(raw_val))
        except ValueError as exc:
            raise ConfigParseError(f"[{section}] {key}: {exc}", lineno) from None
    for sec, key in REQUIRED:
        target = SCHEMA[sec][key][0]
        if target not in values:
            raise ConfigParseError(f"missing required key {key!r} in [{sec}]", lines.get(target))

    task_kw = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("task.")}
    top_kw = {k: v for k, v in values.items() if not k.startswith("task.")}
    cfg = ExperimentConfig(task=TaskConfig(**task_kw), **top_kw)
    if cfg.burn_in >= cfg.rounds:
        raise ConfigParseError(
            f"burn_in ({cfg.burn_in}) must be smaller than rounds ({cfg.rounds})",
            lines.get("burn_in", lines.get("rounds")),
        )
    if cfg.task.kind == "logistic-regression" and cfg.task.classes != 2:
        cfg = replace(cfg, task=replace(cfg.task, classes=2))
    if cfg.task.kind != "conjugate-gaussian" and cfg.task.validation_size % cfg.task.classes:
        raise ConfigParseError("validation_size must split evenly across classes", lines.get("task.validation_size"))
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# -- cells -------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    algorithm: str
    topology: str
    snr_db: float
    seed: int

    @property
    def name(self) -> str:
        return f"{self.algorithm}_{self.topology}_snr{self.snr_db:g}_seed{self.seed}"


@dataclass
class RunRecord:
    config_hash: str
    report: EvaluationReport
    duration_s: float
    version: str = __version__
    samples: np.ndarray | None = field(default=None, repr=False)


def grid_cells(config: ExperimentConfig) -> list[Cell]:
    return [
        Cell(a, t, float(s), int(seed))
        for a, t, s, seed in product(config.algorithms, config.topologies, config.snr_db, config.seeds)
    ]


def build_task(config: ExperimentConfig, seed: int) -> Task:
    tc = config.task
    data_seed = seed if tc.data_seed is None else tc.data_seed
    return generate_synthetic_task(
        data_seed, tc.kind, tc.input_dim, config.n_agents,
        n_classes=tc.classes, per_class=tc.per_class, hidden=tc.hidden,
        validation_size=tc.validation_size, separation=tc.separation,
        label_noise=tc.label_noise, class_skew=tc.class_skew,
        observations_per_agent=tc.observations_per_agent, noise_var=tc.noise_var,
    )


def _evaluate(task: Task, sample_sets: Sequence[np.ndarray], bins: int, pool: bool = True) -> dict:
    """Pooled and per-agent metrics.

    With ``pool`` the samples of all agents form one ensemble; otherwise
    (point estimates) each agent is scored on its own and the pooled
    figures are the agent averages.
    """
    spec = task.spec
    if spec.is_classifier:
        per_agent = []
        for k, s in enumerate(sample_sets):
            pk = ensemble_predict(s, spec, task.test.inputs)
            per_agent.append({"agent": k, "accuracy": accuracy(pk, task.test.labels), "ece": ece(pk, task.test.labels, bins)})
        if pool:
            p = ensemble_predict(np.concatenate(sample_sets), spec, task.test.inputs)
            pooled = {"accuracy": accuracy(p, task.test.labels), "ece": ece(p, task.test.labels, bins)}
        else:
            pooled = {key: float(np.mean([a[key] for a in per_agent])) for key in ("accuracy", "ece")}
        return {"pooled": pooled, "per_agent": per_agent}
    oracle = exact_posterior(spec, task.agents)
    allx = np.concatenate(sample_sets)
    if allx.shape[0] >= 2 and len(sample_sets[0]) >= 2:
        me, ce = posterior_moment_error(allx, oracle)
    else:
        me = float(np.linalg.norm(allx.mean(axis=0) - oracle.mean) / max(np.linalg.norm(oracle.mean), 1e-300))
        ce = None
    per_agent = []
    for k, s in enumerate(sample_sets):
        if len(s) >= 2:
            mk, ck = posterior_moment_error(s, oracle)
        else:
            mk, ck = float(np.linalg.norm(s.mean(axis=0) - oracle.mean) / max(np.linalg.norm(oracle.mean), 1e-300)), None
        per_agent.append({"agent": k, "mean_err": mk, "cov_err": ck})
    return {"pooled": {"mean_err": me, "cov_err": ce}, "per_agent": per_agent}


def run_cell(config: ExperimentConfig, cell: Cell, config_hash: str | None = None) -> RunRecord:
    """Build the task, run one chain, evaluate it.  Divergence marks the cell failed."""
    started = time.perf_counter()
    config_hash = config_hash or config.digest()
    task = build_task(config, cell.seed)
    spec = task.spec
    m = spec.dim
    sampler = config.sampler(cell.algorithm)
    report = EvaluationReport(cell.algorithm, cell.topology, cell.snr_db, cell.seed)
    init_row = config.init_scale * substream(cell.seed, "init").standard_normal(m)
    samples = None
    try:
        if cell.algorithm == "sgld":
            grad_fn = AgentGradients(spec, [task.pooled], sampler.batch_fraction, cell.seed)
            result = run_chain(grad_fn, init_row[None, :], sampler, cell.seed)
            report.extra["mixing_weight"] = None
        else:
            topo, mixing = mixing_for(cell.topology, config.n_agents)
            params = ChannelParams.from_snr_db(cell.snr_db, m, config.power)
            grad_fn = AgentGradients(spec, task.agents, sampler.batch_fraction, cell.seed)
            init = np.tile(init_row, (config.n_agents, 1))
            result = run_chain(grad_fn, init, sampler, cell.seed, topo, mixing, params)
            report.extra["mixing_weight"] = mixing.scalar_weight
            report.extra["noise_power"] = params.noise_power
        report.extra.update(result.stats)
        if sampler.is_bayesian:
            sets = list(result.samples)
        else:
            sets = [row[None, :] for row in result.final]
        samples = result.samples
        ev = _evaluate(task, sets, config.bins, pool=sampler.is_bayesian)
        for k, v in ev["pooled"].items():
            setattr(report, k, v)
        report.per_agent = ev["per_agent"]
        report.retained_samples = sum(len(s) for s in sets)
    except NumericalDivergenceError as exc:
        report.status = "failed"
        report.extra["error"] = str(exc)
    report.extra["dimension"] = m
    return RunRecord(config_hash, report, time.perf_counter() - started, samples=samples)


def _run_cell_star(args):
    return run_cell(*args)


def results_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for r in records:
        wr.writerow(r.report.csv_row())
    return buf.getvalue()


def write_records(records: Sequence[RunRecord], out_dir: str | Path, dump_samples: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(records))
    for r in records:
        rep = r.report
        cdir = out / "cells" / Cell(rep.algorithm, rep.topology, rep.snr_db, rep.seed).name
        cdir.mkdir(parents=True, exist_ok=True)
        payload = json.loads(rep.to_json())
        payload.update(config_hash=r.config_hash, duration_s=r.duration_s, version=r.version)
        (cdir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        if dump_samples and r.samples is not None:
            for k, s in enumerate(r.samples):
                np.savetxt(cdir / f"samples_agent{k}.csv", s, delimiter=",", fmt="%.17g")
    return out / "results.csv"


def run_grid(
    config: ExperimentConfig,
    threads: int = 1,
    out_dir: str | Path | None = None,
    cells: Sequence[Cell] | None = None,
    progress: Callable[[RunRecord], None] | None = None,
) -> list[RunRecord]:
    """Run every (algorithm, topology, SNR, seed) cell; results come back in grid order.

    Cells are independent, so ``threads > 1`` runs them in worker processes
    without changing any output.
    """
    cells = grid_cells(config) if cells is None else list(cells)
    digest = config.digest()
    jobs = [(config, c, digest) for c in cells]
    records: list[RunRecord] = []
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rec in pool.map(_run_cell_star, jobs):
                records.append(rec)
                if progress:
                    progress(rec)
    else:
        for job in jobs:
            rec = _run_cell_star(job)
            records.append(rec)
            if progress:
                progress(rec)
    if out_dir is not None:
        write_records(records, out_dir, config.dump_samples)
    return records


# -- summaries ---------------------------------------------------------------

SUMMARY_METRICS = ("accuracy", "ece", "mean_err", "cov_err")


def read_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _row_of(r: RunRecord | dict) -> dict:
    if isinstance(r, RunRecord):
        return {c: getattr(r.report, c) for c in CSV_COLUMNS}
    return dict(r)


def _as_float(v) -> float | None:
    if v is None or v == "":
        return None
    return float(v)


def summarize(records: Sequence[RunRecord | dict]) -> list[dict]:
    """Mean and population standard deviation across seeds per (algorithm, topology, SNR).

    Failed cells are skipped; ``n`` counts the cells that contributed.
    """
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        row = _row_of(r)
        if row.get("status", "ok") != "ok":
            continue
        key = (row["algorithm"], row["topology"], float(row["snr_db"]))
        groups.setdefault(key, []).append(row)
    out = []
    for (alg, topo, snr), rows in sorted(groups.items()):
        entry: dict[str, Any] = {"algorithm": alg, "topology": topo, "snr_db": snr, "n": len(rows)}
        for metric in SUMMARY_METRICS:
            vals = [v for v in (_as_float(row.get(metric)) for row in rows) if v is not None]
            entry[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
            entry[f"{metric}_std"] = float(np.std(vals)) if vals else None
        out.append(entry)
    return out


def summary_csv(summary: Sequence[dict]) -> str:
    cols = ["algorithm", "topology", "snr_db", "n"] + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(cols)
    for e in summary:
        wr.writerow(["" if e[c] is None else (repr(e[c]) if isinstance(e[c], float) else e[c]) for c in cols])
    return buf.getvalue()


def failed_count(records: Sequence[RunRecord]) -> int:
    return sum(r.report.status != "ok" for r in records)


def curve(summary: Sequence[dict], algorithm: str, topology: str, metric: str) -> list[tuple[float, float]]:
    """``(snr_db, mean)`` points of one curve, sorted by SNR."""
    pts = [
        (e["snr_db"], e[f"{metric}_mean"])
        for e in summary
        if e["algorithm"] == algorithm and e["topology"] == topology and e[f"{metric}_mean"] is not None
    ]
    return sorted(pts)


def is_finite_report(rep: EvaluationReport) -> bool:
    vals = [rep.accuracy, rep.ece, rep.mean_err, rep.cov_err]
    return all(v is None or math.isfinite(v) for v in vals)
