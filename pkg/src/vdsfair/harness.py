"""Trace-driven epoch simulation.

A trace lists, per 5-minute epoch, each job's summed resource usage.  At
the start of an epoch a job's usage d becomes its per-task demand
d / max(d) and adds 300 * max(d) quanta of work.  The cluster is
reallocated at every epoch start and whenever a job finishes its work
mid-epoch; between those instants task rates are constant, so finish
times are computed exactly.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .baselines import BaselineError, run_baseline
from .fairness import deviation_summary
from .model import Allocation, ClusterError, ServerSpec, UserSpec, build_cluster, fmt, usage
from .psmfa import SolverConfig, solve_psmfa
from .utility import UtilityParams

logger = logging.getLogger(__name__)

EPOCH_SECONDS = 300.0


class TraceError(ValueError):
    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        super().__init__("; ".join(f"line {ln}: {msg}" for ln, msg in problems[:10]))


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    user: str
    usage: tuple[float, ...]


@dataclass
class JobState:
    user: str
    demand: np.ndarray
    normalized: np.ndarray
    quanta: float
    arrival_epoch: int
    required: float = 0.0
    completion: float | None = None


# ---------------------------------------------------------------------------
# trace I/O


def parse_trace(stream: TextIO | str | Iterable[str], n_resources: int | None = None) -> list[TraceRecord]:
    """Read epoch,user,r1..rM rows; rows sharing (epoch, user) are summed.

    Raises TraceError listing every malformed row by line number."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    problems: list[tuple[int, str]] = []
    sums: dict[tuple[int, str], np.ndarray] = {}
    header = next(reader, None)
    if header is None:
        raise TraceError([(1, "empty trace")])
    header = [h.strip() for h in header]
    if len(header) < 3 or header[0] != "epoch" or header[1] != "user":
        raise TraceError([(1, "header must be epoch,user,<resource columns>")])
    width = len(header) - 2
    if n_resources is not None and width != n_resources:
        raise TraceError([(1, f"trace has {width} resource columns, cluster has {n_resources}")])
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width + 2:
            problems.append((line, f"expected {width + 2} fields, got {len(row)}"))
            continue
        try:
            epoch = int(row[0])
            vals = np.array([float(v) for v in row[2:]])
        except ValueError as exc:
            problems.append((line, f"unparsable value ({exc})"))
            continue
        user = row[1].strip()
        if epoch < 0 or not user:
            problems.append((line, "epoch must be >= 0 and user non-empty"))
            continue
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            problems.append((line, "usage must be finite and >= 0"))
            continue
        key = (epoch, user)
        sums[key] = sums.get(key, 0.0) + vals
    if problems:
        raise TraceError(problems)
    return [TraceRecord(e, u, tuple(v.tolist())) for (e, u), v in sorted(sums.items())]


def write_trace(records: Sequence[TraceRecord], resources: Sequence[str]) -> str:
    out = io.StringIO()
    out.write(",".join(["epoch", "user", *resources]) + "\n")
    for r in records:
        out.write(",".join([str(r.epoch), r.user, *(fmt(v) for v in r.usage)]) + "\n")
    return out.getvalue()


def build_epoch_jobs(records: Sequence[TraceRecord], epoch: int) -> list[JobState]:
    """Jobs active in this epoch; quanta = 300 * max_r d_r."""
    jobs = []
    for r in records:
        if r.epoch != epoch:
            continue
        d = np.asarray(r.usage, dtype=float)
        top = d.max(initial=0.0)
        if not top > 0:
            logger.info("epoch %d: job %s has all-zero demand, skipped", epoch, r.user)
            continue
        jobs.append(JobState(r.user, d, d / top, EPOCH_SECONDS * top, epoch, EPOCH_SECONDS * top))
    return jobs


# ---------------------------------------------------------------------------
# synthetic workload


@dataclass
class SyntheticConfig:
    n_users: int = 40
    n_epochs: int = 12
    # expected new jobs per epoch
    arrival_rate: float = 4.0
    # per-epoch quanta drawn log-uniformly from this range
    quanta_range: tuple[float, float] = (0.1, 1e6)
    # mean extra epochs a job stays (geometric)
    mean_extra_epochs: float = 0.6
    # per-resource demand proportions drawn uniformly from this range before scaling
    demand_spread: tuple[float, float] = (0.05, 1.0)
    n_resources: int = 2

    def __post_init__(self):
        lo, hi = self.quanta_range
        if not 0 < lo < hi:
            raise ValueError("quanta_range must satisfy 0 < lo < hi")
        if self.n_users < 1 or self.n_epochs < 1 or self.n_resources < 1:
            raise ValueError("n_users, n_epochs and n_resources must be >= 1")
        if not self.arrival_rate > 0 or self.mean_extra_epochs < 0:
            raise ValueError("arrival_rate must be positive and mean_extra_epochs >= 0")


def generate_synthetic_trace(config: SyntheticConfig | None = None, seed: int = 0) -> list[TraceRecord]:
    """Heavy-tailed workload: Poisson arrivals, geometric lifetimes, per-epoch
    work log-uniform over quanta_range.  Deterministic for a seed."""
    config = config or SyntheticConfig()
    rng = np.random.default_rng(seed)
    lo, hi = config.quanta_range
    records = []
    job = 0
    stay = 1.0 / (1.0 + config.mean_extra_epochs)
    for epoch in range(config.n_epochs):
        for _ in range(int(rng.poisson(config.arrival_rate))):
            if job >= config.n_users:
                break
            uid = f"j{job + 1}"
            job += 1
            shape = rng.uniform(*config.demand_spread, size=config.n_resources)
            shape /= shape.max()
            life = int(rng.geometric(stay))
            for e in range(epoch, min(epoch + life, config.n_epochs)):
                q = math.exp(rng.uniform(math.log(lo), math.log(hi)))
                records.append(TraceRecord(e, uid, tuple((shape * q / EPOCH_SECONDS).tolist())))
    records.sort(key=lambda r: (r.epoch, r.user))
    return records


def random_placement(users: Iterable[str], servers: Sequence[str], seed: int = 0, p: float = 0.7) -> dict[str, frozenset]:
    """Each job may use a random nonempty subset of servers."""
    rng = np.random.default_rng(seed)
    out = {}
    for u in sorted(set(users)):
        pick = [s for s in servers if rng.random() < p]
        out[u] = frozenset(pick or [servers[int(rng.integers(len(servers)))]])
    return out


def cdf(values) -> list[tuple[float, float]]:
    v = np.sort(np.asarray(list(values), dtype=float))
    if v.size == 0:
        raise ValueError("cdf of an empty sample")
    uniq, last = np.unique(v, return_index=False, return_counts=True)
    frac = np.cumsum(last) / v.size
    return list(zip(uniq.tolist(), frac.tolist()))


# ---------------------------------------------------------------------------
# mechanisms


@dataclass(frozen=True)
class Mechanism:
    name: str  # apf | psdsf | drfh | tsf | uniform
    alpha: float = 1.0

    @classmethod
    def parse(cls, text: str, alpha: float | None = None) -> "Mechanism":
        """'apf' (with alpha), 'apf:3', 'apf:inf', or a baseline name."""
        name, _, rest = text.partition(":")
        name = name.strip().lower()
        if name == "apf":
            a = float(rest) if rest else (1.0 if alpha is None else float(alpha))
            if math.isinf(a):
                return cls("psdsf")
            if not a > 0:
                raise ValueError("alpha must be positive")
            return cls("apf", a)
        if name in ("psdsf", "drfh", "tsf", "uniform") and not rest:
            return cls(name)
        raise ValueError(f"unknown mechanism {text!r}")

    @property
    def label(self) -> str:
        return f"apf:{self.alpha:g}" if self.name == "apf" else self.name


def allocate(cluster, mechanism: Mechanism, params: UtilityParams | None = None, config: SolverConfig | None = None):
    """Returns (Allocation, ok)."""
    if mechanism.name == "apf":
        p = params or UtilityParams.alpha_fair(cluster, mechanism.alpha)
        res = solve_psmfa(cluster, p, config)
        return res.allocation, res.converged
    return run_baseline(cluster, mechanism.name), True


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SimConfig:
    resources: tuple[str, ...] = ("cpu", "ram")
    solver: SolverConfig | None = None
    # cap on reallocations inside one epoch (completions are batched beyond it)
    max_events_per_epoch: int = 10_000


@dataclass
class SimReport:
    mechanism: str
    servers: list[str]
    resources: list[str]
    utilization: list[list[list[float]]] = field(default_factory=list)  # epoch x server x resource
    avg_deviation: list[float] = field(default_factory=list)
    max_deviation: list[float] = field(default_factory=list)
    delays: list[float] = field(default_factory=list)
    completion_times: list[float] = field(default_factory=list)
    required_quanta: list[float] = field(default_factory=list)
    flagged_epochs: list[int] = field(default_factory=list)
    reallocations: int = 0

    @property
    def mean_utilization(self) -> float:
        u = np.asarray(self.utilization, dtype=float)
        return float(np.nanmean(u)) if u.size else math.nan

    @property
    def mean_deviation(self) -> float:
        d = np.asarray(self.avg_deviation, dtype=float)
        return float(np.nanmean(d)) if d.size and not np.all(np.isnan(d)) else math.nan

    def delay_stats(self) -> dict:
        d = np.asarray(self.delays, dtype=float)
        if d.size == 0:
            return {"count": 0, "mean": math.nan, "std": math.nan}
        return {"count": int(d.size), "mean": float(d.mean()), "std": float(d.std())}

    def summary(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "mean_utilization": self.mean_utilization,
            "mean_deviation": self.mean_deviation,
            "max_deviation": float(np.nanmax(self.max_deviation)) if self.max_deviation and not np.all(np.isnan(self.max_deviation)) else math.nan,
            "short_job_delay": self.delay_stats(),
            "completed_jobs": len(self.completion_times),
            "reallocations": self.reallocations,
            "flagged_epochs": self.flagged_epochs,
        }

    def csv_bundle(self) -> dict[str, str]:
        files = {}
        rows = ["epoch,server,resource,utilization"]
        for e, per in enumerate(self.utilization):
            for s, vals in zip(self.servers, per):
                for r, v in zip(self.resources, vals):
                    rows.append(f"{e},{s},{r},{fmt(v)}")
        files["utilization.csv"] = "\n".join(rows) + "\n"
        rows = ["epoch,average,max"]
        rows += [f"{e},{fmt(a)},{fmt(m)}" for e, (a, m) in enumerate(zip(self.avg_deviation, self.max_deviation))]
        files["deviation.csv"] = "\n".join(rows) + "\n"
        st = self.delay_stats()
        files["delay.csv"] = f"count,mean,std\n{st['count']},{fmt(st['mean'])},{fmt(st['std'])}\n"
        for name, vals in (("completion", self.completion_times), ("quanta", self.required_quanta)):
            rows = ["value,fraction"]
            if vals:
                rows += [f"{fmt(v)},{fmt(f)}" for v, f in cdf(vals)]
            files[f"cdf_{name}.csv"] = "\n".join(rows) + "\n"
        return files

    def write(self, outdir: str | Path, manifest: dict | None = None) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for name, text in self.csv_bundle().items():
            (outdir / name).write_text(text)
        doc = {"summary": self.summary()}
        if manifest is not None:
            doc["manifest"] = manifest
        (outdir / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))


def _epoch_cluster(servers: Sequence[ServerSpec], resources, jobs: list[JobState], placement):
    users = [UserSpec(j.user, tuple(j.normalized), placement.get(j.user, frozenset(s.id for s in servers))) for j in jobs]
    return build_cluster(list(servers), users, resources)


def run_simulation(
    servers: Sequence[ServerSpec],
    records: Sequence[TraceRecord],
    mechanism: Mechanism,
    params: UtilityParams | None = None,
    config: SimConfig | None = None,
    placement: dict[str, frozenset] | None = None,
) -> SimReport:
    config = config or SimConfig()
    placement = dict(placement or {})
    resources = tuple(config.resources)
    if any(len(r.usage) != len(resources) for r in records):
        raise TraceError([(0, f"records must have {len(resources)} usage entries")])
    cap = np.array([s.capacities for s in servers], dtype=float)
    report = SimReport(mechanism.label, [s.id for s in servers], list(resources))
    n_epochs = max((r.epoch for r in records), default=-1) + 1
    backlog: dict[str, JobState] = {}
    first_seen: dict[str, float] = {}
    prev: dict[str, np.ndarray] = {}

    for epoch in range(n_epochs):
        t0 = epoch * EPOCH_SECONDS
        for job in build_epoch_jobs(records, epoch):
            if job.user in backlog:
                old = backlog[job.user]
                old.demand, old.normalized = job.demand, job.normalized
                old.quanta += job.quanta
                old.required += job.quanta
            else:
                backlog[job.user] = job
                first_seen.setdefault(job.user, t0)
        util_acc = np.zeros(cap.shape)
        dev_avg_acc = dev_max_acc = 0.0
        busy = 0.0
        clock = 0.0
        events = 0
        flagged = False
        while clock < EPOCH_SECONDS - 1e-9:
            active = [j for j in backlog.values() if j.quanta > 1e-12]
            if not active:
                break
            for j in active:
                if j.user not in placement:
                    placement[j.user] = frozenset(s.id for s in servers)
            try:
                cluster = _epoch_cluster(servers, resources, active, placement)
            except ClusterError as exc:
                raise TraceError([(0, f"epoch {epoch}: {exc}")]) from exc
            try:
                alloc, ok = allocate(cluster, mechanism, _params_for(params, cluster), config.solver)
                if not ok:
                    raise BaselineError("solver did not converge")
                x = alloc.tasks
            except (BaselineError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
                logger.warning("epoch %d: allocation failed (%s); keeping previous", epoch, exc)
                flagged = True
                x = np.array([prev.get(j.user, np.zeros(len(servers))) for j in active])
                alloc = Allocation(x)
            report.reallocations += 1
            rates = x.sum(axis=1)
            for j, row in zip(active, x):
                prev[j.user] = row
            with np.errstate(divide="ignore"):
                finish = np.where(rates > 0, np.array([j.quanta for j in active]) / np.where(rates > 0, rates, 1.0), np.inf)
            step = min(float(finish.min()), EPOCH_SECONDS - clock)
            if events >= config.max_events_per_epoch:
                step = EPOCH_SECONDS - clock
            used = usage(cluster, x)
            with np.errstate(divide="ignore", invalid="ignore"):
                util_acc += step * np.where(cap > 0, used / cap, 0.0)
            dev = deviation_summary(cluster, alloc)
            if not math.isnan(dev["average"]):
                dev_avg_acc += step * dev["average"]
                dev_max_acc += step * dev["max"]
                busy += step
            for j, r, f in zip(active, rates, finish):
                if f <= step * (1 + 1e-12):
                    j.quanta = 0.0
                    j.completion = t0 + clock + f
                    report.completion_times.append(j.completion - first_seen[j.user])
                    report.required_quanta.append(j.required)
                    if j.required < 1.0:
                        report.delays.append(1.0 / r)
                else:
                    j.quanta -= r * step
            clock += step
            events += 1
        report.utilization.append((util_acc / EPOCH_SECONDS).tolist())
        report.avg_deviation.append(dev_avg_acc / busy if busy > 0 else math.nan)
        report.max_deviation.append(dev_max_acc / busy if busy > 0 else math.nan)
        if flagged:
            report.flagged_epochs.append(epoch)
        backlog = {u: j for u, j in backlog.items() if j.quanta > 1e-12}
    return report


def _params_for(params: UtilityParams | None, cluster):
    if params is None:
        return None
    if len(params) == cluster.n_servers:
        return params
    raise ValueError("params must have one entry per server")


def two_class_servers(n_per_class: int = 2) -> list[ServerSpec]:
    """CPU-heavy and RAM-heavy servers in equal numbers."""
    out = []
    for k in range(n_per_class):
        out.append(ServerSpec(f"A{k + 1}", (16.0, 4.0)))
    for k in range(n_per_class):
        out.append(ServerSpec(f"B{k + 1}", (4.0, 16.0)))
    return out
