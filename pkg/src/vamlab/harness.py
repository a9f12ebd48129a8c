"""Garnet sweep orchestration, aggregation and report emission.

A sweep is the product ``rho x k x algorithm x seed``.  Each cell is an
independent job.  Rows are appended to the CSV as jobs finish, and the file
is rewritten in canonical order once the sweep completes, so the result does
not depend on worker count or completion order.  A rerun skips every cell
that already has a row.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import biaslab
from .errors import ConfigurationError
from .mdp import GarnetSpec, exact_value, generate_garnet, sample_transitions
from .models import LowRankModel
from .valuelearn import ALGORITHMS, TrainSchedule, value_error

log = logging.getLogger(__name__)

CSV_VERSION = "vamlab.results/1"
CSV_HEADER_COMMENT = f"# {CSV_VERSION}"
COLUMNS = ("rho", "k", "algorithm", "seed", "mae", "rmse", "max_error", "diverged", "status",
           "wall_time")
DEFAULT_RANKS = tuple(range(1, 11)) + (50,)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    rhos: tuple = (0.5, 0.75, 1.0)
    ranks: tuple = DEFAULT_RANKS
    algorithms: tuple = ("itervaml", "mle", "muzero_joint", "muzero_td")
    seeds: int = 16
    base_seed: int = 0
    samples: int = 100_000
    n_states: int = 50
    branching: int = 10
    discount: float = 0.99
    psi_init_scale: float = 0.01
    schedule: TrainSchedule = TrainSchedule()
    out: str = "results"
    workers: int = 1

    def __post_init__(self):
        for name in ("rhos", "ranks", "algorithms"):
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(f"{name} must be nonempty")
        if self.seeds < 1:
            raise ConfigurationError("seeds must be >= 1")
        if self.samples < 1 or self.workers < 1:
            raise ConfigurationError("samples and workers must be >= 1")
        if self.psi_init_scale < 0:
            raise ConfigurationError("psi_init_scale must be >= 0")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ConfigurationError(f"unknown algorithms {sorted(unknown)}; "
                                     f"choose from {sorted(ALGORITHMS)}")
        for k in self.ranks:
            if not 1 <= k <= self.n_states:
                raise ConfigurationError(f"rank {k} outside 1..{self.n_states}")
        for rho in self.rhos:
            GarnetSpec(self.n_states, self.branching, rho, discount=self.discount)

    def garnet_spec(self, rho: float, seed: int) -> GarnetSpec:
        return GarnetSpec(self.n_states, self.branching, rho, discount=self.discount, seed=seed)

    def jobs(self) -> list[Job]:
        # grouped by problem so the per-(rho, seed) cache is reused
        seeds = range(self.base_seed, self.base_seed + self.seeds)
        return [Job(float(rho), int(k), alg, int(s))
                for rho in self.rhos for s in seeds for k in self.ranks for alg in self.algorithms]


def parse_list(text: str, kind=float) -> tuple:
    """``"1-3,50"`` -> ``(1, 2, 3, 50)`` for ints; comma list otherwise."""
    out = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if kind is int and "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(kind(part))
    if not out:
        raise ConfigurationError(f"empty list {text!r}")
    return tuple(out)


_SCALAR_KEYS = {"seeds": int, "base_seed": int, "samples": int, "n_states": int,
                "branching": int, "discount": float, "psi_init_scale": float, "out": str,
                "workers": int}
_SCHEDULE_KEYS = {f.name: f.type for f in fields(TrainSchedule)}


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    top, sched = {}, {}
    for raw_key, value in values.items():
        if value is None:
            continue
        key = raw_key.replace("-", "_").lower()
        if key in ("rho", "rhos"):
            top["rhos"] = value if isinstance(value, tuple) else parse_list(value, float)
        elif key in ("ranks", "k"):
            top["ranks"] = value if isinstance(value, tuple) else parse_list(value, int)
        elif key == "algorithms":
            top["algorithms"] = value if isinstance(value, tuple) else parse_list(value, str)
        elif key in _SCALAR_KEYS:
            top[key] = _SCALAR_KEYS[key](value)
        elif key in _SCHEDULE_KEYS:
            sched[key] = float(value) if _SCHEDULE_KEYS[key] == "float" else int(value)
        else:
            raise ConfigurationError(f"unknown config key {raw_key!r}")
    if sched:
        top["schedule"] = base.schedule.updated(**sched)
    return replace(base, **top)


def read_config_file(path) -> dict:
    """Raw ``key = value`` pairs; ``#`` starts a comment."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string("[sweep]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return dict(parser["sweep"])


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Config file merged with ``overrides`` (non-None entries win), validated once."""
    values = read_config_file(path)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_mapping(values)


# ---------------------------------------------------------------------------
# jobs and rows


@dataclass(frozen=True, order=True)
class Job:
    rho: float
    k: int
    algorithm: str
    seed: int

    @property
    def key(self) -> tuple:
        return (self.rho, self.k, self.algorithm, self.seed)


@dataclass(frozen=True)
class ResultRow:
    rho: float
    k: int
    algorithm: str
    seed: int
    mae: float
    rmse: float
    max_error: float
    diverged: bool
    status: str = "ok"          # ok | diverged | failed
    wall_time: float = field(default=0.0, compare=False)
    message: str = field(default="", compare=False)
    losses: tuple = field(default=(), compare=False)

    @property
    def key(self) -> tuple:
        return (self.rho, self.k, self.algorithm, self.seed)

    def csv_fields(self) -> list[str]:
        return [_fmt(self.rho), str(self.k), self.algorithm, str(self.seed), _fmt(self.mae),
                _fmt(self.rmse), _fmt(self.max_error), str(int(self.diverged)), self.status,
                f"{self.wall_time:.3f}"]

    @classmethod
    def from_csv(cls, rec: dict) -> ResultRow:
        return cls(float(rec["rho"]), int(rec["k"]), rec["algorithm"], int(rec["seed"]),
                   float(rec["mae"]), float(rec["rmse"]), float(rec["max_error"]),
                   rec["diverged"] == "1", rec["status"], float(rec["wall_time"]))

    def to_json(self) -> dict:
        d = asdict(self)
        d["losses"] = [list(p) for p in self.losses]
        return d


def _fmt(x: float) -> str:
    return repr(float(x))


@lru_cache(maxsize=16)
def _problem(spec: GarnetSpec, samples: int):
    mrp = generate_garnet(spec)
    return mrp, sample_transitions(mrp, samples, spec.seed), exact_value(mrp)


def run_job(job: Job, config: ExperimentConfig) -> ResultRow:
    """One training run; exceptions become a ``failed`` row."""
    start = time.perf_counter()
    try:
        mrp, data, V_star = _problem(config.garnet_spec(job.rho, job.seed), config.samples)
        model = LowRankModel.random(mrp.n_states, job.k, seed=job.seed,
                                    init_scale=config.psi_init_scale)
        result = ALGORITHMS[job.algorithm](data, mrp.reward, mrp.discount, model,
                                           schedule=config.schedule)
        err = value_error(result.values, V_star)
        status = "diverged" if result.diverged else "ok"
        return ResultRow(job.rho, job.k, job.algorithm, job.seed, err.mae, err.rmse, err.max,
                         result.diverged, status, time.perf_counter() - start, result.message,
                         tuple(result.losses))
    except Exception as exc:  # a crashed cell must not take the sweep down
        log.exception("job %s failed", job)
        nan = math.nan
        return ResultRow(job.rho, job.k, job.algorithm, job.seed, nan, nan, nan, True, "failed",
                         time.perf_counter() - start, f"{type(exc).__name__}: {exc}")


def _run_job_star(args):
    return run_job(*args)


# ---------------------------------------------------------------------------
# CSV I/O


def read_rows(path) -> list[ResultRow]:
    path = Path(path)
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    if lines and lines[0].startswith("#"):
        if lines[0].strip() != CSV_HEADER_COMMENT:
            raise ConfigurationError(f"{path}: unsupported results version {lines[0]!r}")
        lines = lines[1:]
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    if reader.fieldnames is not None and tuple(reader.fieldnames) != COLUMNS:
        raise ConfigurationError(f"{path}: unexpected columns {reader.fieldnames}")
    return [ResultRow.from_csv(rec) for rec in reader]


def _csv_text(rows) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER_COMMENT + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow(row.csv_fields())
    return buf.getvalue()


def write_rows(path, rows) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(_csv_text(sorted(rows, key=lambda r: r.key)))
    os.replace(tmp, path)


class _Appender:
    """Single writer for incremental rows."""

    def __init__(self, path: Path):
        new = not path.exists() or path.stat().st_size == 0
        self.fh = path.open("a", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        if new:
            self.fh.write(CSV_HEADER_COMMENT + "\n")
            self.writer.writerow(COLUMNS)
            self.fh.flush()

    def write(self, row: ResultRow) -> None:
        self.writer.writerow(row.csv_fields())
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepOutcome:
    rows: list[ResultRow]
    summary: Summary
    ran: int
    skipped: int

    @property
    def failed(self) -> list[ResultRow]:
        return [r for r in self.rows if r.status == "failed"]


def run_sweep(config: ExperimentConfig, progress=None) -> SweepOutcome:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "results.csv"
    existing = {r.key: r for r in read_rows(csv_path) if r.status != "failed"}
    wanted = config.jobs()
    todo = [j for j in wanted if j.key not in existing]
    if len(existing) and todo:
        # drop stale failed rows before resuming
        write_rows(csv_path, existing.values())
    log.info("sweep: %d jobs, %d already done", len(wanted), len(wanted) - len(todo))
    fresh: dict[tuple, ResultRow] = {}
    appender = _Appender(csv_path)
    try:
        if config.workers == 1:
            for job in todo:
                row = run_job(job, config)
                fresh[row.key] = row
                appender.write(row)
                if progress:
                    progress(len(fresh), len(todo), row)
        else:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                futures = [pool.submit(_run_job_star, (job, config)) for job in todo]
                for fut in as_completed(futures):
                    row = fut.result()
                    fresh[row.key] = row
                    appender.write(row)
                    if progress:
                        progress(len(fresh), len(todo), row)
    finally:
        appender.close()
    merged = dict(existing)
    merged.update(fresh)
    rows = sorted((merged[j.key] for j in wanted if j.key in merged), key=lambda r: r.key)
    extra = [r for k, r in merged.items() if k not in {j.key for j in wanted}]
    write_rows(csv_path, rows + extra)
    _write_json(out / "results.json", rows, fresh)
    summary = summarize_rows(rows)
    summary.write(out)
    return SweepOutcome(rows, summary, len(todo), len(wanted) - len(todo))


def _write_json(path: Path, rows, fresh) -> None:
    payload = {"format": CSV_VERSION, "columns": list(COLUMNS),
               "rows": [(fresh.get(r.key) or r).to_json() for r in rows]}
    path.write_text(json.dumps(payload, indent=1, allow_nan=True))


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class CellStats:
    rho: float
    k: int
    algorithm: str
    n: int
    mean: float
    std: float
    stderr: float
    n_diverged: int
    is_min: bool = False


@dataclass
class Summary:
    cells: dict                 # (rho, k, alg) -> CellStats
    algorithms: tuple
    wins: dict                  # (rho, k) -> {alg: seeds won}

    def cell(self, rho, k, alg) -> CellStats:
        return self.cells[(float(rho), int(k), alg)]

    def groups(self) -> list[tuple]:
        return sorted({(rho, k) for rho, k, _ in self.cells})

    def winner(self, rho, k) -> str:
        return min((a for a in self.algorithms if (rho, k, a) in self.cells),
                   key=lambda a: self.cells[(rho, k, a)].mean)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rho", "k", "algorithm", "n", "mean", "std", "stderr", "n_diverged", "is_min"])
        for key in sorted(self.cells):
            c = self.cells[key]
            w.writerow([_fmt(c.rho), c.k, c.algorithm, c.n, _fmt(c.mean), _fmt(c.std),
                        _fmt(c.stderr), c.n_diverged, int(c.is_min)])
        return buf.getvalue()

    def to_markdown(self) -> str:
        algs = self.algorithms
        lines = ["# Value error (MAE), mean ± standard error", "",
                 "Minimum value highlighted in bold. Standard deviations are in summary.csv.", "",
                 "| rho | k | " + " | ".join(algs) + " |",
                 "|---|---|" + "---|" * len(algs)]
        for rho, k in self.groups():
            cells = []
            for a in algs:
                c = self.cells.get((rho, k, a))
                if c is None:
                    cells.append("")
                    continue
                text = f"{c.mean:.4g} ± {c.stderr:.2g}"
                if c.n_diverged:
                    text += f" ({c.n_diverged} div)"
                cells.append(f"**{text}**" if c.is_min else text)
            lines.append(f"| {rho:g} | {k} | " + " | ".join(cells) + " |")
        lines += ["", "## Ordering comparison", "",
                  "Per (rho, k): the algorithm with the lowest mean and how many seeds it wins outright.",
                  ""]
        for rho, k in self.groups():
            best = self.winner(rho, k)
            wins = self.wins.get((rho, k), {})
            total = sum(wins.values())
            detail = ", ".join(f"{a} {wins.get(a, 0)}" for a in algs if (rho, k, a) in self.cells)
            lines.append(f"- rho={rho:g}, k={k}: {best} wins {wins.get(best, 0)}/{total} seeds "
                         f"({detail})")
        diverged = [c for c in self.cells.values() if c.n_diverged]
        if diverged:
            lines += ["", "## Diverged or failed runs", "",
                      "These are included in the means above.", ""]
            for c in sorted(diverged, key=lambda c: (c.rho, c.k, c.algorithm)):
                lines.append(f"- rho={c.rho:g}, k={c.k}, {c.algorithm}: {c.n_diverged}/{c.n}")
        return "\n".join(lines) + "\n"

    def write(self, out) -> None:
        out = Path(out)
        (out / "summary.md").write_text(self.to_markdown())
        (out / "summary.csv").write_text(self.to_csv())


def summarize_rows(rows) -> Summary:
    rows = list(rows)
    if not rows:
        raise ConfigurationError("no result rows to summarize")
    algorithms = tuple(a for a in ALGORITHMS if any(r.algorithm == a for r in rows))
    algorithms += tuple(sorted({r.algorithm for r in rows} - set(algorithms)))
    by_cell: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        by_cell.setdefault((r.rho, r.k, r.algorithm), []).append(r)
    cells = {}
    for key, group in by_cell.items():
        x = np.array([r.mae for r in group], dtype=np.float64)
        n = x.size
        mean = float(x.sum() / n)
        std = float(np.sqrt(((x - mean) ** 2).sum() / (n - 1))) if n > 1 else 0.0
        cells[key] = CellStats(*key, n, mean, std, std / math.sqrt(n),
                               sum(r.status != "ok" for r in group))
    wins: dict[tuple, dict] = {}
    per_seed: dict[tuple, dict] = {}
    for r in rows:
        per_seed.setdefault((r.rho, r.k, r.seed), {})[r.algorithm] = r.mae
    for (rho, k, _), errs in per_seed.items():
        finite = {a: e for a, e in errs.items() if not math.isnan(e)}
        if len(finite) < 2:
            continue
        best = min(finite.values())
        leaders = [a for a, e in finite.items() if e == best]
        counts = wins.setdefault((rho, k), {})
        if len(leaders) == 1:
            counts[leaders[0]] = counts.get(leaders[0], 0) + 1
    summary = Summary(cells, algorithms, wins)
    for rho, k in summary.groups():
        key = (rho, k, summary.winner(rho, k))
        summary.cells[key] = replace(summary.cells[key], is_min=True)
    return summary


def summarize(path, out=None) -> Summary:
    path = Path(path)
    if path.is_dir():
        path = path / "results.csv"
    if not path.exists():
        raise ConfigurationError(f"{path} does not exist")
    summary = summarize_rows(read_rows(path))
    summary.write(out if out is not None else path.parent)
    return summary


# ---------------------------------------------------------------------------
# theory checks


def verify_theory(out=None, inject_fault: bool = False, seed: int = 0) -> biaslab.VerificationReport:
    report = biaslab.verification_report(seed=seed, inject_fault=inject_fault)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        payload = report.to_dict()
        payload["inject_fault"] = bool(inject_fault)
        (out / "verify.json").write_text(json.dumps(payload, indent=1))
    return report
