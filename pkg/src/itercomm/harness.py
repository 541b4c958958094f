"""Experiment runner: configuration, wiring of all layers, reports and the CLI."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .comm import ASYNC, OVERLAP, SCHEMES, Communicator
from .convergence import NormSpec
from .errors import (ConfigurationError, IterCommError, NonConvergenceError,
                     ProtocolDeadlockError, UsageError)
from .solver import (CRITERIA, LocalBlock, ProblemSpec, apply_stencil, discretize,
                     time_step_loop)
from .topology import build_partition, partition_to_graph
from .transport.sim import DelayModel, SimNetwork

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "scheme", "p", "n", "time_s", "residual", "iterations", "snapshots")
BACKENDS = ("sim", "socket")
FORMATS = ("csv", "json")
EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    """Every knob of one experiment. Time quantities are in (simulated) seconds."""

    p: int = 4
    n: int = 10
    scheme: str = OVERLAP
    q: float = 0.5
    threshold: float = 1e-6
    max_recv_requests: int = 2
    time_steps: int = 5
    dt: float = 0.01
    nu: float = 0.5
    a: tuple = (0.1, -0.2, 0.3)
    source: float = 1.0
    criterion: str = "residual"
    seed: int = 0
    latency: float = 5e-6
    jitter: float = 2e-6
    node_cost: float = 1e-7
    slow_rank: Optional[int] = None
    slow_factor: float = 10.0
    slowdown_max: float = 1.0
    max_iterations: int = 100_000
    backend: str = "sim"
    output: Optional[str] = None
    format: str = "csv"

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(key, why):
            raise ConfigurationError(f"{key}: {why}")

        if self.p < 1:
            bad("p", "need at least one process")
        if self.n < 2:
            bad("n", "need at least 2 interior points per axis")
        if self.p > self.n ** 3:
            bad("p", f"{self.p} processes exceed the {self.n ** 3} grid points")
        if self.scheme not in SCHEMES:
            bad("scheme", f"expected one of {', '.join(SCHEMES)}")
        if not math.isfinite(self.q):
            bad("q", "must be finite")
        if not (self.threshold > 0 and math.isfinite(self.threshold)):
            bad("threshold", "must be a positive number")
        if self.max_recv_requests < 1:
            bad("max_recv_requests", "at least one receive request per link is required")
        if self.time_steps < 0:
            bad("time_steps", "must be non-negative")
        if not self.dt > 0:
            bad("dt", "must be positive")
        if not self.nu > 0:
            bad("nu", "must be positive")
        if len(self.a) != 3:
            bad("a", "needs three components")
        if self.criterion not in CRITERIA:
            bad("criterion", f"expected one of {', '.join(CRITERIA)}")
        for key in ("latency", "jitter", "node_cost"):
            if getattr(self, key) < 0:
                bad(key, "must be non-negative")
        if self.slow_rank is not None and not 0 <= self.slow_rank < self.p:
            bad("slow_rank", f"must be a rank in 0..{self.p - 1}")
        if not self.slow_factor > 0:
            bad("slow_factor", "must be positive")
        if self.slowdown_max < 1:
            bad("slowdown_max", "must be >= 1")
        if self.max_iterations < 1:
            bad("max_iterations", "must be positive")
        if self.backend not in BACKENDS:
            bad("backend", f"expected one of {', '.join(BACKENDS)}")
        if self.format not in FORMATS:
            bad("format", f"expected one of {', '.join(FORMATS)}")

    def problem(self):
        return ProblemSpec(nu=self.nu, a=tuple(self.a), dt=self.dt, n=self.n,
                           time_steps=self.time_steps, source=self.source)

    def slowdowns(self):
        """Per-rank compute slowdown factors, drawn from the seed when requested."""
        factors = {}
        if self.slowdown_max > 1:
            rng = np.random.default_rng([self.seed, 1])
            factors = {r: float(f) for r, f in
                       enumerate(rng.uniform(1.0, self.slowdown_max, self.p))}
        if self.slow_rank is not None:
            factors[self.slow_rank] = self.slow_factor
        return factors

    def delay_model(self):
        return DelayModel(latency=self.latency, jitter=self.jitter,
                          slowdown=self.slowdowns(), seed=self.seed)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["a"] = list(self.a)
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key, raw):
    default = _FIELDS[key].default
    if isinstance(raw, str):
        raw = raw.strip()
        if key == "a":
            parts = [x for x in raw.replace(",", " ").split() if x]
            try:
                return tuple(float(x) for x in parts)
            except ValueError:
                raise ConfigurationError(f"a: expected three numbers, got {raw!r}") from None
        if raw.lower() in ("", "none") and default is None:
            return None
        if key == "q" and raw.lower() in ("inf", "max"):
            return 0.5
    try:
        if key == "a":
            return tuple(float(x) for x in raw)
        if key == "slow_rank":
            return None if raw is None else int(raw)
        if key in ("output",):
            return None if raw is None else str(raw)
        if isinstance(default, bool):
            return bool(raw)
        if isinstance(default, int):
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: cannot interpret {raw!r}") from None


def config_from_mapping(mapping):
    """Validated ``RunConfig`` from a key/value mapping (missing keys take defaults)."""
    values = {}
    for key, raw in mapping.items():
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(**values)


def read_config_file(path):
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    mapping = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return mapping


def build_arg_parser():
    parser = argparse.ArgumentParser(
        prog="itercomm",
        description="Run the distributed convection-diffusion Jacobi experiment.")
    parser.add_argument("--config", help="key=value configuration file")
    for name, f in _FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if name == "scheme":
            parser.add_argument(flag, choices=SCHEMES)
        elif name == "backend":
            parser.add_argument(flag, choices=BACKENDS)
        elif name == "format":
            parser.add_argument(flag, choices=FORMATS)
        else:
            parser.add_argument(flag, metavar=name.upper(), help=f"default: {f.default}")
    return parser


def parse_config(argv=None, mapping=None):
    """Config from CLI flags and/or a mapping. Flags override the config file."""
    values = {}
    if argv is not None:
        args = build_arg_parser().parse_args(argv)
        if args.config:
            values.update(read_config_file(args.config))
        values.update({k: v for k, v in vars(args).items()
                       if k != "config" and v is not None})
    if mapping:
        values.update(mapping)
    return config_from_mapping(values)


# -- reports ----------------------------------------------------------------

@dataclass
class StepRow:
    step: int
    scheme: str
    p: int
    n: int
    time_s: float
    residual: float
    iterations: int
    snapshots: int
    failed: bool = False


@dataclass
class RankSummary:
    rank: int
    iterations: list
    snapshots: list
    messages_received: int
    sends_posted: int
    sends_discarded: int
    failed_rounds: int
    payload_copies: int
    max_pending_sends: int
    min_recv_requests: int
    max_recv_requests: int


@dataclass
class RunReport:
    config: dict
    rows: list = field(default_factory=list)
    ranks: list = field(default_factory=list)
    failed: bool = False
    error: Optional[str] = None

    @property
    def converged(self):
        return not self.failed

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(config=d["config"], rows=[StepRow(**r) for r in d["rows"]],
                   ranks=[RankSummary(**r) for r in d["ranks"]],
                   failed=d["failed"], error=d["error"])

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = list(CSV_COLUMNS) + (["failed"] if self.failed else [])
        writer.writerow(cols)
        for row in self.rows:
            d = dataclasses.asdict(row)
            d["time_s"] = repr(float(row.time_s))
            d["residual"] = repr(float(row.residual))
            d["failed"] = int(row.failed)
            writer.writerow([d[c] for c in cols])
        return buf.getvalue()


def emit_report(report, path=None, fmt="csv"):
    """Write ``report`` as CSV or JSON to ``path`` (stdout when ``None``); return the text."""
    if fmt not in FORMATS:
        raise UsageError(f"unknown report format {fmt!r}")
    text = report.to_csv() if fmt == "csv" else report.to_json() + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)
    return text


# -- running ----------------------------------------------------------------

@dataclass
class RankResult:
    """Everything one logical process hands back after its run."""

    rank: int
    box: tuple
    metrics: list
    stats: object
    snapshots: int = 0
    failed_rounds: int = 0
    events: list = field(default_factory=list)
    frozen_sends: dict = field(default_factory=dict)
    recorded: dict = field(default_factory=dict)
    history: Optional[list] = None
    error: Optional[str] = None
    error_kind: Optional[str] = None


def rank_main(endpoint, config, partition, system, record=False):
    """Body of one logical process: build the communicator and run all time steps."""
    spec = config.problem()
    block = LocalBlock(partition, endpoint.rank, system, criterion=config.criterion, record=record)
    comm = Communicator(endpoint)
    comm.init_graph(block.neighbors, block.neighbors)
    send_buf, recv_buf = block.make_buffers()
    comm.init_buffers(send_buf, recv_buf)
    comm.init_residual(np.zeros(block.size), config.q, config.threshold)
    comm.config_async(block.u0.copy(), False, recv_buf)
    if config.scheme == ASYNC:
        comm.switch_async(config.max_recv_requests)
    else:
        comm.switch_sync(config.scheme)
    res = RankResult(endpoint.rank, block.box, [], comm.stats)
    try:
        time_step_loop(comm, block, spec, config.threshold,
                       work_per_node=config.node_cost, max_iterations=config.max_iterations,
                       metrics=res.metrics)
    except (NonConvergenceError, ProtocolDeadlockError) as exc:
        res.error = str(exc)
        res.error_kind = type(exc).__name__
    det = comm.detector
    if det is not None:
        res.snapshots = det.snapshots
        res.failed_rounds = det.failed_rounds
        res.events = det.events
        res.frozen_sends = det.frozen_sends
        res.recorded = det.recorded
    res.history = block.history
    return res


def simulate(config, record=False):
    """Run ``config`` on the simulated backend; return ``({rank: RankResult}, network)``."""
    spec = config.problem()
    system = discretize(spec)
    partition = build_partition(spec.n, spec.n, spec.n, config.p)
    graph = partition_to_graph(partition)
    net = SimNetwork(graph, config.delay_model())
    results = net.run(lambda ep: rank_main(ep, config, partition, system, record))
    return results, net


def assemble(results, n, attr="u", step=-1):
    """Global ``n^3`` array from per-rank step metrics."""
    U = np.zeros((n, n, n))
    for res in results.values():
        box = res.box
        shape = tuple(b - a for a, b in box)
        U[tuple(slice(a, b) for a, b in box)] = getattr(res.metrics[step], attr).reshape(shape)
    return U.ravel()


def audit_residual(system, U, B):
    """``||A U - B||_inf`` computed from the global arrays."""
    return float(np.max(np.abs(apply_stencil(system, U) - np.asarray(B).ravel())))


def check_snapshot_consistency(results):
    """Global-observer check of every snapshot round.

    Returns ``(links_checked, rounds_completed, problems)``; ``problems`` lists
    human-readable descriptions of any recorded block that differs from what
    its sender froze, or of a completed round that misses an in-link.
    """
    problems = []
    links = 0
    completed = set()
    for j, res in results.items():
        for (rnd, i), data in res.recorded.items():
            links += 1
            sent = results[i].frozen_sends.get((rnd, j))
            if sent is None:
                problems.append(f"round {rnd}: {i}->{j} recorded but never frozen")
            elif not np.array_equal(sent, data):
                problems.append(f"round {rnd}: {i}->{j} recorded block differs from frozen")
        for t, kind, rnd, info in res.events:
            if kind == "apply":
                completed.add(rnd)
                missing = [i for i in _in_peers(res, results) if (rnd, i) not in res.recorded]
                if missing:
                    problems.append(f"round {rnd}: rank {j} applied without {missing}")
    return links, len(completed), problems


def _in_peers(res, results):
    return sorted({i for (_, i) in res.recorded} |
                  {i for i, r in results.items() if any(k[1] == res.rank for k in r.frozen_sends)})


def check_coordination(results, root=0):
    """Every snapshot trigger must follow a local-convergence notice from every other rank."""
    problems = []
    for t, kind, rnd, info in results[root].events:
        if kind != "trigger":
            continue
        for rank, res in results.items():
            if rank == root:
                continue
            if not any(k == "notify" and r == rnd and tt <= t for tt, k, r, _ in res.events):
                problems.append(f"round {rnd}: triggered at {t} before rank {rank} notified")
    return problems


def run_experiment(config, record=False, with_results=False):
    """Run one experiment and build its report (and optionally the raw per-rank results)."""
    if config.backend == "socket":
        from .transport.socket import run_processes
        spec = config.problem()
        system = discretize(spec)
        partition = build_partition(spec.n, spec.n, spec.n, config.p)
        graph = partition_to_graph(partition)
        results = run_processes(graph, rank_main, (config, partition, system, record))
    else:
        results, _ = simulate(config, record)
    report = build_report(config, results)
    return (report, results) if with_results else report


def build_report(config, results):
    system = discretize(config.problem())
    ranks = sorted(results)
    errors = [results[r].error for r in ranks if results[r].error]
    steps_done = min(len(results[r].metrics) for r in ranks)
    report = RunReport(config=config.to_dict(), failed=bool(errors),
                       error=errors[0] if errors else None)
    for s in range(steps_done):
        ms = [results[r].metrics[s] for r in ranks]
        U = assemble(results, config.n, "u", s)
        B = assemble(results, config.n, "B", s)
        if config.scheme == ASYNC:
            iters = max(m.iterations for m in ms)
        else:
            iters = ms[0].iterations
        report.rows.append(StepRow(
            step=s, scheme=config.scheme, p=config.p, n=config.n,
            time_s=max(m.end for m in ms) - min(m.start for m in ms),
            residual=audit_residual(system, U, B),
            iterations=iters, snapshots=results[0].metrics[s].snapshots))
    if errors:
        report.rows.append(StepRow(
            step=steps_done, scheme=config.scheme, p=config.p, n=config.n,
            time_s=math.nan, residual=math.nan, iterations=config.max_iterations,
            snapshots=0, failed=True))
        for row in report.rows:
            row.failed = True
    for r in ranks:
        res = results[r]
        st = res.stats
        report.ranks.append(RankSummary(
            rank=r, iterations=[m.iterations for m in res.metrics],
            snapshots=[m.snapshots for m in res.metrics],
            messages_received=st.messages_received, sends_posted=st.sends_posted,
            sends_discarded=st.sends_discarded, failed_rounds=res.failed_rounds,
            payload_copies=st.payload_copies, max_pending_sends=st.max_pending_sends,
            min_recv_requests=0 if st.min_recv_requests == math.inf else int(st.min_recv_requests),
            max_recv_requests=st.max_recv_requests))
    return report


def main(argv=None):
    logging.basicConfig(level=logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    try:
        config = parse_config(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except (ConfigurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        report = run_experiment(config)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IterCommError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    try:
        emit_report(report, config.output, config.format)
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log.info("finished in %.2fs wall time", time.perf_counter() - t0)
    if report.failed:
        print(f"not converged: {report.error}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK
