"""Deterministic discrete-event transport.

Every logical process runs in its own greenlet with a private clock. The
scheduler always resumes the process whose clock (or wake-up time, when it is
blocked) is smallest, lowest rank first on ties, so a run is a pure function
of its configuration and seed.

A message posted at time ``t`` on channel ``s -> d`` becomes deliverable at
``max(t + latency + jitter, last deliverable time on that channel)``. Sends
complete when matched with a posted receive (rendezvous), receives when their
message is deliverable.

Endpoints can also be driven directly from ordinary code ("scripted" mode):
``compute`` then just advances the endpoint clock and a blocking wait jumps
the clock forward to the completion time, or raises if nothing can complete.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import greenlet
import numpy as np

from ..errors import ConfigurationError, ProtocolDeadlockError, UsageError
from .base import DEFAULT_QUEUE_LIMIT, Endpoint


class TraceEntry(NamedTuple):
    posted: float
    deliver_at: float
    src: int
    dst: int
    tag: int
    size: int


@dataclass
class DelayModel:
    """Link latencies, per-rank compute slowdowns and seeded jitter."""

    latency: float = 1.0
    link_latency: dict = field(default_factory=dict)
    slowdown: dict = field(default_factory=dict)
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.latency < 0 or self.jitter < 0:
            raise ConfigurationError("latency and jitter must be non-negative")
        if any(v < 0 for v in self.link_latency.values()):
            raise ConfigurationError("link latencies must be non-negative")
        if any(v <= 0 for v in self.slowdown.values()):
            raise ConfigurationError("slowdown factors must be positive")

    def link(self, src, dst):
        return self.link_latency.get((src, dst), self.latency)

    def factor(self, rank):
        return self.slowdown.get(rank, 1.0)


class SimNetwork:
    """Owns the endpoints of one simulated run and schedules their processes."""

    def __init__(self, graph, delay=None, queue_limit=DEFAULT_QUEUE_LIMIT, max_time=math.inf):
        self.graph = graph
        self.delay = delay if delay is not None else DelayModel()
        self.queue_limit = queue_limit
        self.max_time = max_time
        self._rng = np.random.default_rng(self.delay.seed)
        self._last_delivery = {}
        self.endpoints = {}
        self.trace = []
        self._scheduler = None

    @property
    def p(self):
        return self.graph.p

    def open_channels(self, rank):
        if not 0 <= rank < self.graph.p:
            raise ConfigurationError(f"rank {rank} not in graph of {self.graph.p} processes")
        if rank in self.endpoints:
            raise UsageError(f"channels already open for rank {rank}")
        ep = SimEndpoint(self, rank, self.graph.out_neighbors[rank],
                         self.graph.in_neighbors[rank], self.queue_limit)
        self.endpoints[rank] = ep
        return ep

    def open_all(self):
        return [self.open_channels(r) for r in range(self.graph.p)]

    def endpoint(self, rank):
        if rank not in self.endpoints:
            return self.open_channels(rank)
        return self.endpoints[rank]

    def _route(self, envelope, send_req):
        src, dst = envelope.src, envelope.dst
        now = self.endpoints[src].clock
        lat = self.delay.link(src, dst)
        if self.delay.jitter > 0:
            lat += float(self._rng.uniform(0.0, self.delay.jitter))
        at = max(now + lat, self._last_delivery.get((src, dst), -math.inf))
        self._last_delivery[(src, dst)] = at
        envelope.deliver_at = at
        self.trace.append(TraceEntry(now, at, src, dst, int(envelope.tag), len(envelope.body)))
        self.endpoint(dst)._arrive(envelope, at, send_req)

    def run(self, target, ranks=None):
        """Run ``target(endpoint)`` on every rank (or ``target[rank](endpoint)``).

        Returns ``{rank: return value}``. The first exception raised by any
        process aborts the run and is re-raised here.
        """
        if ranks is None:
            ranks = sorted(target) if isinstance(target, dict) else range(self.graph.p)
        main = greenlet.getcurrent()
        procs = {}
        for rank in ranks:
            ep = self.endpoint(rank)
            fn = target[rank] if isinstance(target, dict) else target
            ep._glet = greenlet.greenlet(lambda fn=fn, ep=ep: fn(ep), parent=main)
            ep._wait = None
            procs[rank] = ep
        self._scheduler = main
        results = {}
        try:
            while procs:
                best, best_key = None, None
                for rank, ep in procs.items():
                    t = ep._ready_time()
                    if t is None:
                        continue
                    key = (t, rank)
                    if best_key is None or key < best_key:
                        best, best_key = ep, key
                if best is None:
                    rank = min(procs)
                    ep = procs[rank]
                    ep._wait = None
                    value = ep._glet.throw(ProtocolDeadlockError(
                        f"no pending delivery can complete the requests awaited by ranks {sorted(procs)}"))
                    if ep._glet.dead:
                        results[rank] = value
                        del procs[rank]
                    continue
                if best_key[0] > self.max_time:
                    raise ProtocolDeadlockError(
                        f"simulated time limit {self.max_time} exceeded")
                best.clock = max(best.clock, best_key[0])
                best._wait = None
                value = best._glet.switch()
                if best._glet.dead:
                    results[best.rank] = value
                    del procs[best.rank]
        except BaseException:
            for ep in procs.values():
                if ep._glet and not ep._glet.dead:
                    ep._glet.throw(greenlet.GreenletExit)
            raise
        finally:
            self._scheduler = None
            for ep in self.endpoints.values():
                ep._glet = None
                ep._wait = None
        return results

    @property
    def now(self):
        return max((ep.clock for ep in self.endpoints.values()), default=0.0)


class SimEndpoint(Endpoint):
    def __init__(self, network, rank, out_peers, in_peers, queue_limit):
        super().__init__(rank, out_peers, in_peers, queue_limit)
        self.network = network
        self.clock = 0.0
        self.busy = 0.0
        self._glet = None
        self._wait = None

    def now(self):
        return self.clock

    def advance(self, dt):
        """Move the clock forward without counting it as computation."""
        self.clock += dt

    def _scheduled(self):
        return self._glet is not None and greenlet.getcurrent() is self._glet

    def _ready_time(self):
        if self._wait is None:
            return self.clock
        t = self._wait()
        if t is None:
            return None
        return max(t, self.clock)

    def _yield(self, wait=None):
        self._wait = wait
        self.network._scheduler.switch()

    def _transmit(self, envelope, request):
        self.network._route(envelope, request)

    def compute(self, work):
        dt = work * self.network.delay.factor(self.rank)
        self.clock += dt
        self.busy += dt
        if self._scheduled():
            self._yield()

    def _block(self, requests, every):
        if not requests:
            return
        t = self._earliest(requests, every)
        if t is not None and t <= self.clock:
            return
        if self._scheduled():
            self._yield(lambda: self._earliest(requests, every))
            return
        if t is None:
            raise ProtocolDeadlockError(
                f"rank {self.rank}: awaited requests can never complete")
        self.clock = t

    def wait_all(self, requests):
        self._block(list(requests), every=True)
        for req in requests:
            self.test(req)

    def wait_any(self, requests):
        """Block until at least one request completes; return its index."""
        requests = list(requests)
        if not requests:
            raise UsageError("wait_any needs at least one request")
        self._block(requests, every=False)
        for i, req in enumerate(requests):
            if self.test(req):
                return i
        raise AssertionError("wait_any woke without a completed request")
