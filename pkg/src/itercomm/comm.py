"""Front-end communicator running the same iteration loop synchronously or asynchronously.

Typical use, on every process::

    comm = Communicator(endpoint)
    comm.init_graph(out_neighbors, in_neighbors)
    comm.init_buffers(send_buf, recv_buf)
    comm.init_residual(res_vec_buf, norm_type=0.5, threshold=1e-6)
    if async_flag:
        comm.config_async(sol_vec_buf)
        comm.switch_async()

    comm.send()
    while comm.res_vec_norm >= threshold:
        comm.recv()
        compute(comm.recv_buf, comm.sol_vec_buf)   # writes send_buf, sol_vec_buf, res_vec_buf
        comm.send()
        comm.lconv_flag = local_norm(comm.res_vec_buf) < threshold
        comm.update_residual()

``recv_buf`` and ``send_buf`` are the caller's lists; the communicator swaps
array references inside them (and ``sol_vec_buf`` on itself) instead of
copying payloads, so callers must always index through them.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .convergence import (ControlPlane, NormSpec, SnapshotDetector,
                          local_accumulate, tree_norm)
from .errors import ConfigurationError, NonConvergenceError, UsageError
from .topology import build_spanning_tree
from .transport.base import Envelope, Tag

TRIVIAL, OVERLAP, ASYNC = "trivial", "overlap", "async"
SCHEMES = (TRIVIAL, OVERLAP, ASYNC)
DEFAULT_MAX_RECV_REQUESTS = 2


@dataclass
class CommMode:
    scheme: str = OVERLAP
    max_recv_requests: int = DEFAULT_MAX_RECV_REQUESTS

    @property
    def is_async(self):
        return self.scheme == ASYNC


@dataclass
class CommStats:
    """Counters maintained by the communicator for instrumentation."""

    iterations: int = 0
    messages_received: int = 0
    sends_posted: int = 0
    sends_discarded: int = 0
    payload_copies: int = 0
    snapshot_copies: int = 0
    max_pending_sends: int = 0
    min_recv_requests: float = math.inf
    max_recv_requests: int = 0
    max_pending_recvs: int = 0
    budget_checks: int = 0


class Communicator:
    def __init__(self, endpoint):
        self.endpoint = endpoint
        self.stats = CommStats()
        self.mode = CommMode()
        self.out_peers = None
        self.in_peers = None
        self.send_buf = None
        self.recv_buf = None
        self.res_vec_buf = None
        self.sol_vec_buf = None
        self.lconv_flag = False
        self.norm_spec = None
        self.tree = None
        self.plane = None
        self.detector = None
        self._res_vec_norm = math.inf
        self._registered = False
        self._started = False
        self._recv_reqs = []
        self._send_reqs = []
        self._spare = []
        self._reductions = 0

    # -- initialization --------------------------------------------------

    def init_graph(self, out_neighbors, in_neighbors):
        if self.out_peers is not None:
            raise UsageError("communication graph already initialized")
        out_neighbors, in_neighbors = tuple(out_neighbors), tuple(in_neighbors)
        if set(out_neighbors) != set(self.endpoint.out_peers) or \
                set(in_neighbors) != set(self.endpoint.in_peers):
            raise ConfigurationError(
                f"rank {self.endpoint.rank}: neighbor lists do not match the open channels")
        self.out_peers = out_neighbors
        self.in_peers = in_neighbors
        self.in_index = {peer: j for j, peer in enumerate(in_neighbors)}

    def init_buffers(self, send_buf, recv_buf):
        if self.out_peers is None:
            raise UsageError("init_graph must come first")
        if self.send_buf is not None:
            raise UsageError("buffers already initialized")
        if len(send_buf) != len(self.out_peers) or len(recv_buf) != len(self.in_peers):
            raise ConfigurationError("one buffer per link is required")
        self.send_buf = send_buf
        self.recv_buf = recv_buf
        self._send_reqs = [None] * len(self.out_peers)
        self._recv_reqs = []
        self._spare = []
        for j, peer in enumerate(self.in_peers):
            shadow = np.empty_like(recv_buf[j])
            self._recv_reqs.append(deque([self.endpoint.post_recv(peer, shadow)]))
            self._spare.append([])

    def init_residual(self, res_vec_buf, norm_type=2.0, threshold=1e-6):
        """Register the local residual and build the spanning tree (collective)."""
        if self.send_buf is None:
            raise UsageError("init_buffers must come first")
        if self.norm_spec is not None:
            raise UsageError("residual already initialized")
        self.res_vec_buf = res_vec_buf
        self.norm_spec = NormSpec(norm_type, threshold)
        self.tree = build_spanning_tree(self.endpoint)
        self.plane = ControlPlane(self.endpoint, self.tree, snapshot_peers=self.in_peers)

    def init(self, out_neighbors, in_neighbors, send_buf, recv_buf, res_vec_buf,
             norm_type=2.0, threshold=1e-6):
        self.init_graph(out_neighbors, in_neighbors)
        self.init_buffers(send_buf, recv_buf)
        self.init_residual(res_vec_buf, norm_type, threshold)

    def config_async(self, sol_vec_buf, lconv_flag=False, recv_buf=None):
        if self.norm_spec is None:
            raise UsageError("init_residual must come first")
        if recv_buf is not None and recv_buf is not self.recv_buf:
            raise ConfigurationError("recv_buf must be the list registered by init_buffers")
        self.sol_vec_buf = sol_vec_buf
        self.lconv_flag = lconv_flag
        self._registered = True

    def switch_async(self, max_recv_requests=None):
        if not self._registered:
            raise UsageError("config_async must be called before switch_async")
        if self._started:
            raise UsageError("mode can only change before the iteration loop starts")
        if max_recv_requests is None:
            max_recv_requests = self.mode.max_recv_requests
        if max_recv_requests < 1:
            raise UsageError("at least one receive request per link is required")
        self.mode = CommMode(ASYNC, int(max_recv_requests))
        if self.detector is None:
            self.detector = SnapshotDetector(self, self.plane, self.norm_spec)
        self._replenish()
        self._check_budget()

    def switch_sync(self, scheme=OVERLAP):
        if scheme not in (TRIVIAL, OVERLAP):
            raise UsageError(f"unknown synchronous scheme {scheme!r}")
        if self._started:
            raise UsageError("mode can only change before the iteration loop starts")
        if self.mode.is_async:
            raise UsageError("cannot leave asynchronous mode once switched")
        self.mode = CommMode(scheme, self.mode.max_recv_requests)

    # -- per-iteration calls ---------------------------------------------

    @property
    def res_vec_norm(self):
        return self._res_vec_norm

    @property
    def is_async(self):
        return self.mode.is_async

    def recv(self):
        self._require_init()
        self._started = True
        if self.is_async:
            self._recv_async()
        else:
            self._recv_sync()

    def send(self):
        self._require_init()
        if self.is_async:
            self._send_async()
        else:
            self._send_sync()

    def wait_completion(self):
        self._require_init()
        if self.is_async:
            raise UsageError("asynchronous iterations never wait for communication")
        reqs = [r for r in self._send_reqs if r is not None]
        if self.mode.scheme == TRIVIAL:
            reqs += [q[0] for q in self._recv_reqs if q]
        self.endpoint.wait_all(reqs)

    def update_residual(self):
        self._require_init()
        self.stats.iterations += 1
        if self.is_async:
            self.detector.on_update()
            return
        acc = local_accumulate(self.res_vec_buf, self.norm_spec)
        self._res_vec_norm = tree_norm(self.plane, acc, self.norm_spec, self._reductions)
        self._reductions += 1

    def reset_residual(self):
        """Arm a new solve (e.g. the next time step) on the same communicator."""
        self._res_vec_norm = math.inf
        if self.detector is not None:
            self.detector.restart()

    @property
    def terminated(self):
        return self.detector is not None and self.detector.terminated

    # -- synchronous paths -----------------------------------------------

    def _recv_sync(self):
        reqs = [q[0] for q in self._recv_reqs if q]
        if len(reqs) != len(self.in_peers):
            raise UsageError("no receive request pending; call send() first in trivial mode")
        self.endpoint.wait_all(reqs)
        for j, peer in enumerate(self.in_peers):
            req = self._recv_reqs[j].popleft()
            # address exchange: the temporary buffer becomes the user buffer
            self.recv_buf[j], shadow = req.payload, self.recv_buf[j]
            self.stats.messages_received += 1
            if self.mode.scheme == TRIVIAL:
                self._spare[j].append(shadow)
            else:
                self._recv_reqs[j].append(self.endpoint.post_recv(peer, shadow))

    def _send_sync(self):
        pending = [r for r in self._send_reqs if r is not None]
        if pending:
            self.endpoint.wait_all(pending)
        if self.mode.scheme == TRIVIAL:
            for j, peer in enumerate(self.in_peers):
                if not self._recv_reqs[j]:
                    slot = self._spare[j].pop() if self._spare[j] else np.empty_like(self.recv_buf[j])
                    self._recv_reqs[j].append(self.endpoint.post_recv(peer, slot))
        for i, peer in enumerate(self.out_peers):
            self._send_reqs[i] = self.endpoint.post_send(
                peer, Envelope(Tag.DATA, np.ascontiguousarray(self.send_buf[i]).tobytes()))
            self.stats.sends_posted += 1

    # -- asynchronous paths ----------------------------------------------

    def _recv_async(self):
        for j, peer in enumerate(self.in_peers):
            reqs = self._recv_reqs[j]
            newest = None
            while reqs and self.endpoint.test(reqs[0]):
                req = reqs.popleft()
                if newest is not None:
                    self._spare[j].append(newest.payload)
                newest = req
                self.stats.messages_received += 1
            if newest is not None:
                self.recv_buf[j], old = newest.payload, self.recv_buf[j]
                self._spare[j].append(old)
        self._replenish()
        self._check_budget()
        self.detector.on_recv()

    def _send_async(self):
        for i, peer in enumerate(self.out_peers):
            req = self._send_reqs[i]
            if req is not None and not self.endpoint.test(req):
                self.stats.sends_discarded += 1
                continue
            # the in-flight copy frees send_buf for the next iteration
            self._send_reqs[i] = self.endpoint.post_send(
                peer, Envelope(Tag.DATA, np.ascontiguousarray(self.send_buf[i]).tobytes()))
            self.stats.sends_posted += 1
        self._check_budget()

    def _replenish(self):
        for j, peer in enumerate(self.in_peers):
            reqs = self._recv_reqs[j]
            while len(reqs) < self.mode.max_recv_requests:
                spare = self._spare[j]
                slot = spare.pop() if spare else np.empty_like(self.recv_buf[j])
                reqs.append(self.endpoint.post_recv(peer, slot))

    def _check_budget(self):
        st = self.stats
        st.budget_checks += 1
        for peer in self.out_peers:
            st.max_pending_sends = max(st.max_pending_sends, self.endpoint.outstanding_sends(peer))
        for j, peer in enumerate(self.in_peers):
            held = len(self._recv_reqs[j])
            st.min_recv_requests = min(st.min_recv_requests, held)
            st.max_recv_requests = max(st.max_recv_requests, held)
            st.max_pending_recvs = max(st.max_pending_recvs,
                                       self.endpoint.outstanding_recvs(peer))

    def _require_init(self):
        if self.norm_spec is None:
            raise UsageError("communicator not fully initialized")


def run_scheme(comm, update, scheme=None, stop=None, max_iterations=100_000, work=1.0,
               prime=True):
    """Drive the iteration loop of ``comm``; return the number of local iterations.

    ``update(comm)`` is the computation phase: it reads ``comm.recv_buf`` and
    ``comm.sol_vec_buf`` and writes ``comm.send_buf``, ``comm.sol_vec_buf`` and
    ``comm.res_vec_buf``. ``stop(comm, k)`` defaults to the global residual norm
    dropping below the threshold. The loop ordering follows the selected scheme.
    """
    if scheme is not None:
        if scheme == ASYNC:
            if not comm.is_async:
                comm.switch_async()
        else:
            comm.switch_sync(scheme)
    spec = comm.norm_spec
    if stop is None:
        def stop(c, k):
            return c.res_vec_norm < spec.threshold
    k = 0
    if stop(comm, k):
        return 0
    if prime:
        comm.send()
        if not comm.is_async:
            comm.wait_completion()
    while True:
        if k >= max_iterations:
            raise NonConvergenceError(
                f"rank {comm.endpoint.rank}: no convergence after {k} iterations", k)
        comm.recv()
        update(comm)
        comm.endpoint.compute(work)
        comm.send()
        if not comm.is_async:
            comm.wait_completion()
        comm.lconv_flag = spec.norm(comm.res_vec_buf) < spec.threshold
        comm.update_residual()
        k += 1
        if stop(comm, k):
            return k
