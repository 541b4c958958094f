"""Distributed residual norms and termination detection.

Synchronous iterations reduce the residual norm over the spanning tree every
iteration. Asynchronous iterations use a snapshot protocol: local convergence
climbs the tree (coordination phase), the root then freezes its block and
floods frozen boundary data over the communication graph (snapshot phase).
Once a process holds its own frozen block and a frozen block from every
in-neighbor, one extra iteration on that isolated global vector produces a
consistent residual, which is reduced over the tree. The root answers with
TERMINATE when it is below threshold, otherwise with NORM_DOWN and the next
round starts from scratch.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ProtocolError
from .transport.base import Envelope, Tag

log = logging.getLogger(__name__)

_ROUND = struct.Struct("<I")
_ACC = struct.Struct("<dI")


@dataclass(frozen=True)
class NormSpec:
    """Norm selector and stopping threshold. ``q < 1`` selects the max norm."""

    q: float = 0.5
    threshold: float = 1e-6

    def __post_init__(self):
        if not math.isfinite(self.q):
            raise ConfigurationError("norm selector q must be finite")
        if not self.threshold > 0:
            raise ConfigurationError("threshold must be positive")

    @property
    def is_max(self):
        return self.q < 1

    def norm(self, vector):
        """Plain single-array norm, used for local flags and as a reference."""
        return local_accumulate(np.asarray(vector).ravel(), self).finalize(self)


@dataclass
class NormAccumulator:
    kind: str
    value: float = 0.0
    count: int = 1
    invalid: bool = False

    def combine(self, other):
        if other.kind != self.kind:
            raise ProtocolError(f"cannot combine {self.kind} with {other.kind}")
        if self.kind == "max":
            value = max(self.value, other.value)
        else:
            value = self.value + other.value
        invalid = self.invalid or other.invalid
        if invalid:
            value = math.nan
        return NormAccumulator(self.kind, value, self.count + other.count, invalid)

    def finalize(self, spec):
        if self.invalid:
            return math.nan
        if self.kind == "max":
            return float(self.value)
        return float(self.value) ** (1.0 / spec.q)


def local_accumulate(block, spec):
    block = np.asarray(block, dtype=float).ravel()
    kind = "max" if spec.is_max else "sum"
    if block.size == 0:
        return NormAccumulator(kind, 0.0)
    if np.isnan(block).any():
        return NormAccumulator(kind, math.nan, invalid=True)
    a = np.abs(block)
    value = float(a.max()) if spec.is_max else float(np.sum(a ** spec.q))
    return NormAccumulator(kind, value)


def _encode_acc(acc):
    return _ACC.pack(acc.value, acc.count) + (b"\x01" if acc.invalid else b"\x00")


def _decode_acc(kind, payload):
    value, count = _ACC.unpack_from(payload)
    return NormAccumulator(kind, value, count, payload[_ACC.size:] == b"\x01")


class ControlPlane:
    """Persistent receives for the control tags a process can be sent.

    Completed messages are decoded into an inbox keyed by ``(tag, round)``.
    """

    def __init__(self, endpoint, tree, snapshot_peers=()):
        self.endpoint = endpoint
        self.tree = tree
        wanted = []
        for child in tree.children:
            wanted += [(child, Tag.LOCAL_CONV), (child, Tag.NORM_UP)]
        if tree.parent is not None:
            wanted += [(tree.parent, Tag.NORM_DOWN), (tree.parent, Tag.TERMINATE)]
        for peer in snapshot_peers:
            wanted.append((peer, Tag.SNAPSHOT))
        self._reqs = {key: endpoint.post_recv(key[0], tag=key[1]) for key in wanted}
        self.inbox = {}

    def send(self, peer, tag, round_, payload=b""):
        self.endpoint.post_send(peer, Envelope(tag, _ROUND.pack(round_) + payload))

    def poll(self):
        got = False
        for key, req in self._reqs.items():
            while self.endpoint.test(req):
                body = req.payload
                (round_,) = _ROUND.unpack_from(body)
                self.inbox.setdefault((key[1], round_), {})[key[0]] = body[_ROUND.size:]
                req = self._reqs[key] = self.endpoint.post_recv(key[0], tag=key[1])
                got = True
        return got

    def peek(self, tag, round_):
        return self.inbox.get((tag, round_), {})

    def take(self, tag, round_):
        return self.inbox.pop((tag, round_), {})

    def drop_before(self, round_):
        for key in [k for k in self.inbox if k[1] < round_]:
            msgs = self.inbox.pop(key)
            log.warning("rank %d discarded %d stale %s message(s) of round %d",
                        self.endpoint.rank, len(msgs), Tag(key[0]).name, key[1])

    def wait(self):
        self.endpoint.wait_any(list(self._reqs.values()))

    def requests(self):
        return list(self._reqs.values())


class TreeReduction:
    """One convergecast + broadcast over the spanning tree, advanced by ``step``."""

    def __init__(self, plane, spec, round_, acc, decide=None):
        self.plane = plane
        self.spec = spec
        self.round = round_
        self.acc = acc
        self.decide = decide
        self.sent_up = False
        self.value = None
        self.terminal = None

    @property
    def done(self):
        return self.value is not None

    def step(self):
        if self.done:
            return self.value
        tree = self.plane.tree
        self.plane.poll()
        if not self.sent_up:
            got = self.plane.peek(Tag.NORM_UP, self.round)
            if any(c not in got for c in tree.children):
                return None
            got = self.plane.take(Tag.NORM_UP, self.round)
            acc = self.acc
            for child in tree.children:
                acc = acc.combine(_decode_acc(acc.kind, got[child]))
            self.sent_up = True
            if tree.parent is not None:
                self.plane.send(tree.parent, Tag.NORM_UP, self.round, _encode_acc(acc))
            else:
                self._finish(acc.finalize(self.spec))
                return self.value
        down = self.plane.take(Tag.TERMINATE, self.round)
        terminal = bool(down)
        if not down:
            down = self.plane.take(Tag.NORM_DOWN, self.round)
        if not down:
            return None
        (value,) = struct.unpack("<d", down[tree.parent])
        self._finish(value, terminal)
        return self.value

    def _finish(self, value, terminal=None):
        if terminal is None:
            terminal = bool(self.decide(value)) if self.decide else False
        self.terminal = terminal
        tag = Tag.TERMINATE if terminal else Tag.NORM_DOWN
        for child in self.plane.tree.children:
            self.plane.send(child, tag, self.round, struct.pack("<d", value))
        self.value = value


def tree_norm(plane, acc, spec, round_=0):
    """Blocking global norm: every rank returns the same value."""
    red = TreeReduction(plane, spec, round_, acc)
    while red.step() is None:
        plane.wait()
    return red.value


@dataclass
class SnapshotRound:
    round: int
    notified: bool = False
    triggered: bool = False
    frozen: bool = False
    applied: bool = False
    ss_sol: object = None
    ss_send: list = field(default_factory=list)
    ss_recv: dict = field(default_factory=dict)
    reduction: object = None
    result: object = None


class SnapshotDetector:
    """Per-process state of the asynchronous termination protocol.

    The communicator calls :meth:`on_recv` at the start of each asynchronous
    iteration and :meth:`on_update` at its end; nothing runs in between.
    """

    def __init__(self, comm, plane, spec):
        self.comm = comm
        self.plane = plane
        self.spec = spec
        self.tree = plane.tree
        self.rank = comm.endpoint.rank
        self.state = SnapshotRound(0)
        self.terminated = False
        self.snapshots = 0
        self.failed_rounds = 0
        self.events = []
        self.frozen_sends = {}
        self.frozen_blocks = {}
        self.recorded = {}

    @property
    def round(self):
        return self.state.round

    @property
    def is_root(self):
        return self.tree.parent is None

    def _event(self, kind, **info):
        self.events.append((self.comm.endpoint.now(), kind, self.state.round, info))

    def restart(self):
        """Begin a fresh detection (e.g. for the next time step)."""
        self.terminated = False
        self.state = SnapshotRound(self.state.round + 1)
        self.plane.drop_before(self.state.round)

    # -- hooks -----------------------------------------------------------

    def on_recv(self):
        if self.terminated:
            return
        self._collect_snapshots()
        st = self.state
        if st.frozen and not st.applied and self._complete():
            self._apply()

    def on_update(self):
        if self.terminated:
            return
        st = self.state
        if st.applied and st.reduction is None:
            st.result = self.comm.sol_vec_buf.copy()
            acc = local_accumulate(self.comm.res_vec_buf, self.spec)
            self._event("evaluate", local=acc.value)
            st.reduction = TreeReduction(self.plane, self.spec, st.round, acc,
                                         decide=lambda v: v < self.spec.threshold)
        self._coordinate()
        self._collect_snapshots()
        if st.reduction is not None and st.reduction.step() is not None:
            self._verdict(st.reduction)

    # -- phases ----------------------------------------------------------

    def _coordinate(self):
        st = self.state
        if st.notified or not self.comm.lconv_flag:
            return
        got = self.plane.peek(Tag.LOCAL_CONV, st.round)
        if any(c not in got for c in self.tree.children):
            return
        self.plane.take(Tag.LOCAL_CONV, st.round)
        st.notified = True
        if self.is_root:
            self._event("trigger")
            st.triggered = True
            self.snapshots += 1
            self._freeze()
        else:
            self._event("notify")
            self.plane.send(self.tree.parent, Tag.LOCAL_CONV, st.round)

    def _freeze(self):
        st = self.state
        comm = self.comm
        st.ss_sol = comm.sol_vec_buf.copy()
        st.ss_send = [buf.copy() for buf in comm.send_buf]
        st.frozen = True
        self.frozen_blocks[st.round] = st.ss_sol.copy()
        comm.stats.snapshot_copies += 1 + len(comm.send_buf)
        self._event("freeze")
        for peer, payload in zip(comm.out_peers, st.ss_send):
            self.frozen_sends[(st.round, peer)] = payload.copy()
            self.plane.send(peer, Tag.SNAPSHOT, st.round, payload.tobytes())

    def _collect_snapshots(self):
        self.plane.poll()
        st = self.state
        comm = self.comm
        msgs = self.plane.take(Tag.SNAPSHOT, st.round)
        for peer, body in msgs.items():
            j = comm.in_index[peer]
            template = comm.recv_buf[j]
            if len(body) != template.nbytes:
                raise ProtocolError(
                    f"snapshot from {peer} has {len(body)} bytes, expected {template.nbytes}")
            if peer in st.ss_recv:
                raise ProtocolError(f"duplicate snapshot from {peer} in round {st.round}")
            data = np.frombuffer(body, dtype=template.dtype).reshape(template.shape).copy()
            st.ss_recv[peer] = data
            self.recorded[(st.round, peer)] = data.copy()
            self._event("record", peer=peer)
        self.plane.drop_before(st.round)
        if (not self.is_root and not st.frozen and st.ss_recv
                and self.comm.lconv_flag):
            self._freeze()

    def _complete(self):
        return self.state.frozen and all(p in self.state.ss_recv for p in self.comm.in_peers)

    def _apply(self):
        # the next computation reads the isolated global vector
        st = self.state
        comm = self.comm
        comm.sol_vec_buf, st.ss_sol = st.ss_sol, comm.sol_vec_buf
        for peer, j in comm.in_index.items():
            comm.recv_buf[j], st.ss_recv[peer] = st.ss_recv[peer], comm.recv_buf[j]
        st.applied = True
        self._event("apply")

    def _verdict(self, reduction):
        value = reduction.value
        self.comm._res_vec_norm = value
        self._event("verdict", value=value, terminal=reduction.terminal)
        if reduction.terminal:
            self.comm.sol_vec_buf = self.state.result
            self.terminated = True
        else:
            self.failed_rounds += 1
            self.state = SnapshotRound(self.state.round + 1)
            self.plane.drop_before(self.state.round)
