"""Message, request and endpoint machinery shared by both transport backends.

Matching follows MPI conventions: a receive posted on ``(peer, tag)`` is
paired with the oldest unmatched message from ``peer`` carrying ``tag``.
Messages on a directed channel are handed to the matching engine in the
order they were posted, so every ``(channel, tag)`` stream is FIFO.
"""
from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ChannelOverflowError, ProtocolError, UsageError

DEFAULT_QUEUE_LIMIT = 64


class Tag(enum.IntEnum):
    """Message kinds. The tag alone decides how a body is decoded."""

    DATA = 0
    SNAPSHOT = 1
    LOCAL_CONV = 2
    NORM_UP = 3
    NORM_DOWN = 4
    CONTROL = 5
    TERMINATE = 6


@dataclass
class Envelope:
    tag: Tag
    body: bytes
    src: Optional[int] = None
    dst: Optional[int] = None
    deliver_at: Optional[float] = None


class Request:
    """Handle for one non-blocking send or receive.

    ``payload`` is the slot being filled (receive into an array), the body
    bytes (receive without a slot) or the outgoing envelope (send).
    """

    __slots__ = ("id", "kind", "peer", "tag", "owner", "payload", "envelope",
                 "post_time", "match_time", "completed", "error")

    def __init__(self, id, kind, peer, tag, owner, payload, post_time):
        self.id = id
        self.kind = kind
        self.peer = peer
        self.tag = tag
        self.owner = owner
        self.payload = payload
        self.envelope = None
        self.post_time = post_time
        self.match_time = None
        self.completed = False
        self.error = None

    @property
    def state(self):
        return "completed" if self.completed else "pending"

    def __repr__(self):
        return (f"Request(id={self.id}, kind={self.kind}, peer={self.peer}, "
                f"tag={Tag(self.tag).name}, state={self.state})")


@dataclass
class _Arrival:
    envelope: Envelope
    available_at: float
    send_req: Optional[Request]


@dataclass
class _InChannel:
    peer: int
    messages: dict = field(default_factory=dict)
    recvs: dict = field(default_factory=dict)
    unmatched: int = 0


class Endpoint:
    """One process's view of the network: its directed channels and requests.

    Subclasses provide time (``now``), transmission and blocking waits.
    """

    def __init__(self, rank, out_peers, in_peers, queue_limit=DEFAULT_QUEUE_LIMIT):
        self.rank = rank
        self.out_peers = tuple(out_peers)
        self.in_peers = tuple(in_peers)
        self.queue_limit = queue_limit
        self._in = {peer: _InChannel(peer) for peer in self.in_peers}
        self._ids = itertools.count()
        self.delivered = 0
        self.posted_sends = 0
        self._live = {}

    @property
    def channels(self):
        return ({("in", p) for p in self.in_peers}
                | {("out", p) for p in self.out_peers})

    def now(self):
        raise NotImplementedError

    def post_send(self, peer, envelope):
        if peer not in self.out_peers:
            raise UsageError(f"rank {self.rank} has no channel to {peer}")
        envelope.src = self.rank
        envelope.dst = peer
        req = Request(next(self._ids), "send", peer, envelope.tag, self,
                      envelope, self.now())
        req.envelope = envelope
        self.posted_sends += 1
        if envelope.tag == Tag.DATA:
            self._track(("send", peer, Tag.DATA), req)
        self._transmit(envelope, req)
        return req

    def post_recv(self, peer, slot=None, tag=Tag.DATA):
        if peer not in self._in:
            raise UsageError(f"rank {self.rank} has no channel from {peer}")
        req = Request(next(self._ids), "recv", peer, tag, self, slot, self.now())
        self._in[peer].recvs.setdefault(tag, deque()).append(req)
        if tag == Tag.DATA:
            self._track(("recv", peer, Tag.DATA), req)
        self._match(self._in[peer], tag)
        return req

    def test(self, request):
        if request.owner is not self:
            raise UsageError(f"request {request.id} does not belong to rank {self.rank}")
        if not request.completed:
            self._progress()
            if request.match_time is None or request.match_time > self.now():
                return False
            request.completed = True
        if request.error is not None:
            raise request.error
        return True

    def cancel(self, request):
        """Withdraw a receive that has not been matched yet. Returns success."""
        if request.owner is not self:
            raise UsageError(f"request {request.id} does not belong to rank {self.rank}")
        if request.kind != "recv" or request.match_time is not None:
            return False
        queue = self._in[request.peer].recvs.get(request.tag)
        if queue is None or request not in queue:
            return False
        queue.remove(request)
        live = self._live.get(("recv", request.peer, request.tag), [])
        if request in live:
            live.remove(request)
        return True

    def _track(self, key, req):
        live = self._live.setdefault(key, [])
        live.append(req)
        if len(live) > 2 * self.queue_limit:
            self._outstanding(key)

    def _outstanding(self, key):
        live = [r for r in self._live.get(key, ()) if not r.completed]
        self._live[key] = live
        return len(live)

    def outstanding_sends(self, peer):
        """DATA send requests to ``peer`` whose completion the owner has not yet observed."""
        return self._outstanding(("send", peer, Tag.DATA))

    def outstanding_recvs(self, peer):
        """DATA receive requests from ``peer`` still held (not yet seen completed by ``test``)."""
        return self._outstanding(("recv", peer, Tag.DATA))

    def pending_messages(self, peer=None):
        """Number of posted-but-unmatched messages queued at this endpoint."""
        chans = self._in.values() if peer is None else [self._in[peer]]
        return sum(c.unmatched for c in chans)

    def wait_all(self, requests):
        raise NotImplementedError

    def wait_any(self, requests):
        raise NotImplementedError

    def compute(self, work):
        """Account for ``work`` units of local computation."""
        raise NotImplementedError

    def close(self):
        pass

    # -- matching engine -------------------------------------------------

    def _transmit(self, envelope, request):
        raise NotImplementedError

    def _progress(self):
        pass

    def _arrive(self, envelope, available_at, send_req=None):
        chan = self._in.get(envelope.src)
        if chan is None:
            raise ProtocolError(f"rank {self.rank} got a message from non-neighbor {envelope.src}")
        if chan.unmatched >= self.queue_limit:
            raise ChannelOverflowError(
                f"channel {envelope.src}->{self.rank} exceeded {self.queue_limit} queued messages")
        chan.messages.setdefault(envelope.tag, deque()).append(
            _Arrival(envelope, available_at, send_req))
        chan.unmatched += 1
        self._match(chan, envelope.tag)

    def _match(self, chan, tag):
        msgs = chan.messages.get(tag)
        recvs = chan.recvs.get(tag)
        while msgs and recvs:
            arrival = msgs.popleft()
            req = recvs.popleft()
            chan.unmatched -= 1
            when = max(arrival.available_at, req.post_time)
            _fill(req, arrival.envelope)
            req.match_time = when
            self.delivered += 1
            if arrival.send_req is not None:
                arrival.send_req.match_time = when

    def _earliest(self, requests, every):
        times = []
        for req in requests:
            if req.owner is not self:
                raise UsageError(f"request {req.id} does not belong to rank {self.rank}")
            if req.match_time is None:
                if every:
                    return None
                continue
            times.append(req.match_time)
        if not times:
            return None if requests else self.now()
        return max(times) if every else min(times)


def _fill(req, envelope):
    req.envelope = envelope
    slot = req.payload
    if slot is None:
        req.payload = envelope.body
        return
    if isinstance(slot, np.ndarray):
        if slot.nbytes != len(envelope.body):
            req.error = ProtocolError(
                f"size mismatch on {envelope.src}->{envelope.dst}: expected "
                f"{slot.nbytes} bytes, got {len(envelope.body)}")
            return
        # the wire transfer itself; kernel-side delivery never copies
        slot[...] = np.frombuffer(envelope.body, dtype=slot.dtype).reshape(slot.shape)
    else:
        view = memoryview(slot)
        if view.nbytes != len(envelope.body):
            req.error = ProtocolError(
                f"size mismatch on {envelope.src}->{envelope.dst}: expected "
                f"{view.nbytes} bytes, got {len(envelope.body)}")
            return
        view[:] = envelope.body
