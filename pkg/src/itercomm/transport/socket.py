"""TCP transport for runs over real threads or OS processes.

Each directed channel is one TCP connection. Frames are::

    <u32 length> <u8 tag> <u32 src rank> <body>

all little-endian, where ``length`` counts the bytes after the prefix. A send
request completes once its frame has been handed to the kernel; a receive
completes when its frame has been read and matched. Progress is made inside
``test`` and the blocking waits, never by a background thread.
"""
from __future__ import annotations

import multiprocessing
import selectors
import socket
import struct
import threading
import time
import traceback
from collections import deque

from ..errors import ConfigurationError, ProtocolDeadlockError, ProtocolError, UsageError
from .base import DEFAULT_QUEUE_LIMIT, Endpoint, Envelope, Tag

_PREFIX = struct.Struct("<I")
_HEADER = struct.Struct("<BI")
_HELLO = struct.Struct("<I")
DEFAULT_TIMEOUT = 30.0


def encode_frame(tag, src, body):
    body = bytes(body)
    return _PREFIX.pack(_HEADER.size + len(body)) + _HEADER.pack(int(tag), src) + body


def decode_frames(buffer):
    """Split complete frames off the front of ``buffer`` (a bytearray, consumed in place)."""
    out = []
    while len(buffer) >= _PREFIX.size:
        (length,) = _PREFIX.unpack_from(buffer)
        if length < _HEADER.size:
            raise ProtocolError(f"frame length {length} shorter than its header")
        end = _PREFIX.size + length
        if len(buffer) < end:
            break
        tag, src = _HEADER.unpack_from(buffer, _PREFIX.size)
        try:
            tag = Tag(tag)
        except ValueError:
            raise ProtocolError(f"unknown tag {tag} on the wire") from None
        out.append(Envelope(tag, bytes(buffer[_PREFIX.size + _HEADER.size:end]), src))
        del buffer[:end]
    return out


def _recv_exact(sock, n):
    data = b""
    while len(data) < n:
        chunk = sock.recv(n - len(data))
        if not chunk:
            raise ProtocolError("connection closed during handshake")
        data += chunk
    return data


class SocketNetwork:
    """Listening sockets and addresses for ``graph``, all on one host."""

    def __init__(self, graph, host="127.0.0.1", timeout=DEFAULT_TIMEOUT,
                 queue_limit=DEFAULT_QUEUE_LIMIT):
        self.graph = graph
        self.timeout = timeout
        self.queue_limit = queue_limit
        self.listeners = {}
        self.addresses = {}
        for rank in range(graph.p):
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((host, 0))
            srv.listen(max(16, len(graph.in_neighbors[rank]) + 1))
            self.listeners[rank] = srv
            self.addresses[rank] = srv.getsockname()
        self._opened = set()
        self._lock = threading.Lock()

    @property
    def p(self):
        return self.graph.p

    def open_channels(self, rank):
        if not 0 <= rank < self.graph.p:
            raise ConfigurationError(f"rank {rank} not in graph of {self.graph.p} processes")
        with self._lock:
            if rank in self._opened:
                raise UsageError(f"channels already open for rank {rank}")
            self._opened.add(rank)
        return SocketEndpoint(rank, self.graph.out_neighbors[rank],
                              self.graph.in_neighbors[rank], self.listeners[rank],
                              self.addresses, self.timeout, self.queue_limit)

    def close(self):
        for srv in self.listeners.values():
            srv.close()


class SocketEndpoint(Endpoint):
    def __init__(self, rank, out_peers, in_peers, listener, addresses,
                 timeout=DEFAULT_TIMEOUT, queue_limit=DEFAULT_QUEUE_LIMIT):
        super().__init__(rank, out_peers, in_peers, queue_limit)
        self.timeout = timeout
        self._sel = selectors.DefaultSelector()
        self._out = {}
        self._pending_out = {peer: deque() for peer in self.out_peers}
        self._in_bufs = {}
        for peer in self.out_peers:
            sock = socket.create_connection(addresses[peer], timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(_HELLO.pack(rank))
            sock.setblocking(False)
            self._out[peer] = sock
        listener.settimeout(timeout)
        expected = set(self.in_peers)
        while expected:
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                raise ProtocolDeadlockError(
                    f"rank {rank}: in-neighbors {sorted(expected)} never connected") from None
            conn.settimeout(timeout)
            (src,) = _HELLO.unpack(_recv_exact(conn, _HELLO.size))
            if src not in expected:
                conn.close()
                raise ProtocolError(f"rank {rank}: unexpected connection from {src}")
            expected.discard(src)
            conn.setblocking(False)
            self._in_bufs[src] = bytearray()
            self._sel.register(conn, selectors.EVENT_READ, src)

    def now(self):
        # one clock for every process on the host
        return time.monotonic()

    def compute(self, work):
        # real computation already took real time
        pass

    def _transmit(self, envelope, request):
        self._pending_out[envelope.dst].append(
            [memoryview(encode_frame(envelope.tag, self.rank, envelope.body)), request])
        self._flush(envelope.dst)

    def _flush(self, peer):
        queue = self._pending_out[peer]
        sock = self._out[peer]
        while queue:
            view, req = queue[0]
            try:
                sent = sock.send(view)
            except BlockingIOError:
                return
            except (BrokenPipeError, ConnectionResetError):
                # peer has shut down; whatever is left stays undelivered
                queue.clear()
                return
            if sent < len(view):
                queue[0][0] = view[sent:]
                return
            queue.popleft()
            req.match_time = self.now()

    def _progress(self, timeout=0.0):
        for peer in self.out_peers:
            if self._pending_out[peer]:
                self._flush(peer)
        for key, _ in self._sel.select(timeout):
            src = key.data
            try:
                chunk = key.fileobj.recv(1 << 16)
            except BlockingIOError:
                continue
            except ConnectionResetError:
                chunk = b""
            if not chunk:
                self._sel.unregister(key.fileobj)
                key.fileobj.close()
                continue
            buf = self._in_bufs[src]
            buf += chunk
            for env in decode_frames(buf):
                if env.src != src:
                    raise ProtocolError(f"frame claims src {env.src} on channel from {src}")
                env.dst = self.rank
                self._arrive(env, self.now())

    def _wait(self, requests, every):
        deadline = time.monotonic() + self.timeout
        while True:
            self._progress()
            done = [r.match_time is not None for r in requests]
            if (all(done) if every else any(done)):
                return
            if time.monotonic() > deadline:
                raise ProtocolDeadlockError(
                    f"rank {self.rank}: requests still pending after {self.timeout}s")
            self._progress(0.001 if any(self._pending_out.values()) else 0.01)

    def wait_all(self, requests):
        requests = list(requests)
        for req in requests:
            if req.owner is not self:
                raise UsageError(f"request {req.id} does not belong to rank {self.rank}")
        if requests:
            self._wait(requests, every=True)
        for req in requests:
            self.test(req)

    def wait_any(self, requests):
        requests = list(requests)
        if not requests:
            raise UsageError("wait_any needs at least one request")
        for req in requests:
            if req.owner is not self:
                raise UsageError(f"request {req.id} does not belong to rank {self.rank}")
        self._wait(requests, every=False)
        for i, req in enumerate(requests):
            if self.test(req):
                return i
        raise AssertionError("wait_any woke without a completed request")

    def close(self, linger=None):
        """Flush queued frames (bounded by ``linger`` seconds), then close every socket."""
        linger = self.timeout if linger is None else linger
        deadline = time.monotonic() + linger
        while any(self._pending_out.values()) and time.monotonic() < deadline:
            self._progress(0.001)
        for sock in self._out.values():
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            sock.close()
        for key in list(self._sel.get_map().values()):
            self._sel.unregister(key.fileobj)
            key.fileobj.close()
        self._sel.close()


def run_threads(network, target, ranks=None):
    """Run ``target(endpoint)`` for every rank in its own thread; return ``{rank: result}``.

    Endpoints are opened inside the threads, since connection setup is
    collective. The first exception raised by any rank is re-raised.
    """
    ranks = list(range(network.p)) if ranks is None else list(ranks)
    results, errors = {}, {}

    def body(rank):
        try:
            ep = network.open_channels(rank)
            fn = target[rank] if isinstance(target, dict) else target
            try:
                results[rank] = fn(ep)
            finally:
                ep.close()
        except BaseException as exc:
            errors[rank] = exc

    threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in ranks]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[min(errors)]
    return results


def _child(network, rank, fn, args, queue):
    try:
        ep = network.open_channels(rank)
        try:
            res = fn(ep, *args)
        finally:
            ep.close()
        queue.put((rank, True, res))
    except BaseException:
        queue.put((rank, False, traceback.format_exc()))


def run_processes(graph, fn, args=(), timeout=DEFAULT_TIMEOUT):
    """Run ``fn(endpoint, *args)`` on every rank as a forked OS process.

    Results must be picklable. Returns ``{rank: result}``.
    """
    ctx = multiprocessing.get_context("fork")
    network = SocketNetwork(graph, timeout=timeout)
    queue = ctx.Queue()
    procs = [ctx.Process(target=_child, args=(network, r, fn, args, queue))
             for r in range(graph.p)]
    for proc in procs:
        proc.start()
    results, failures = {}, []
    try:
        for _ in procs:
            rank, ok, value = queue.get()
            if ok:
                results[rank] = value
            else:
                failures.append((rank, value))
    finally:
        for proc in procs:
            proc.join()
        network.close()
    if failures:
        rank, tb = min(failures)
        raise ProtocolError(f"rank {rank} failed:\n{tb}")
    return results
