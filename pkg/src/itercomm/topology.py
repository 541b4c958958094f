"""Communication graphs, 3D domain partitioning and distributed spanning trees."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ConfigurationError, InfeasiblePartitionError, ProtocolError
from .transport.base import Envelope, Tag

_INVITE, _ACCEPT, _REJECT = b"I", b"A", b"R"


@dataclass(frozen=True)
class CommGraph:
    """Directed neighbor lists per rank (the logical network)."""

    out_neighbors: tuple
    in_neighbors: tuple

    def __post_init__(self):
        out = tuple(tuple(int(r) for r in row) for row in self.out_neighbors)
        inn = tuple(tuple(int(r) for r in row) for row in self.in_neighbors)
        object.__setattr__(self, "out_neighbors", out)
        object.__setattr__(self, "in_neighbors", inn)
        if len(out) != len(inn):
            raise ConfigurationError("out/in neighbor lists cover different process counts")
        p = len(out)
        for rank in range(p):
            for kind, row in (("out", out[rank]), ("in", inn[rank])):
                if len(set(row)) != len(row):
                    raise ConfigurationError(f"duplicate {kind}-neighbor at rank {rank}")
                for peer in row:
                    if not 0 <= peer < p:
                        raise ConfigurationError(
                            f"rank {rank} names {kind}-neighbor {peer} but p = {p}")
                    if peer == rank:
                        raise ConfigurationError(f"self-loop at rank {rank}")
        for rank in range(p):
            for peer in out[rank]:
                if rank not in inn[peer]:
                    raise ConfigurationError(
                        f"edge {rank}->{peer} missing from in-neighbors of {peer}")
            for peer in inn[rank]:
                if rank not in out[peer]:
                    raise ConfigurationError(
                        f"edge {peer}->{rank} missing from out-neighbors of {peer}")

    @classmethod
    def from_edges(cls, p, edges, symmetric=True):
        out = [set() for _ in range(p)]
        inn = [set() for _ in range(p)]
        for a, b in edges:
            if not (0 <= a < p and 0 <= b < p):
                raise ConfigurationError(f"edge ({a}, {b}) outside 0..{p - 1}")
            pairs = [(a, b), (b, a)] if symmetric else [(a, b)]
            for s, d in pairs:
                out[s].add(d)
                inn[d].add(s)
        return cls(tuple(tuple(sorted(r)) for r in out),
                   tuple(tuple(sorted(r)) for r in inn))

    @classmethod
    def from_neighbors(cls, neighbors: Sequence[Sequence[int]]):
        """Symmetric graph from one neighbor list per rank."""
        rows = tuple(tuple(r) for r in neighbors)
        return cls(rows, rows)

    @property
    def p(self):
        return len(self.out_neighbors)

    def edges(self):
        return {(s, d) for s, row in enumerate(self.out_neighbors) for d in row}

    def is_symmetric(self):
        return all(set(o) == set(i) for o, i in zip(self.out_neighbors, self.in_neighbors))

    def is_connected(self):
        if self.p == 0:
            return True
        seen = {0}
        stack = [0]
        while stack:
            v = stack.pop()
            for w in set(self.out_neighbors[v]) | set(self.in_neighbors[v]):
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == self.p


@dataclass(frozen=True)
class LocalTree:
    """What a single rank knows about the spanning tree."""

    rank: int
    parent: Optional[int]
    children: tuple

    @property
    def is_root(self):
        return self.parent is None

    @property
    def is_leaf(self):
        return not self.children


@dataclass(frozen=True)
class SpanningTree:
    root: int
    parent: tuple
    children: tuple

    @classmethod
    def from_parents(cls, parents):
        parents = tuple(None if q is None else int(q) for q in parents)
        roots = [r for r, q in enumerate(parents) if q is None]
        if len(roots) != 1:
            raise ProtocolError(f"expected exactly one root, found {roots}")
        children = [[] for _ in parents]
        for r, q in enumerate(parents):
            if q is not None:
                children[q].append(r)
        tree = cls(roots[0], parents, tuple(tuple(sorted(c)) for c in children))
        tree.validate()
        return tree

    @classmethod
    def from_local(cls, locals_):
        ordered = sorted(locals_, key=lambda t: t.rank)
        tree = cls.from_parents([t.parent for t in ordered])
        for t in ordered:
            if tuple(sorted(t.children)) != tree.children[t.rank]:
                raise ProtocolError(f"rank {t.rank} disagrees with its children's parent choice")
        return tree

    @property
    def p(self):
        return len(self.parent)

    def local(self, rank):
        return LocalTree(rank, self.parent[rank], self.children[rank])

    def edges(self):
        return {(q, r) for r, q in enumerate(self.parent) if q is not None}

    def validate(self, graph: Optional[CommGraph] = None):
        p = self.p
        if sum(q is None for q in self.parent) != 1:
            raise ProtocolError("spanning tree must have exactly one root")
        for r in range(p):
            # walking up must reach the root in fewer than p steps
            v, steps = r, 0
            while self.parent[v] is not None:
                v = self.parent[v]
                steps += 1
                if steps >= p:
                    raise ProtocolError(f"cycle through rank {r}")
        if graph is not None:
            g_edges = graph.edges()
            for q, r in self.edges():
                if (q, r) not in g_edges or (r, q) not in g_edges:
                    raise ProtocolError(f"tree edge {q}-{r} is not a graph edge")


def build_spanning_tree(endpoint, root=0):
    """Flood tree invitations from ``root`` and return this rank's ``LocalTree``.

    Every rank adopts the sender of the first invitation as its parent; among
    invitations that become visible at the same instant the lowest rank wins.
    Run concurrently on every rank of a symmetric connected graph.
    """
    rank = endpoint.rank
    neighbors = tuple(sorted(set(endpoint.out_peers)))
    if set(endpoint.in_peers) != set(neighbors):
        raise ConfigurationError("spanning tree construction needs a symmetric graph")
    pending = {peer: endpoint.post_recv(peer, tag=Tag.CONTROL) for peer in neighbors}

    def send(peer, kind):
        endpoint.post_send(peer, Envelope(Tag.CONTROL, kind))

    decided = rank == root
    parent = None
    invited = set()
    answered = {}
    if decided:
        invited = set(neighbors)
        for peer in neighbors:
            send(peer, _INVITE)

    while not decided or len(answered) < len(invited):
        endpoint.wait_any(list(pending.values()))
        batch = []
        for peer in neighbors:
            req = pending[peer]
            while endpoint.test(req):
                batch.append((peer, req.payload))
                req = pending[peer] = endpoint.post_recv(peer, tag=Tag.CONTROL)
        inviters = sorted(peer for peer, kind in batch if kind == _INVITE)
        if inviters and not decided:
            parent = inviters[0]
            decided = True
            send(parent, _ACCEPT)
            invited = set(neighbors) - {parent}
            for peer in sorted(invited):
                send(peer, _INVITE)
            inviters = inviters[1:]
        for peer in inviters:
            send(peer, _REJECT)
        for peer, kind in batch:
            if kind in (_ACCEPT, _REJECT):
                if peer not in invited or peer in answered:
                    raise ProtocolError(f"rank {rank}: unexpected tree reply from {peer}")
                answered[peer] = kind

    for req in pending.values():
        endpoint.cancel(req)
    children = tuple(sorted(p for p, kind in answered.items() if kind == _ACCEPT))
    return LocalTree(rank, parent, children)


@dataclass(frozen=True)
class Partition3D:
    """Block decomposition of an ``nx*ny*nz`` grid over a ``px*py*pz`` process grid."""

    shape: tuple
    grid: tuple

    def __post_init__(self):
        for n, q in zip(self.shape, self.grid):
            if q < 1 or q > n:
                raise InfeasiblePartitionError(f"cannot split {n} points into {q} parts")

    @property
    def p(self):
        px, py, pz = self.grid
        return px * py * pz

    def splits(self, axis):
        """Start offsets of the blocks along ``axis`` (length parts + 1)."""
        n, q = self.shape[axis], self.grid[axis]
        base, extra = divmod(n, q)
        offsets = [0]
        for i in range(q):
            offsets.append(offsets[-1] + base + (1 if i < extra else 0))
        return offsets

    def coords(self, rank):
        px, py, _ = self.grid
        return rank % px, (rank // px) % py, rank // (px * py)

    def rank_of(self, ix, iy, iz):
        px, py, _ = self.grid
        return ix + px * (iy + py * iz)

    def box(self, rank):
        """``((x0, x1), (y0, y1), (z0, z1))`` half-open index ranges owned by ``rank``."""
        c = self.coords(rank)
        out = []
        for axis in range(3):
            s = self.splits(axis)
            out.append((s[c[axis]], s[c[axis] + 1]))
        return tuple(out)

    def box_shape(self, rank):
        return tuple(b - a for a, b in self.box(rank))

    def face_neighbors(self, rank):
        """``{(axis, side): neighbor_rank}`` with side -1 (low) or +1 (high)."""
        c = list(self.coords(rank))
        out = {}
        for axis in range(3):
            for side in (-1, 1):
                d = list(c)
                d[axis] += side
                if 0 <= d[axis] < self.grid[axis]:
                    out[(axis, side)] = self.rank_of(*d)
        return out


def _surface(shape, grid):
    nx, ny, nz = shape
    px, py, pz = grid
    return (px - 1) * ny * nz + (py - 1) * nx * nz + (pz - 1) * nx * ny


def build_partition(nx, ny, nz, p):
    """Choose the process grid with the least cut surface (ties: larger x, then y)."""
    shape = (int(nx), int(ny), int(nz))
    if p < 1:
        raise InfeasiblePartitionError("process count must be positive")
    if p > shape[0] * shape[1] * shape[2]:
        raise InfeasiblePartitionError(f"{p} processes exceed {shape[0] * shape[1] * shape[2]} grid points")
    best = None
    for px in range(1, p + 1):
        if p % px:
            continue
        for py in range(1, p // px + 1):
            if (p // px) % py:
                continue
            grid = (px, py, p // (px * py))
            if any(q > n for q, n in zip(grid, shape)):
                continue
            key = (_surface(shape, grid), -grid[0], -grid[1])
            if best is None or key < best[0]:
                best = (key, grid)
    if best is None:
        raise InfeasiblePartitionError(f"no {p}-way process grid fits grid {shape}")
    return Partition3D(shape, best[1])


def partition_to_graph(partition):
    rows = []
    for rank in range(partition.p):
        rows.append(tuple(sorted(partition.face_neighbors(rank).values())))
    return CommGraph.from_neighbors(rows)


def line_graph(p):
    return CommGraph.from_edges(p, [(i, i + 1) for i in range(p - 1)])


def star_graph(p, center=0):
    return CommGraph.from_edges(p, [(center, i) for i in range(p) if i != center])


def grid_graph(rows, cols):
    edges = []
    for r, c in itertools.product(range(rows), range(cols)):
        v = r * cols + c
        if c + 1 < cols:
            edges.append((v, v + 1))
        if r + 1 < rows:
            edges.append((v, v + cols))
    return CommGraph.from_edges(rows * cols, edges)
