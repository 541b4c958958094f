"""Shared builders for the test-suite: small scalar problems and scripted scenarios."""
import numpy as np

from itercomm import Communicator
from itercomm.comm import run_scheme
from itercomm.topology import CommGraph
from itercomm.transport.sim import DelayModel, SimNetwork


def make_comm(ep, init_sol, init_recv, q=0.5, threshold=1e-6, sizes=None):
    """Communicator over one-element buffers per link (or ``sizes[peer]`` elements)."""
    peers = tuple(sorted(ep.out_peers))
    sizes = sizes or {}
    send_buf = [np.full(sizes.get(p, 1), float(init_sol[0])) for p in peers]
    recv_buf = [np.full(sizes.get(p, 1), float(init_recv.get(p, 0.0))) for p in peers]
    comm = Communicator(ep)
    comm.init_graph(peers, peers)
    comm.init_buffers(send_buf, recv_buf)
    comm.init_residual(np.zeros(len(init_sol)), q, threshold)
    comm.config_async(np.array(init_sol, dtype=float), False, recv_buf)
    return comm


def affine_update(coupling, const):
    """Scalar block map ``x_i <- const[i] + sum_j coupling[i][j] x_j``, residual ``f(x) - x``."""
    def update(comm):
        i = comm.endpoint.rank
        x = const[i]
        for peer, j in comm.in_index.items():
            x += coupling[i].get(peer, 0.0) * float(comm.recv_buf[j][0])
        old = float(comm.sol_vec_buf[0])
        comm.sol_vec_buf[0] = x
        comm.res_vec_buf[0] = x - old
        for k in range(len(comm.send_buf)):
            comm.send_buf[k][0] = x
    return update


def affine_fixed_point(coupling, const):
    p = len(const)
    M = np.zeros((p, p))
    for i, row in enumerate(coupling):
        for j, c in row.items():
            M[i, j] = c
    return np.linalg.solve(np.eye(p) - M, np.asarray(const, dtype=float))


# -- the stale-message adversarial scenario ----------------------------------
#
# Triangle graph, root 0 with children 1 and 2. The maps chain 0 -> 1 -> 2:
#   f0 = c0,  f1 = c1 + x0 / 2,  f2 = c2 + x1 / 2.
# Rank 1 starts E away from its fixed value and rank 2 starts locally
# converged against that wrong value. Link 1 -> 2 is slow, so rank 1's
# priming message (carrying the E-error value) is still in flight when every
# flag has armed and the root triggers. The first snapshot therefore pairs
# rank 2's block with rank 1's corrected block and must fail.

STALE_E = 1.0
STALE_LATENCY = 100.0
STALE_CONST = (1.0, 0.5, 0.25)
STALE_COUPLING = ({}, {0: 0.5}, {1: 0.5})


def stale_scenario(threshold=1e-6, seed=0, error=STALE_E):
    graph = CommGraph.from_edges(3, [(0, 1), (0, 2), (1, 2)])
    xs = affine_fixed_point(STALE_COUPLING, STALE_CONST)
    wrong1 = xs[1] + error
    init = {0: xs[0], 1: wrong1, 2: STALE_CONST[2] + 0.5 * wrong1}
    views = {0: {1: wrong1, 2: init[2]}, 1: {0: xs[0], 2: init[2]}, 2: {0: xs[0], 1: wrong1}}
    delay = DelayModel(latency=1.0, link_latency={(1, 2): STALE_LATENCY}, seed=seed)
    net = SimNetwork(graph, delay)
    update = affine_update(STALE_COUPLING, STALE_CONST)

    def proc(ep):
        comm = make_comm(ep, [init[ep.rank]], views[ep.rank], threshold=threshold)
        comm.switch_async(2)
        k = run_scheme(comm, update, max_iterations=10_000)
        return comm, k

    out = net.run(proc)
    return net, out, xs
