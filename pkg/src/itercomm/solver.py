"""Backward-Euler convection-diffusion on the unit cube, solved by (asynchronous) Jacobi.

Each time step solves ``A U^n = B^n`` with ``B^n = U^{n-1} / dt + s`` on an
``n^3`` grid of interior points, ``h = 1 / (n + 1)`` and homogeneous Dirichlet
boundaries. The 7-point stencil uses central differences for both the
diffusion and the convection term.

By default the residual block produced by a local Jacobi step is
``B - A u_old``, i.e. the Jacobi update ``u_new - u_old`` scaled by the
diagonal, so the stopping threshold bounds the algebraic residual directly.
``criterion="update"`` uses the raw update difference instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .comm import run_scheme
from .errors import ConfigurationError, DiscretizationError

AXES = (0, 1, 2)
SIDES = (-1, 1)
MAX_ORACLE_N = 20
CRITERIA = ("residual", "update")


@dataclass(frozen=True)
class ProblemSpec:
    nu: float = 0.5
    a: tuple = (0.1, -0.2, 0.3)
    dt: float = 0.01
    n: int = 10
    time_steps: int = 5
    source: float = 1.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigurationError("diffusion coefficient must be positive")
        if not self.dt > 0:
            raise ConfigurationError("time step must be positive")
        if self.n < 2:
            raise ConfigurationError("need at least 2 interior points per axis")
        if len(self.a) != 3:
            raise ConfigurationError("convection velocity needs 3 components")
        if self.time_steps < 0:
            raise ConfigurationError("time_steps must be non-negative")


@dataclass(frozen=True)
class DiscreteSystem:
    """Constant-coefficient stencil: ``d`` on the diagonal, ``coef[(axis, side)]`` off it."""

    n: int
    h: object
    dt: object
    source: object
    d: object
    coef: dict = field(hash=False)

    @property
    def m(self):
        return self.n ** 3

    def off_diagonal_sum(self):
        return sum(abs(c) for c in self.coef.values())

    def rhs(self, u_prev):
        return np.asarray(u_prev, dtype=float) / float(self.dt) + float(self.source)


def discretize(spec):
    """Stencil coefficients for ``spec``.

    Arithmetic stays in the type of the inputs, so passing ``Fraction`` values
    gives exact coefficients.
    """
    n = spec.n
    h = 1 / type(spec.nu)(n + 1) if not isinstance(spec.nu, float) else 1.0 / (n + 1)
    diff = spec.nu / (h * h)
    coef = {}
    for axis in AXES:
        a_i = spec.a[axis]
        if abs(a_i) * h / 2 >= spec.nu:
            raise DiscretizationError(
                f"|a[{axis}]| h / 2 = {abs(a_i) * h / 2} >= nu = {spec.nu}: "
                "off-diagonal sign flip, refine the grid (larger n)")
        conv = a_i / (2 * h)
        coef[(axis, -1)] = -diff - conv
        coef[(axis, 1)] = -diff + conv
    d = 1 / spec.dt + 6 * diff
    system = DiscreteSystem(n, h, spec.dt, spec.source, d, coef)
    if not d > system.off_diagonal_sum():
        raise DiscretizationError("stencil is not strictly diagonally dominant")
    return system


def _shifted(U, axis, side):
    """View of the padded array ``U`` shifted one cell along ``axis``."""
    sl = [slice(1, -1)] * 3
    sl[axis] = slice(2, None) if side > 0 else slice(None, -2)
    return U[tuple(sl)]


def apply_stencil(system, u):
    """``A u`` for a full ``n^3`` grid (zero Dirichlet boundary)."""
    u = np.asarray(u, dtype=float).reshape((system.n,) * 3)
    U = np.pad(u, 1)
    out = float(system.d) * u
    for (axis, side), c in system.coef.items():
        out = out + float(c) * _shifted(U, axis, side)
    return out.ravel()


def assemble_matrix(system):
    """Sparse global matrix assembled node by node, independently of the stencil code."""
    n = system.n
    if n > MAX_ORACLE_N:
        raise ConfigurationError(f"refusing to assemble n = {n} > {MAX_ORACLE_N}")
    rows, cols, vals = [], [], []
    idx = lambda i, j, k: (i * n + j) * n + k  # noqa: E731
    for i in range(n):
        for j in range(n):
            for k in range(n):
                r = idx(i, j, k)
                rows.append(r)
                cols.append(r)
                vals.append(float(system.d))
                node = [i, j, k]
                for (axis, side), c in system.coef.items():
                    nb = list(node)
                    nb[axis] += side
                    if 0 <= nb[axis] < n:
                        rows.append(r)
                        cols.append(idx(*nb))
                        vals.append(float(c))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n ** 3, n ** 3))


def residual_norm(A, U, B):
    """``||A U - B||_inf``."""
    return float(np.max(np.abs(A @ np.asarray(U).ravel() - np.asarray(B).ravel())))


def jacobi_dense_step(A, b, x):
    """One Jacobi sweep on an explicit matrix; returns ``(x_new, x_new - x)``."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    diag = np.diag(A)
    x = np.asarray(x, dtype=float)
    x_new = (b - (A @ x - diag * x)) / diag
    return x_new, x_new - x


@dataclass
class OracleRun:
    iterates: list
    residuals: list
    iterations: int

    @property
    def solution(self):
        return self.iterates[-1]


def sequential_oracle(system, B, x0, threshold=None, iterations=None, max_iterations=100_000,
                      record=True, A=None):
    """Synchronous Jacobi on the assembled matrix.

    Runs exactly ``iterations`` sweeps, or until ``||B - A x^k||_inf`` drops
    below ``threshold`` (that sweep's ``x^{k+1}`` is kept, matching the
    distributed loop).
    """
    if A is None:
        A = assemble_matrix(system)
    diag = A.diagonal()
    off = A - sp.diags(diag)
    x = np.asarray(x0, dtype=float).ravel().copy()
    B = np.asarray(B, dtype=float).ravel()
    iterates = [x.copy()] if record else []
    residuals = []
    k = 0
    while True:
        if iterations is not None and k >= iterations:
            break
        if k >= max_iterations:
            raise ConfigurationError(f"oracle did not converge in {max_iterations} sweeps")
        res = B - (diag * x + off @ x)
        x = (B - off @ x) / diag
        k += 1
        residuals.append(float(np.max(np.abs(res))))
        if record:
            iterates.append(x.copy())
        if threshold is not None and residuals[-1] < threshold:
            break
    if not record:
        iterates = [x]
    return OracleRun(iterates, residuals, k)


def sequential_time_steps(spec, threshold, system=None):
    """Per-step iteration counts and solutions of the sequential reference."""
    system = system or discretize(spec)
    A = assemble_matrix(system)
    U = np.zeros(system.m)
    out = []
    for _ in range(spec.time_steps):
        B = system.rhs(U)
        run = sequential_oracle(system, B, U, threshold=threshold, record=False, A=A)
        U = run.solution
        out.append((run.iterations, U.copy(), B))
    return out


def jacobi_local_step(u_old, halos, B, system, criterion="residual", workspace=None):
    """Jacobi sweep over one owned box.

    ``u_old`` and ``B`` have the box shape; ``halos`` maps ``(axis, side)`` to
    the neighbor's face values (missing faces lie on the Dirichlet boundary).
    Returns ``(u_new, residual)`` with ``residual = B - A u_old``, or
    ``u_new - u_old`` for ``criterion="update"``. ``workspace`` is an optional
    zero-bordered array of the padded shape reused across calls.
    """
    if workspace is None:
        U = np.pad(u_old, 1)
    else:
        U = workspace
        U[1:-1, 1:-1, 1:-1] = u_old
    for (axis, side), face in halos.items():
        sl = [slice(1, -1)] * 3
        sl[axis] = -1 if side > 0 else 0
        U[tuple(sl)] = face
    acc = B.copy()
    for (axis, side), c in system.coef.items():
        acc -= float(c) * _shifted(U, axis, side)
    d = float(system.d)
    u_new = acc / d
    if criterion == "update":
        return u_new, u_new - u_old
    return u_new, acc - d * u_old


def face_of(u, axis, side):
    sl = [slice(None)] * 3
    sl[axis] = -1 if side > 0 else 0
    return u[tuple(sl)]


class LocalBlock:
    """One rank's sub-box: solution, right-hand side, link buffers and halos."""

    def __init__(self, partition, rank, system, u0=None, criterion="residual", record=False):
        if criterion not in CRITERIA:
            raise ConfigurationError(f"unknown stopping criterion {criterion!r}")
        self.criterion = criterion
        self.history = [] if record else None
        self.partition = partition
        self.rank = rank
        self.system = system
        self.box = partition.box(rank)
        self.shape = partition.box_shape(rank)
        self.faces = {peer: key for key, peer in partition.face_neighbors(rank).items()}
        self.neighbors = tuple(sorted(self.faces))
        size = int(np.prod(self.shape))
        self.u0 = np.zeros(size) if u0 is None else np.asarray(u0, dtype=float).ravel().copy()
        self.B = np.zeros(self.shape)
        self._work = np.zeros(tuple(s + 2 for s in self.shape))

    @property
    def size(self):
        return int(np.prod(self.shape))

    def face_shape(self, peer):
        axis, _ = self.faces[peer]
        return tuple(s for a, s in enumerate(self.shape) if a != axis)

    def make_buffers(self):
        u = self.u0.reshape(self.shape)
        send_buf = [np.ascontiguousarray(face_of(u, *self.faces[p])).ravel().copy()
                    for p in self.neighbors]
        recv_buf = [np.zeros(int(np.prod(self.face_shape(p)))) for p in self.neighbors]
        return send_buf, recv_buf

    def set_rhs(self, u_prev):
        self.B = self.system.rhs(np.asarray(u_prev).reshape(self.shape))

    def update(self, comm):
        """Computation phase: reads recv/sol buffers, writes sol/send/res buffers."""
        u_old = comm.sol_vec_buf.reshape(self.shape)
        halos = {}
        for peer, j in comm.in_index.items():
            halos[self.faces[peer]] = comm.recv_buf[j].reshape(self.face_shape(peer))
        u_new, residual = jacobi_local_step(u_old, halos, self.B, self.system, self.criterion,
                                            self._work)
        comm.sol_vec_buf[...] = u_new.ravel()
        if self.history is not None:
            self.history.append(u_new.copy())
        comm.res_vec_buf[...] = residual.ravel()
        for i, peer in enumerate(comm.out_peers):
            comm.send_buf[i][...] = face_of(u_new, *self.faces[peer]).ravel()

    def global_slices(self):
        return tuple(slice(a, b) for a, b in self.box)


@dataclass
class StepMetrics:
    step: int
    iterations: int
    start: float
    end: float
    snapshots: int = 0
    failed_rounds: int = 0
    u: object = None
    B: object = None

    @property
    def elapsed(self):
        return self.end - self.start


def time_step_loop(comm, block, spec, threshold, work_per_node=1.0, max_iterations=100_000,
                   metrics=None):
    """Run ``spec.time_steps`` backward-Euler steps on this rank; return ``StepMetrics`` per step.

    The communicator must already be initialized over ``block``'s buffers.
    The first solve primes the links; later solves warm-start from the previous
    step's solution and reuse the halo messages already in flight. Finished
    steps are appended to ``metrics`` as they complete, so a caller that
    passes its own list keeps them when a later step fails.
    """
    metrics = [] if metrics is None else metrics
    det = comm.detector
    for step in range(spec.time_steps):
        block.set_rhs(comm.sol_vec_buf)
        comm.reset_residual()
        snaps0 = det.snapshots if det else 0
        failed0 = det.failed_rounds if det else 0
        start = comm.endpoint.now()
        k = run_scheme(comm, block.update, prime=(step == 0),
                       work=work_per_node * block.size, max_iterations=max_iterations)
        metrics.append(StepMetrics(
            step, k, start, comm.endpoint.now(),
            snapshots=(det.snapshots - snaps0) if det else 0,
            failed_rounds=(det.failed_rounds - failed0) if det else 0,
            u=comm.sol_vec_buf.copy(), B=block.B.ravel().copy()))
    return metrics
