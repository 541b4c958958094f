from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itercomm.errors import ConfigurationError, DiscretizationError, InfeasiblePartitionError
from itercomm.harness import RunConfig, assemble, simulate
from itercomm.solver import (LocalBlock, ProblemSpec, apply_stencil, assemble_matrix, discretize,
                             jacobi_dense_step, jacobi_local_step, residual_norm,
                             sequential_oracle, sequential_time_steps)
from itercomm.topology import build_partition


def exact_spec(n=3, a=(0, 0, 0), nu=Fraction(1, 2), dt=Fraction(1, 100)):
    return ProblemSpec(nu=nu, a=tuple(Fraction(x) for x in a), dt=dt, n=n)


class TestDiscretize:
    def test_pure_diffusion(self):
        s = discretize(exact_spec())
        # h = 1/4, nu/h^2 = 8
        assert s.h == Fraction(1, 4)
        assert s.d == 148
        assert set(s.coef.values()) == {-8}

    def test_convection_splits_coefficients(self):
        s = discretize(exact_spec(a=(Fraction(1, 10), 0, 0)))
        # convection contributes a / (2 h) = 0.2
        assert s.coef[(0, -1)] == Fraction(-41, 5)
        assert s.coef[(0, 1)] == Fraction(-39, 5)
        assert s.coef[(1, -1)] == s.coef[(1, 1)] == -8

    @pytest.mark.parametrize("n", [2, 3, 5, 10, 30])
    def test_exact_dominance_margin(self, n):
        s = discretize(exact_spec(n=n, a=(Fraction(1, 10), Fraction(-1, 5), Fraction(3, 10))))
        assert s.d - s.off_diagonal_sum() == 1 / s.dt

    def test_cell_peclet_violation(self):
        with pytest.raises(DiscretizationError):
            discretize(ProblemSpec(nu=0.01, a=(10.0, 0.0, 0.0), n=3))

    def test_default_problem_is_well_posed(self):
        s = discretize(ProblemSpec())
        assert s.d > s.off_diagonal_sum()

    @pytest.mark.parametrize("kwargs", [dict(nu=0), dict(dt=-1), dict(n=1), dict(a=(1, 2)),
                                        dict(time_steps=-1)])
    def test_spec_validation(self, kwargs):
        with pytest.raises(ConfigurationError):
            ProblemSpec(**kwargs)


class TestAssembly:
    @pytest.mark.parametrize("n", [2, 3])
    def test_dense_matches_stencil(self, n):
        s = discretize(ProblemSpec(n=n))
        A = assemble_matrix(s)
        rng = np.random.default_rng(n)
        for _ in range(5):
            u = rng.normal(size=n ** 3)
            np.testing.assert_allclose(A @ u, apply_stencil(s, u), rtol=0, atol=1e-9)

    def test_row_structure_n2(self):
        s = discretize(exact_spec(n=2))
        A = assemble_matrix(s).toarray()
        # every node in a 2^3 grid has exactly 3 neighbors
        assert all(np.count_nonzero(A[i]) == 4 for i in range(8))
        np.testing.assert_array_equal(np.diag(A), np.full(8, float(s.d)))

    def test_refuses_large(self):
        with pytest.raises(ConfigurationError):
            assemble_matrix(discretize(ProblemSpec(n=21)))


class TestJacobi:
    A = np.array([[2.0, -1.0], [-1.0, 2.0]])
    b = np.array([3.0, 3.0])

    def test_one_sweep(self):
        x, upd = jacobi_dense_step(self.A, self.b, np.zeros(2))
        np.testing.assert_array_equal(x, [1.5, 1.5])
        np.testing.assert_array_equal(upd, [1.5, 1.5])
        assert residual_norm(self.A, np.zeros(2), self.b) == 3.0

    def test_distance_halves(self):
        x = np.zeros(2)
        for _ in range(2):
            x, _ = jacobi_dense_step(self.A, self.b, x)
        np.testing.assert_array_equal(x, [2.25, 2.25])
        np.testing.assert_array_equal(np.array([3.0, 3.0]) - x, [0.75, 0.75])

    def test_fixed_point(self):
        x, upd = jacobi_dense_step(self.A, self.b, np.array([3.0, 3.0]))
        np.testing.assert_array_equal(upd, 0)
        assert residual_norm(self.A, x, self.b) == 0

    def test_monotone_contraction(self):
        s = discretize(ProblemSpec(n=4))
        B = s.rhs(np.zeros(s.m))
        run = sequential_oracle(s, B, np.zeros(s.m), iterations=30)
        assert all(b < a for a, b in zip(run.residuals, run.residuals[1:]))

    def test_threshold_stop(self):
        s = discretize(ProblemSpec(n=4))
        B = s.rhs(np.zeros(s.m))
        run = sequential_oracle(s, B, np.zeros(s.m), threshold=1e-6)
        assert run.residuals[-1] < 1e-6 <= run.residuals[-2]
        assert run.iterations == len(run.residuals)


def test_local_step_full_box_matches_dense():
    s = discretize(ProblemSpec(n=3))
    A = assemble_matrix(s)
    rng = np.random.default_rng(1)
    u = rng.normal(size=27)
    B = rng.normal(size=27)
    u_new, res = jacobi_local_step(u.reshape(3, 3, 3), {}, B.reshape(3, 3, 3), s)
    x_ref, upd_ref = jacobi_dense_step(A, B, u)
    np.testing.assert_allclose(u_new.ravel(), x_ref, atol=1e-12)
    np.testing.assert_allclose(res.ravel(), B - A @ u, atol=1e-12)
    np.testing.assert_allclose(res.ravel(), float(s.d) * upd_ref, atol=1e-11)
    _, upd = jacobi_local_step(u.reshape(3, 3, 3), {}, B.reshape(3, 3, 3), s, criterion="update")
    np.testing.assert_allclose(upd.ravel(), upd_ref, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 5), p=st.sampled_from([2, 3, 4, 8]), seed=st.integers(0, 1000))
def test_split_step_equals_global_step(n, p, seed):
    """Stitching per-box sweeps with exact halos reproduces one global sweep."""
    s = discretize(ProblemSpec(n=n))
    try:
        part = build_partition(n, n, n, p)
    except InfeasiblePartitionError:
        return
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, n, n))
    B = rng.normal(size=(n, n, n))
    ref, _ = jacobi_dense_step(assemble_matrix(s), B.ravel(), u.ravel())
    out = np.zeros((n, n, n))
    for r in range(p):
        block = LocalBlock(part, r, s)
        sl = block.global_slices()
        halos = {}
        for axis, side in block.faces.values():
            face = list(sl)
            (a0, a1) = block.box[axis]
            face[axis] = a1 if side > 0 else a0 - 1
            halos[(axis, side)] = u[tuple(face)]
        u_new, _ = jacobi_local_step(u[sl], halos, B[sl], s)
        out[sl] = u_new
    np.testing.assert_allclose(out.ravel(), ref, atol=1e-12)


# -- distributed runs against the sequential reference ---------------------------

def sync_config(**kw):
    base = dict(p=2, n=4, scheme="overlap", time_steps=2, threshold=1e-6)
    base.update(kw)
    return RunConfig(**base)


def oracle_trajectories(config):
    """Per-step sequential iterates and residuals starting from the zero state."""
    s = discretize(config.problem())
    A = assemble_matrix(s)
    U = np.zeros(s.m)
    runs = []
    for _ in range(config.time_steps):
        run = sequential_oracle(s, s.rhs(U), U, threshold=config.threshold, A=A)
        runs.append(run)
        U = run.solution
    return runs


def distributed_iterates(results, config, runs):
    """Global iterate sequence (one per sweep, all steps concatenated) from recorded histories."""
    n = config.n
    total = sum(r.iterations for r in runs)
    out = [np.zeros((n, n, n)) for _ in range(total)]
    for res in results.values():
        sl = tuple(slice(a, b) for a, b in res.box)
        assert len(res.history) == total
        for k, u in enumerate(res.history):
            out[k][sl] = u
    return [o.ravel() for o in out]


@pytest.mark.parametrize("scheme", ["trivial", "overlap"])
@pytest.mark.parametrize("p", [1, 2, 4])
def test_sync_trajectory_matches_oracle(scheme, p):
    config = sync_config(scheme=scheme, p=p)
    runs = oracle_trajectories(config)
    results, _ = simulate(config, record=True)
    for r, res in results.items():
        assert [m.iterations for m in res.metrics] == [run.iterations for run in runs]
    got = distributed_iterates(results, config, runs)
    want = [x for run in runs for x in run.iterates[1:]]
    for g, w in zip(got, want):
        assert np.max(np.abs(g - w)) <= 1e-12


def test_iteration_counts_match_sequential_time_steps():
    config = sync_config(p=8, n=6, time_steps=3)
    ref = sequential_time_steps(config.problem(), config.threshold)
    results, _ = simulate(config)
    assert [m.iterations for m in results[0].metrics] == [k for k, _, _ in ref]
    U = assemble(results, config.n)
    assert np.max(np.abs(U - ref[-1][1])) <= 1e-12


def test_zero_time_steps():
    results, _ = simulate(sync_config(time_steps=0))
    assert all(res.metrics == [] for res in results.values())


def test_async_close_to_oracle():
    thr = 1e-6
    config = RunConfig(p=4, n=6, scheme="async", threshold=thr, time_steps=3, slowdown_max=4.0,
                       seed=3)
    ref = sequential_time_steps(config.problem(), thr)
    results, _ = simulate(config)
    assert all(res.error is None for res in results.values())
    for step, (_, U_ref, _) in enumerate(ref):
        U = assemble(results, config.n, "u", step)
        assert np.max(np.abs(U - U_ref)) < 10 * thr
