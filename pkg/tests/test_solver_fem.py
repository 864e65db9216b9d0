"""Tests for the bilinear-element diffusion backend and Strang splitting."""

import numpy as np
import numpy.testing as npt
import pytest

from epidiffuse.errors import DimensionError, ParameterError
from epidiffuse.grid import FieldSet, GridSpec
from epidiffuse.models import ModelKind, RateSchedule, reaction
from epidiffuse.solver_cn import run_from_state
from epidiffuse.solver_fem import (
    FemAssembly,
    assemble_fem,
    element_mass,
    element_stiffness,
    run_fem_from_state,
    strang_step,
)

SCHED = RateSchedule((0.2, 0.1, 0.3), (10.0, 20.0), 40.0)


def quadrature_element_matrices(hx, hy):
    """Element matrices by 3x3 Gauss quadrature of the shape functions.

    The shape functions are evaluated symbolically as products of 1-D hat
    functions; 3-point Gauss integrates the (at most biquadratic) integrands
    exactly, so this is an independent check of the closed forms.
    """
    pts, wts = np.polynomial.legendre.leggauss(3)
    xs = 0.5 * hx * (pts + 1.0)
    ys = 0.5 * hy * (pts + 1.0)
    wx = 0.5 * hx * wts
    wy = 0.5 * hy * wts

    def shapes(x, y):
        gx = np.array([1.0 - x / hx, x / hx])
        gy = np.array([1.0 - y / hy, y / hy])
        dgx = np.array([-1.0 / hx, 1.0 / hx])
        dgy = np.array([-1.0 / hy, 1.0 / hy])
        phi = np.kron(gx, gy)
        dphi_dx = np.kron(dgx, gy)
        dphi_dy = np.kron(gx, dgy)
        return phi, dphi_dx, dphi_dy

    me = np.zeros((4, 4))
    ke = np.zeros((4, 4))
    for x, ax in zip(xs, wx):
        for y, ay in zip(ys, wy):
            phi, dx_, dy_ = shapes(x, y)
            me += ax * ay * np.outer(phi, phi)
            ke += ax * ay * (np.outer(dx_, dx_) + np.outer(dy_, dy_))
    return me, ke


def assemble_dense_reference(grid):
    """Scalar-loop global assembly over elements, for small grids."""
    me = element_mass(grid.hx, grid.hy)
    ke = element_stiffness(grid.hx, grid.hy)
    n = grid.n_cells
    M = np.zeros((n, n))
    K = np.zeros((n, n))
    for iy in range(grid.ny - 1):
        for jx in range(grid.nx - 1):
            base = iy * grid.nx + jx
            gidx = [base, base + grid.nx, base + 1, base + grid.nx + 1]
            for a in range(4):
                for b in range(4):
                    M[gidx[a], gidx[b]] += me[a, b]
                    K[gidx[a], gidx[b]] += ke[a, b]
    return M, K


class TestElementMatrices:
    def test_unit_cell_mass(self):
        expected = np.array(
            [[4, 2, 2, 1], [2, 4, 1, 2], [2, 1, 4, 2], [1, 2, 2, 4]]
        ) / 36.0
        npt.assert_allclose(element_mass(1.0, 1.0), expected, atol=1e-15)

    def test_matches_quadrature(self):
        for hx, hy in ((1.0, 1.0), (0.5, 0.25), (1.3, 0.7)):
            me_ref, ke_ref = quadrature_element_matrices(hx, hy)
            npt.assert_allclose(element_mass(hx, hy), me_ref, atol=1e-14)
            npt.assert_allclose(element_stiffness(hx, hy), ke_ref, atol=1e-13)

    def test_mass_total_is_cell_area(self):
        assert element_mass(0.3, 0.8).sum() == pytest.approx(0.24)

    def test_stiffness_annihilates_constants(self):
        ke = element_stiffness(0.5, 0.7)
        npt.assert_allclose(ke @ np.ones(4), 0.0, atol=1e-14)
        npt.assert_allclose(ke, ke.T, atol=1e-15)
        assert np.linalg.eigvalsh(ke).min() > -1e-12


class TestGlobalAssembly:
    def test_matches_dense_reference(self):
        grid = GridSpec(4, 3, 1.2, 0.9)
        asm = assemble_fem(grid)
        M_ref, K_ref = assemble_dense_reference(grid)
        npt.assert_allclose(asm.mass.toarray(), M_ref, atol=1e-14)
        npt.assert_allclose(asm.stiffness.toarray(), K_ref, atol=1e-13)

    def test_conservation_identities(self):
        grid = GridSpec(7, 6, 1.5, 1.1)
        asm = assemble_fem(grid)
        ones = np.ones(grid.n_cells)
        npt.assert_allclose(asm.stiffness @ ones, 0.0, atol=1e-12)
        assert ones @ (asm.mass @ ones) == pytest.approx(grid.Lx * grid.Ly, rel=1e-12)

    def test_mass_is_positive_definite(self):
        rng = np.random.default_rng(6)
        grid = GridSpec(6, 5, 1.0, 1.0)
        asm = assemble_fem(grid)
        for _ in range(20):
            x = rng.normal(size=grid.n_cells)
            assert x @ (asm.mass @ x) > 0.0

    def test_lam_max_matches_dense_eigenvalue(self):
        grid = GridSpec(6, 5, 1.0, 0.8)
        asm = assemble_fem(grid)
        M_ref, K_ref = assemble_dense_reference(grid)
        w = np.linalg.eigvals(np.linalg.solve(M_ref, K_ref))
        assert asm.lam_max == pytest.approx(float(w.real.max()), rel=1e-8)

    def test_mass_solve_inverts(self):
        rng = np.random.default_rng(8)
        grid = GridSpec(5, 5, 1.0, 1.0)
        asm = assemble_fem(grid)
        rhs = rng.normal(size=(grid.n_cells, 2))
        npt.assert_allclose(asm.mass @ asm.mass_solve(rhs), rhs, atol=1e-12)


def smooth_state(grid, m):
    x = np.linspace(0.0, grid.Lx, grid.nx)
    y = np.linspace(0.0, grid.Ly, grid.ny)
    X, Y = np.meshgrid(x, y)
    cx = 0.5 * (1.0 + np.cos(np.pi * X / grid.Lx))
    cy = 0.5 * (1.0 + np.cos(np.pi * Y / grid.Ly))
    bump = 0.01 + 0.04 * cx * cy
    u0 = np.zeros((m,) + grid.shape)
    u0[-1] = bump
    if m == 3:
        u0[1] = 0.5 * bump
    u0[0] = 1.0 - u0.sum(axis=0)
    return u0


class TestSplitStepping:
    def test_pure_reaction_when_kappa_zero(self):
        """With kappa = 0 one split step is exactly one RK4 reaction step."""
        grid = GridSpec(4, 4, 1.0, 1.0)
        asm = assemble_fem(grid)
        u0 = smooth_state(grid, 3)
        out = strang_step(
            asm, FieldSet(("S", "E", "I"), u0.copy(), time=2.0),
            ModelKind.SEIR, SCHED, 0.0, 0.5,
        )
        tau, t = 0.5, 2.0
        k1 = reaction(ModelKind.SEIR, u0, t, SCHED)
        k2 = reaction(ModelKind.SEIR, u0 + 0.5 * tau * k1, t + 0.25, SCHED)
        k3 = reaction(ModelKind.SEIR, u0 + 0.5 * tau * k2, t + 0.25, SCHED)
        k4 = reaction(ModelKind.SEIR, u0 + tau * k3, t + 0.5, SCHED)
        expected = u0 + (tau / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        npt.assert_allclose(out.data, expected, atol=1e-14)
        assert out.time == pytest.approx(2.5)

    def test_weak_mass_is_conserved(self):
        """1^T M u stays constant under the full split flow of a closed model."""
        grid = GridSpec(9, 8, 1.0, 1.0)
        asm = assemble_fem(grid)
        fields = FieldSet(("S", "E", "I"), smooth_state(grid, 3))
        ones = np.ones(grid.n_cells)
        total0 = sum(ones @ (asm.mass @ fields.data[i].ravel()) for i in range(3))
        for _ in range(10):
            fields = strang_step(asm, fields, ModelKind.SEIR, SCHED, 0.2, 0.25)
        # SEIR loses gamma * I; run the same check on the susceptible-only
        # diffusion by comparing against the reaction-free flow instead
        pop = FieldSet(("n",), np.stack([smooth_state(grid, 1)[0]]))
        t0 = ones @ (asm.mass @ pop.data[0].ravel())
        u = pop.data.reshape(1, -1)
        from epidiffuse.solver_fem import _diffuse

        for _ in range(10):
            u = _diffuse(asm, u, 0.2, 0.25)
        t1 = ones @ (asm.mass @ u[0])
        assert abs(t1 - t0) / abs(t0) < 1e-12
        # and the epidemic run must at least keep everything finite/positive
        assert np.isfinite(fields.data).all()
        total1 = sum(ones @ (asm.mass @ fields.data[i].ravel()) for i in range(3))
        assert total1 < total0  # gamma drain

    def test_diffusion_decreases_energy(self):
        grid = GridSpec(9, 9, 1.0, 1.0)
        asm = assemble_fem(grid)
        from epidiffuse.solver_fem import _diffuse

        rng = np.random.default_rng(3)
        u = rng.uniform(0.2, 0.8, size=(1, grid.n_cells))
        e0 = float(u[0] @ (asm.stiffness @ u[0]))
        v = _diffuse(asm, u, 0.3, 0.5)
        e1 = float(v[0] @ (asm.stiffness @ v[0]))
        assert e1 < e0

    def test_strang_order_near_two(self):
        """Observed order of the split scheme on a smooth coupled problem."""
        grid = GridSpec(9, 9, 1.0, 1.0)
        u0 = smooth_state(grid, 3)

        def final(tau):
            traj = run_fem_from_state(
                grid, u0, ModelKind.SEIR, SCHED, 0.1, 4.0, tau,
                store_every=int(round(4.0 / tau)),
            )
            return traj.states[-1]

        ref = final(0.4 / 64)
        errors = [
            float(np.sqrt(((final(tau) - ref) ** 2).sum() * grid.cell_area))
            for tau in (0.4, 0.2, 0.1)
        ]
        orders = [np.log2(a / b) for a, b in zip(errors, errors[1:])]
        assert all(o >= 1.8 for o in orders), (errors, orders)

    def test_kappa_validation(self):
        grid = GridSpec(4, 4, 1.0, 1.0)
        asm = assemble_fem(grid)
        fields = FieldSet(("I",), smooth_state(grid, 1))
        with pytest.raises(ParameterError):
            strang_step(asm, fields, ModelKind.SIS, SCHED, -0.1, 0.5)


class TestRunForwardFem:
    def test_matches_cn_on_smooth_problem(self):
        """Both backends land within a percent of each other on a smooth run."""
        grid = GridSpec(9, 9, 1.0, 1.0)
        u0 = smooth_state(grid, 3)
        kw = dict(store_every=20)
        cn = run_from_state(grid, u0, ModelKind.SEIR, SCHED, 0.1, 10.0, 0.5 / 10, **kw)
        fem = run_fem_from_state(grid, u0, ModelKind.SEIR, SCHED, 0.1, 10.0, 0.5 / 10, **kw)
        a, b = cn.states[-1], fem.states[-1]
        rel = np.abs(a - b).max() / np.abs(a).max()
        assert rel < 0.01

    def test_backend_tag_and_bookkeeping(self):
        grid = GridSpec(5, 5, 1.0, 1.0)
        u0 = smooth_state(grid, 1)
        traj = run_fem_from_state(
            grid, u0, ModelKind.SIS, SCHED, 0.05, 2.0, 0.25,
            population=np.full(grid.shape, 100.0), store_every=4,
        )
        assert traj.backend == "fem-split"
        npt.assert_allclose(traj.times, [0.0, 1.0, 2.0])
        assert traj.population.shape == (3,) + grid.shape

    def test_validation(self):
        grid = GridSpec(5, 5, 1.0, 1.0)
        u0 = smooth_state(grid, 1)
        with pytest.raises(ParameterError):
            run_fem_from_state(grid, u0, ModelKind.SIS, SCHED, 0.1, 2.0, 0.3)
        with pytest.raises(ParameterError):
            run_fem_from_state(grid, u0, ModelKind.SIS, SCHED, -0.1, 2.0, 0.25)
        with pytest.raises(DimensionError):
            run_fem_from_state(grid, u0[:, :3], ModelKind.SIS, SCHED, 0.1, 2.0, 0.25)

    def test_determinism(self):
        grid = GridSpec(6, 6, 1.0, 1.0)
        u0 = smooth_state(grid, 3)
        a = run_fem_from_state(grid, u0, ModelKind.SEIR, SCHED, 0.1, 1.0, 0.25)
        b = run_fem_from_state(grid, u0, ModelKind.SEIR, SCHED, 0.1, 1.0, 0.25)
        npt.assert_array_equal(a.states, b.states)
