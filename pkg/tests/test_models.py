"""Tests for compartment models, rate schedules, and initial states."""

import numpy as np
import numpy.testing as npt
import pytest

from epidiffuse.errors import DimensionError, NormalizationError, ParameterError
from epidiffuse.grid import GridSpec, RegionMask, region_total
from epidiffuse.models import (
    ModelKind,
    ParameterVector,
    RateSchedule,
    beta_at,
    beta_interval,
    conserved_sum_rate,
    initial_fractions,
    reaction,
    reaction_jacobian,
    transmission_bilinear,
)

SCHED = RateSchedule((0.2, 0.1, 0.3), (10.0, 20.0), 30.0)


class TestModelKind:
    def test_compartment_layout(self):
        assert ModelKind.SIS.n_compartments == 1
        assert ModelKind.SIR.n_compartments == 2
        assert ModelKind.SEIR.n_compartments == 3
        assert ModelKind.SIS.infected_index == 0
        assert ModelKind.SIR.infected_index == 1
        assert ModelKind.SEIR.infected_index == 2
        assert ModelKind.SEIR.compartment_names == ("S", "E", "I")


class TestRateSchedule:
    def test_piecewise_plateaus(self):
        assert beta_at(SCHED, 0.0) == 0.2
        assert beta_at(SCHED, 9.999) == 0.2
        assert beta_at(SCHED, 10.0) == 0.1  # right-continuous
        assert beta_at(SCHED, 19.999) == 0.1
        assert beta_at(SCHED, 20.0) == 0.3
        assert beta_at(SCHED, 30.0) == 0.3

    def test_interval_index_matches_value(self):
        for t in np.linspace(0.0, 30.0, 121):
            k = beta_interval(SCHED, float(t))
            assert beta_at(SCHED, float(t)) == SCHED.betas[k]

    def test_domain_is_enforced(self):
        with pytest.raises(ParameterError):
            beta_at(SCHED, -0.5)
        with pytest.raises(ParameterError):
            beta_at(SCHED, 30.5)
        # round-off next to the endpoints is tolerated
        beta_at(SCHED, 30.0 + 1e-9)
        beta_at(SCHED, -1e-9)

    def test_validation(self):
        with pytest.raises(ParameterError):
            RateSchedule((0.2, 0.1), (10.0, 20.0), 30.0)
        with pytest.raises(ParameterError):
            RateSchedule((0.2, -0.1, 0.3), (10.0, 20.0), 30.0)
        with pytest.raises(ParameterError):
            RateSchedule((0.2, 0.1, 0.3), (20.0, 10.0), 30.0)
        with pytest.raises(ParameterError):
            RateSchedule((0.2, 0.1, 0.3), (10.0, 30.0), 30.0)
        with pytest.raises(ParameterError):
            RateSchedule((0.2, 0.1, 0.3), (10.0, 20.0), 30.0, gamma=0.0)

    def test_with_betas_keeps_everything_else(self):
        other = SCHED.with_betas([0.5, 0.4, 0.3])
        assert other.betas == (0.5, 0.4, 0.3)
        assert other.breakpoints == SCHED.breakpoints
        assert other.gamma == SCHED.gamma


class TestParameterVector:
    def test_chi_roundtrip(self):
        p = ParameterVector(SCHED, 0.1, 0.5, {"a": 3.0})
        npt.assert_array_equal(p.chi, [0.2, 0.1, 0.3, 0.1, 0.5])
        q = p.with_chi([0.4, 0.3, 0.2, 0.2, 0.6])
        npt.assert_array_equal(q.chi, [0.4, 0.3, 0.2, 0.2, 0.6])
        assert q.init_infected == {"a": 3.0}
        assert p.chi[0] == 0.2  # original untouched

    def test_bounds(self):
        with pytest.raises(ParameterError):
            ParameterVector(SCHED, -0.1, 0.5, {})
        with pytest.raises(ParameterError):
            ParameterVector(SCHED, 0.1, 1.5, {})
        with pytest.raises(ParameterError):
            ParameterVector(SCHED, 0.1, 0.5, {"a": -1.0})
        with pytest.raises(DimensionError):
            ParameterVector(SCHED, 0.1, 0.5, {}).with_chi([0.1, 0.2])

    def test_with_seeds(self):
        p = ParameterVector(SCHED, 0.1, 0.5, {"a": 3.0})
        q = p.with_seeds({"a": 5.0, "b": 1.0})
        assert q.init_infected == {"a": 5.0, "b": 1.0}
        assert q.chi is not p.chi
        npt.assert_array_equal(q.chi, p.chi)


class TestReaction:
    def test_sis_hand_value(self):
        """f = beta (1-u)u - gamma u at u=0.3, beta=0.2, gamma=0.1."""
        f = reaction(ModelKind.SIS, np.array([0.3]), 0.0, SCHED)
        assert f[0] == pytest.approx(0.2 * 0.7 * 0.3 - 0.1 * 0.3)

    def test_sir_hand_value(self):
        u = np.array([0.9, 0.05])
        f = reaction(ModelKind.SIR, u, 0.0, SCHED)
        force = 0.2 * 0.9 * 0.05
        npt.assert_allclose(f, [-force, force - 0.1 * 0.05])

    def test_seir_hand_value(self):
        u = np.array([0.9, 0.02, 0.05])
        f = reaction(ModelKind.SEIR, u, 0.0, SCHED)
        force = 0.2 * 0.9 * 0.05
        theta = SCHED.theta
        npt.assert_allclose(
            f, [-force, force - theta * 0.02, theta * 0.02 - 0.1 * 0.05], rtol=1e-12
        )

    def test_uses_schedule_plateau(self):
        u = np.array([0.9, 0.02, 0.05])
        early = reaction(ModelKind.SEIR, u, 5.0, SCHED)
        late = reaction(ModelKind.SEIR, u, 25.0, SCHED)
        assert late[0] == pytest.approx(early[0] * 0.3 / 0.2)

    def test_field_shapes_pass_through(self):
        rng = np.random.default_rng(0)
        u = rng.uniform(0.0, 0.4, size=(3, 4, 5))
        f = reaction(ModelKind.SEIR, u, 0.0, SCHED)
        assert f.shape == u.shape
        # pointwise agreement with the scalar evaluation
        f_cell = reaction(ModelKind.SEIR, u[:, 2, 3], 0.0, SCHED)
        npt.assert_allclose(f[:, 2, 3], f_cell)

    def test_arity_check(self):
        with pytest.raises(DimensionError):
            reaction(ModelKind.SIR, np.zeros((3, 2, 2)), 0.0, SCHED)


class TestJacobian:
    def test_matches_finite_differences(self):
        """Central differences on random states, all three models."""
        rng = np.random.default_rng(17)
        eps = 1e-6
        for model in ModelKind:
            m = model.n_compartments
            for _ in range(20):
                u = rng.uniform(0.05, 0.6, size=m)
                t = float(rng.uniform(0.0, 30.0))
                jac = reaction_jacobian(model, u, t, SCHED)
                for j in range(m):
                    up, um = u.copy(), u.copy()
                    up[j] += eps
                    um[j] -= eps
                    fd = (reaction(model, up, t, SCHED) - reaction(model, um, t, SCHED)) / (2 * eps)
                    npt.assert_allclose(jac[:, j], fd, rtol=1e-6, atol=1e-9)

    def test_field_shape(self):
        u = np.zeros((3, 4, 5)) + 0.1
        jac = reaction_jacobian(ModelKind.SEIR, u, 0.0, SCHED)
        assert jac.shape == (3, 3, 4, 5)

    def test_column_sums_match_loss_rate(self):
        """Summing df_i/du_j over i gives the derivative of the summed rate."""
        rng = np.random.default_rng(5)
        for model in (ModelKind.SIR, ModelKind.SEIR):
            m = model.n_compartments
            u = rng.uniform(0.05, 0.5, size=m)
            jac = reaction_jacobian(model, u, 0.0, SCHED)
            expected = np.zeros(m)
            expected[model.infected_index] = -SCHED.gamma
            npt.assert_allclose(jac.sum(axis=0), expected, atol=1e-13)


class TestConservedSumRate:
    def test_matches_summed_reaction(self):
        """For models tracking all retained compartments, the rate is sum_i f_i."""
        rng = np.random.default_rng(23)
        for model in (ModelKind.SIR, ModelKind.SEIR):
            u = rng.uniform(0.0, 0.5, size=(model.n_compartments, 3, 3))
            f = reaction(model, u, 12.0, SCHED)
            npt.assert_allclose(
                conserved_sum_rate(model, u, SCHED), f.sum(axis=0), atol=1e-14
            )

    def test_sis_is_conservative(self):
        u = np.array([[0.2, 0.4]])
        npt.assert_array_equal(conserved_sum_rate(ModelKind.SIS, u, SCHED), 0.0)


class TestTransmissionBilinear:
    def test_values(self):
        assert transmission_bilinear(ModelKind.SIS, np.array([0.3]))[()] == pytest.approx(0.21)
        assert transmission_bilinear(ModelKind.SIR, np.array([0.9, 0.05]))[()] == pytest.approx(0.045)
        assert transmission_bilinear(
            ModelKind.SEIR, np.array([0.9, 0.02, 0.05])
        )[()] == pytest.approx(0.045)


class TestInitialFractions:
    def _setup(self):
        grid = GridSpec(5, 4, 1.0, 1.0)
        a = np.zeros(grid.shape, dtype=int)
        a[0:2, 0:2] = 1
        b = np.zeros(grid.shape, dtype=int)
        b[2:4, 2:5] = 1
        masks = {"a": RegionMask("a", a), "b": RegionMask("b", b)}
        population = np.full(grid.shape, 1000.0)
        return grid, masks, population

    def test_region_totals_match_seeds(self):
        grid, masks, population = self._setup()
        params = ParameterVector(SCHED, 0.1, 0.5, {"a": 12.0, "b": 30.0})
        for model in ModelKind:
            u0 = initial_fractions(model, grid, masks, params, population)
            infected = u0[model.infected_index] * population
            assert region_total(infected, masks["a"], grid) == pytest.approx(12.0)
            assert region_total(infected, masks["b"], grid) == pytest.approx(30.0)

    def test_seir_layering(self):
        grid, masks, population = self._setup()
        params = ParameterVector(SCHED, 0.1, 0.5, {"a": 12.0})
        u0 = initial_fractions(ModelKind.SEIR, grid, masks, params, population)
        covered = masks["a"].cells
        npt.assert_allclose(u0[1][covered], 0.5 * u0[2][covered])
        npt.assert_allclose(u0.sum(axis=0), 1.0)
        # disease free outside the seeded region
        assert (u0[2][~covered] == 0.0).all()
        assert (u0[1][~covered] == 0.0).all()
        npt.assert_array_equal(u0[0][~covered], 1.0)

    def test_sir_complement(self):
        grid, masks, population = self._setup()
        params = ParameterVector(SCHED, 0.1, 0.5, {"b": 5.0})
        u0 = initial_fractions(ModelKind.SIR, grid, masks, params, population)
        npt.assert_allclose(u0.sum(axis=0), 1.0)

    def test_errors(self):
        grid, masks, population = self._setup()
        with pytest.raises(ParameterError):
            initial_fractions(
                ModelKind.SIS, grid, masks,
                ParameterVector(SCHED, 0.1, 0.5, {"zz": 1.0}), population,
            )
        params = ParameterVector(SCHED, 0.1, 0.5, {"a": 1.0})
        dead = np.zeros(grid.shape)
        with pytest.raises(NormalizationError):
            initial_fractions(ModelKind.SIS, grid, masks, params, dead)
        too_many = ParameterVector(SCHED, 0.1, 0.5, {"a": 1e7})
        with pytest.raises(ParameterError):
            initial_fractions(ModelKind.SIS, grid, masks, too_many, population)
        with pytest.raises(DimensionError):
            initial_fractions(ModelKind.SIS, grid, masks, params, np.ones((2, 2)))
