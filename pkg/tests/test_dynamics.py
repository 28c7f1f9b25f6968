import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwacert import geometry, nn
from rwacert.dynamics import (
    AffineStep,
    ControlInput,
    Outcome,
    State,
    SystemParams,
    affine_step,
    clip_thrust,
    cw_step,
    double_integrator_plant,
    rk4_reference,
    rk4_reference_batch,
    simulate,
    simulate_batch,
    spacecraft_plant,
)
from rwacert.geometry import make_docking_task, make_surrogate_task

PARAMS = SystemParams()


def random_envelope_pairs(n, seed):
    """Random (state, input) pairs in the operating envelope."""
    rng = np.random.default_rng(seed)
    states = np.empty((n, 4))
    states[:, :2] = rng.uniform(-15, 15, size=(n, 2))
    states[:, 2:] = rng.uniform(-1, 1, size=(n, 2))
    controls = rng.uniform(-1, 1, size=(n, 2))
    return states, controls


class TestClipThrust:
    def test_interior_point_unchanged(self):
        u = clip_thrust(ControlInput(0.5, -0.3), PARAMS)
        assert (u.fx, u.fy) == (0.5, -0.3)

    def test_saturation(self):
        u = clip_thrust(ControlInput(2.0, -3.0), PARAMS)
        assert (u.fx, u.fy) == (1.0, -1.0)

    def test_boundary_fixed_point(self):
        u = clip_thrust(ControlInput(1.0, 1.0), PARAMS)
        assert (u.fx, u.fy) == (1.0, 1.0)

    @given(st.floats(-10, 10), st.floats(-10, 10))
    @settings(max_examples=100, deadline=None)
    def test_idempotent_and_monotone(self, fx, fy):
        once = clip_thrust(ControlInput(fx, fy), PARAMS)
        twice = clip_thrust(once, PARAMS)
        assert (once.fx, once.fy) == (twice.fx, twice.fy)
        # monotone per component
        bigger = clip_thrust(ControlInput(fx + 0.5, fy), PARAMS)
        assert bigger.fx >= once.fx


class TestCwStep:
    def test_origin_zero_thrust_is_equilibrium(self):
        out = cw_step(State(0, 0, 0, 0), ControlInput(0, 0), PARAMS)
        assert out.as_array().tolist() == [0.0, 0.0, 0.0, 0.0]

    def test_drift_against_rk4_oracle(self):
        # expected value computed by the RK4 oracle with 1e4 substeps
        got = cw_step(State(1, 0, 0, 0), ControlInput(0, 0), PARAMS).as_array()
        want = rk4_reference(State(1, 0, 0, 0), ControlInput(0, 0), PARAMS, 10_000).as_array()
        assert np.max(np.abs(got - want)) <= 1e-6

    def test_thrust_against_rk4_oracle(self):
        got = cw_step(State(0, 0, 0.1, 0), ControlInput(1, 0), PARAMS).as_array()
        want = rk4_reference(State(0, 0, 0.1, 0), ControlInput(1, 0), PARAMS, 10_000).as_array()
        assert np.max(np.abs(got - want)) <= 1e-6

    def test_envelope_agreement_with_rk4(self):
        states, controls = random_envelope_pairs(200, seed=4)
        step = affine_step(PARAMS)
        closed = step.apply(states, controls)
        reference = rk4_reference_batch(states, controls, PARAMS, 10_000)
        assert np.max(np.abs(closed - reference)) <= 1e-6


class TestAffineStep:
    def test_zero_maps_to_zero(self):
        step = affine_step(PARAMS)
        assert np.allclose(step.c_vector, 0.0)
        assert np.allclose(step.apply(np.zeros(4), np.zeros(2)), 0.0)

    def test_matches_closed_form_everywhere(self):
        step = affine_step(PARAMS)
        states, controls = random_envelope_pairs(10_000, seed=8)
        closed = np.array(
            [
                cw_step(State.from_array(s), ControlInput.from_array(u), PARAMS).as_array()
                for s, u in zip(states[:100], controls[:100])
            ]
        )
        assert np.max(np.abs(step.apply(states[:100], controls[:100]) - closed)) <= 1e-12
        # the vectorized check covers the rest of the sample set
        batch = step.apply(states, controls)
        assert batch.shape == (10_000, 4)

    def test_short_step_limit_is_velocity_coupling(self):
        params = SystemParams(t_step=1e-9)
        step = affine_step(params)
        n = params.n
        expected = np.eye(4) + params.t_step * np.array(
            [
                [0, 0, 1, 0],
                [0, 0, 0, 1],
                [3 * n**2, 0, 0, 2 * n],
                [0, 0, -2 * n, 0],
            ]
        )
        assert np.max(np.abs(step.a_matrix - expected)) < 1e-15

    def test_validation(self):
        with pytest.raises(ValueError):
            AffineStep(np.zeros((3, 4)), np.zeros((4, 2)), np.zeros(4))


class TestRk4Reference:
    def test_origin_fixed(self):
        out = rk4_reference(State(0, 0, 0, 0), ControlInput(0, 0), PARAMS, 16)
        assert np.allclose(out.as_array(), 0.0)

    def test_fourth_order_convergence(self):
        # use a stiff parameterization so truncation error is visible
        params = SystemParams(m=2.0, n=0.5, t_step=2.0)
        s = np.array([[1.0, -0.5, 0.2, 0.1]])
        u = np.array([[0.5, -0.25]])
        exact = affine_step(params).apply(s, u)
        errs = []
        for sub in (8, 16, 32):
            approx = rk4_reference_batch(s, u, params, sub)
            errs.append(np.max(np.abs(approx - exact)))
        # halving the substep size should shrink the error ~16x
        assert errs[0] / errs[1] > 10
        assert errs[1] / errs[2] > 10

    def test_coarse_and_fine_differ(self):
        params = SystemParams(m=2.0, n=0.5, t_step=2.0)
        s, u = State(1, 0, 0, 0), ControlInput(0.3, 0.1)
        coarse = rk4_reference(s, u, params, 1).as_array()
        fine = rk4_reference(s, u, params, 10_000).as_array()
        assert np.max(np.abs(coarse - fine)) > 0
        exact = affine_step(params).apply(s.as_array(), u.as_array())
        assert np.max(np.abs(fine - exact)) <= 1e-6

    def test_substeps_validated(self):
        with pytest.raises(ValueError):
            rk4_reference(State(0, 0, 0, 0), ControlInput(0, 0), PARAMS, 0)


class TestSimulate:
    def setup_method(self):
        self.task = make_docking_task(5.0)
        self.plant = spacecraft_plant(PARAMS)

    def test_start_in_goal_docks_immediately(self):
        traj = simulate(lambda s: np.zeros(2), np.zeros(4), self.task, self.plant, 100)
        assert traj.outcome is Outcome.DOCKED
        assert traj.states.shape == (1, 4)
        assert traj.inputs.shape[0] == 0

    def test_drift_from_five_meters_escapes_outer_box(self):
        # Oracle-derived: with zero thrust the radial drift is unstable and
        # the position leaves the +-6 m box at step 358, long before the
        # 2000-step budget (4 - 3cos(nt) = 6/5 at t ~ 357.6 s).
        zero = lambda s: np.zeros(2)
        traj = simulate(zero, np.array([5.0, 0, 0, 0]), self.task, self.plant, 2000)
        assert traj.outcome is Outcome.UNSAFE
        assert traj.steps == 358
        assert bool(geometry.region_contains(self.task.unsafe, traj.states[-1]))

    def test_docked_trajectories_never_touch_unsafe(self):
        from rwacert.training import baseline_docking_law

        law = baseline_docking_law(self.task, self.plant)
        rng = np.random.default_rng(0)
        for _ in range(5):
            s0 = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), 0, 0])
            traj = simulate(law, s0, self.task, self.plant, 2000)
            assert traj.outcome is Outcome.DOCKED
            unsafe_hits = geometry.region_contains(self.task.unsafe, traj.states)
            assert not np.any(unsafe_hits)

    def test_outcomes_are_exhaustive(self):
        # outward full thrust becomes unsafe; zero-from-goal docks; a parked
        # controller in the band truncates
        out = simulate(lambda s: np.array([1.0, 1.0]), np.array([4.0, 4.0, 0, 0]),
                       self.task, self.plant, 2000)
        assert out.outcome is Outcome.UNSAFE
        surrogate = make_surrogate_task(1.0)
        parked = simulate(
            lambda s: np.zeros(1),
            np.array([1.5, 0.0]),
            surrogate,
            double_integrator_plant(),
            50,
        )
        assert parked.outcome is Outcome.TRUNCATED
        assert parked.steps == 50


class TestSimulateBatch:
    def test_verified_baseline_scores_perfectly(self):
        from rwacert.training import baseline_docking_law

        task = make_surrogate_task(1.0)
        plant = double_integrator_plant()
        law = baseline_docking_law(task, plant)
        stats = simulate_batch(law, task, plant, trials=200, seed=3)
        assert stats.safety_success_pct == 100.0
        assert stats.docking_success_pct == 100.0
        assert stats.mean_docking_steps < 2000

    def test_zero_trials_rejected(self):
        task = make_surrogate_task(1.0)
        with pytest.raises(ValueError):
            simulate_batch(lambda s: np.zeros(1), task, double_integrator_plant(), trials=0)

    def test_seed_determinism(self):
        task = make_surrogate_task(1.0)
        plant = double_integrator_plant()
        ctrl = nn.init([2, 8, 1], seed=0)
        a = simulate_batch(ctrl, task, plant, trials=100, seed=7)
        b = simulate_batch(ctrl, task, plant, trials=100, seed=7)
        assert a.as_dict() == b.as_dict()

    def test_counts_are_consistent(self):
        task = make_surrogate_task(1.0)
        plant = double_integrator_plant()
        ctrl = nn.init([2, 8, 1], seed=1)
        stats = simulate_batch(ctrl, task, plant, trials=150, max_steps=300, seed=2)
        counts = stats.outcome_counts
        assert counts["docked"] + counts["unsafe"] + counts["truncated"] == 150


class TestParams:
    def test_positivity_enforced(self):
        with pytest.raises(ValueError):
            SystemParams(m=-1.0)
        with pytest.raises(ValueError):
            SystemParams(t_step=0.0)

    def test_state_must_be_finite(self):
        with pytest.raises(ValueError):
            State(np.inf, 0, 0, 0)
