import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from docadapt import ema
from docadapt.detector import ModelParameters
from docadapt.errors import ConfigurationError, ContractViolationError


def params_of(*values):
    return ModelParameters({"w": np.asarray(values, dtype=np.float64)})


class TestEmaUpdate:
    def test_pi_one_keeps_teacher(self):
        t, s = params_of(1.0, 2.0), params_of(5.0, 6.0)
        out = ema.ema_update(t, s, 1.0)
        assert np.array_equal(out["w"], t["w"])

    def test_pi_zero_copies_student(self):
        t, s = params_of(1.0, 2.0), params_of(5.0, 6.0)
        out = ema.ema_update(t, s, 0.0)
        assert np.array_equal(out["w"], s["w"])

    def test_scalar_substitution(self):
        out = ema.ema_update(params_of(1.0), params_of(0.0), 0.9)
        assert out["w"][0] == pytest.approx(0.9, abs=1e-15)

    def test_inputs_unmodified(self):
        t, s = params_of(1.0), params_of(0.0)
        out = ema.ema_update(t, s, 0.5)
        out["w"] = np.array([99.0])
        assert t["w"][0] == 1.0 and s["w"][0] == 0.0

    def test_schema_mismatch(self):
        other = ModelParameters({"v": np.zeros(1)})
        with pytest.raises(ContractViolationError):
            ema.ema_update(params_of(1.0), other, 0.5)

    def test_momentum_range_validated(self):
        with pytest.raises(ConfigurationError):
            ema.ema_update(params_of(1.0), params_of(0.0), 1.5)

    @given(st.floats(min_value=0.0, max_value=1.0), st.integers(min_value=0, max_value=2**31))
    @settings(max_examples=100, deadline=None)
    def test_convexity(self, pi, seed):
        rng = np.random.default_rng(seed)
        t = ModelParameters({"w": rng.standard_normal(8)})
        s = ModelParameters({"w": rng.standard_normal(8)})
        out = ema.ema_update(t, s, pi)
        lo = np.minimum(t["w"], s["w"]) - 1e-12
        hi = np.maximum(t["w"], s["w"]) + 1e-12
        assert np.all(out["w"] >= lo) and np.all(out["w"] <= hi)

    def test_geometric_approach(self):
        rng = np.random.default_rng(1)
        t = ModelParameters({"w": rng.standard_normal(16)})
        s = ModelParameters({"w": rng.standard_normal(16)})
        pi = 0.8
        gap = np.linalg.norm(t["w"] - s["w"])
        for _ in range(30):
            t = ema.ema_update(t, s, pi)
            new_gap = np.linalg.norm(t["w"] - s["w"])
            assert new_gap == pytest.approx(pi * gap, abs=1e-9)
            gap = new_gap


class TestSchedule:
    def test_ordering_invariant(self):
        with pytest.raises(ConfigurationError):
            ema.TeacherSchedule(pi_dynamic=0.5, pi_static=0.9)

    def test_n_update_validated(self):
        with pytest.raises(ConfigurationError):
            ema.TeacherSchedule(n_update=0)

    def test_auto_resolution(self):
        sched = ema.TeacherSchedule(n_update=None).resolved(120)
        assert sched.n_update == 12
        assert ema.TeacherSchedule(n_update=None).resolved(3).n_update == 1

    def test_unresolved_tick_rejected(self):
        state = ema.init_dual_state(params_of(0.0))
        with pytest.raises(ConfigurationError):
            ema.tick(state, ema.TeacherSchedule(n_update=None))


class TestTick:
    def test_dynamic_cadence(self):
        sched = ema.TeacherSchedule(pi_dynamic=0.9, pi_static=0.5, n_update=50)
        state = ema.init_dual_state(params_of(0.0))
        state.student_params["w"] = np.array([1.0])
        before = state.dynamic_params["w"].copy()
        for _ in range(49):
            state = ema.tick(state, sched)
            assert np.array_equal(state.dynamic_params["w"], before)
        state = ema.tick(state, sched)  # iteration 50
        assert state.dynamic_params["w"][0] == pytest.approx(0.1 * 1.0, abs=1e-15)

    def test_static_moves_at_epoch_end(self):
        sched = ema.TeacherSchedule(pi_dynamic=0.99, pi_static=0.6, n_update=1000)
        state = ema.init_dual_state(params_of(0.0))
        state.student_params["w"] = np.array([1.0])
        state = ema.tick(state, sched, epoch_ended=True)
        # static absorbs 40% of the student
        assert state.static_params["w"][0] == pytest.approx(0.4, abs=1e-15)
        assert state.epoch == 1

    def test_iteration_strictly_increases(self):
        sched = ema.TeacherSchedule(n_update=3)
        state = ema.init_dual_state(params_of(0.0))
        for i in range(7):
            state = ema.tick(state, sched)
            assert state.iteration == i + 1

    def test_three_epoch_trajectory_matches_recurrence(self):
        # scalar model: student value changes every iteration; compare both
        # teachers' trajectories against a plain-float recurrence
        pi1, pi2, n_update = 0.95, 0.55, 7
        iters_per_epoch, epochs = 120, 3
        sched = ema.TeacherSchedule(pi_dynamic=pi1, pi_static=pi2, n_update=n_update)
        state = ema.init_dual_state(params_of(0.0))

        ref_dyn, ref_stat = 0.0, 0.0
        k = 0
        for _ in range(epochs):
            for i in range(iters_per_epoch):
                k += 1
                student = np.sin(0.05 * k)
                state.student_params["w"] = np.array([student])
                state = ema.tick(state, sched, epoch_ended=(i == iters_per_epoch - 1))
                if k % n_update == 0:
                    ref_dyn = pi1 * ref_dyn + (1 - pi1) * student
                if i == iters_per_epoch - 1:
                    ref_stat = pi2 * ref_stat + (1 - pi2) * student
                assert state.dynamic_params["w"][0] == pytest.approx(ref_dyn, abs=1e-12)
                assert state.static_params["w"][0] == pytest.approx(ref_stat, abs=1e-12)
        assert state.iteration == epochs * iters_per_epoch
        assert state.epoch == epochs
