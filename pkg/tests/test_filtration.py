import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cetta import filtration as filt


def make_state(num_classes=10, **kw):
    return filt.init_state(filt.FiltrationConfig(num_classes=num_classes, **kw))


class TestConfig:
    def test_rejects_inverted_thresholds(self):
        with pytest.raises(filt.FiltrationConfigError):
            filt.FiltrationConfig(num_classes=10, e_max_factor=0.02, e_min_factor=0.4)
        with pytest.raises(filt.FiltrationConfigError):
            filt.FiltrationConfig(num_classes=10, lam=0.0)
        with pytest.raises(filt.FiltrationConfigError):
            filt.FiltrationConfig(num_classes=10, e_max_factor=1.2)
        with pytest.raises(filt.FiltrationConfigError):
            filt.FiltrationConfig(num_classes=1)

    def test_open_configuration_allowed(self):
        # the upload-all baseline: no low filter, unbounded high threshold
        cfg = filt.FiltrationConfig(num_classes=10, e_max_factor=math.inf,
                                    e_min_factor=0.0, dynamic=False)
        state = filt.init_state(cfg)
        assert state.e_max_t == math.inf
        assert state.e_min == 0.0


class TestInitState:
    def test_thousand_class_values(self):
        state = make_state(num_classes=1000)
        assert state.e_max_t == pytest.approx(0.4 * math.log(1000), abs=1e-4)
        assert state.e_max_t == pytest.approx(2.7631, abs=1e-3)
        assert state.e_min == pytest.approx(0.1382, abs=1e-3)

    def test_ten_class_values(self):
        state = make_state(num_classes=10)
        assert state.e_max_t == pytest.approx(0.9210, abs=1e-3)

    def test_binary_e_min(self):
        state = make_state(num_classes=2)
        assert state.e_min == pytest.approx(0.0139, abs=1e-3)

    def test_counters_start_empty(self):
        state = make_state()
        assert state.seen_count == 0
        assert state.entropy_sum == 0.0
        assert state.e_avg_prev is None


class TestScore:
    def test_boundary_is_excluded(self):
        state = make_state()
        assert filt.score(state.e_max_t, state) is False

    def test_below_low_threshold_excluded(self):
        state = make_state()
        assert filt.score(0.01 * math.log(10), state) is False
        assert filt.score(state.e_min, state) is False

    def test_interior_point_accepted(self):
        state = make_state()
        assert filt.score(0.5 * (state.e_min + state.e_max_t), state) is True

    def test_accepted_set_is_open_interval(self):
        state = make_state()
        grid = np.linspace(0, math.log(10), 2001)
        mask = filt.score_batch(grid, state)
        expected = (grid > state.e_min) & (grid < state.e_max_t)
        assert np.array_equal(mask, expected)


class TestUpdateThreshold:
    def test_ratio_update(self):
        state = make_state()
        state.e_max_t = 2.0
        # previous cumulative average 1.5 over 10 samples; this batch pulls
        # the cumulative average to 1.2
        state.seen_count = 10
        state.entropy_sum = 15.0
        state.e_avg_prev = 1.5
        batch = np.full(40, 1.125)
        filt.update_threshold(state, batch)
        assert state.entropy_sum / state.seen_count == pytest.approx(1.2)
        assert state.e_max_t == pytest.approx(2.0 * 1.2 / 1.5)
        assert state.e_max_t == pytest.approx(1.6)

    def test_constant_stream_is_fixed_point(self):
        state = make_state()
        e0 = state.e_max_t
        for _ in range(50):
            filt.update_threshold(state, np.full(16, 0.5))
        assert state.e_max_t == pytest.approx(e0, rel=1e-12)

    def test_first_batch_only_seeds_average(self):
        state = make_state()
        e0 = state.e_max_t
        filt.update_threshold(state, np.array([0.3, 0.5]))
        assert state.e_max_t == e0
        assert state.e_avg_prev == pytest.approx(0.4)

    def test_static_config_keeps_threshold(self):
        state = make_state(dynamic=False)
        e0 = state.e_max_t
        filt.update_threshold(state, np.array([0.9, 0.1]))
        filt.update_threshold(state, np.array([0.05, 0.02]))
        assert state.e_max_t == e0
        # the average is still maintained
        assert state.seen_count == 4

    def test_empty_batch_rejected(self):
        state = make_state()
        with pytest.raises(ValueError):
            filt.update_threshold(state, np.array([]))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.floats(0.0, math.log(10)), min_size=1, max_size=20),
                    min_size=1, max_size=20))
    def test_cumulative_average_matches_brute_force(self, batches):
        state = make_state()
        for batch in batches:
            filt.update_threshold(state, np.array(batch))
        everything = [e for batch in batches for e in batch]
        brute = math.fsum(everything) / len(everything)
        got = state.entropy_sum / state.seen_count
        assert got == pytest.approx(brute, rel=1e-9, abs=1e-12)

    def test_nonincreasing_running_mean_gives_nonincreasing_threshold(self):
        state = make_state()
        rng = np.random.default_rng(0)
        thresholds = [state.e_max_t]
        level = 1.5
        for _ in range(40):
            filt.update_threshold(state, np.full(8, level) + rng.uniform(-1e-6, 0, 8))
            thresholds.append(state.e_max_t)
            level *= 0.95
        assert all(b <= a + 1e-12 for a, b in zip(thresholds, thresholds[1:]))

    def test_threshold_ignores_upload_outcomes(self):
        # two streams with identical entropies but different accept patterns
        a = make_state()
        b = make_state()
        ent = np.array([0.2, 0.8, 0.4])
        filt.score_batch(ent, a)
        for e in ent:
            filt.score(e, b)
            filt.score(e, b)  # scoring twice must not matter either
        filt.update_threshold(a, ent)
        filt.update_threshold(b, ent)
        assert a.e_max_t == b.e_max_t
        assert a.entropy_sum == b.entropy_sum


class TestRedundancy:
    def test_first_sample_passes_and_seeds(self):
        state = make_state(redundancy_enabled=True)
        probs = np.array([0.7, 0.2, 0.1])
        assert filt.redundancy_pass(probs, state) is True
        np.testing.assert_allclose(state.redundancy_avg, probs)

    def test_identical_sample_rejected(self):
        state = make_state(redundancy_enabled=True)
        probs = np.array([0.7, 0.2, 0.1])
        filt.redundancy_pass(probs, state)
        assert filt.redundancy_pass(probs, state) is False

    def test_orthogonal_sample_passes(self):
        state = make_state(redundancy_enabled=True)
        filt.redundancy_pass(np.array([1.0, 0.0, 0.0]), state)
        assert filt.redundancy_pass(np.array([0.0, 1.0, 0.0]), state) is True

    def test_rejected_sample_does_not_move_average(self):
        state = make_state(redundancy_enabled=True)
        probs = np.array([0.7, 0.2, 0.1])
        filt.redundancy_pass(probs, state)
        before = state.redundancy_avg.copy()
        filt.redundancy_pass(probs, state)
        assert np.array_equal(state.redundancy_avg, before)

    def test_passing_sample_updates_with_decay(self):
        state = make_state(redundancy_enabled=True, redundancy_decay=0.25)
        first = np.array([1.0, 0.0])
        second = np.array([0.0, 1.0])
        filt.redundancy_pass(first, state)
        filt.redundancy_pass(second, state)
        np.testing.assert_allclose(state.redundancy_avg, 0.75 * first + 0.25 * second)
