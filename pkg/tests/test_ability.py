import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aadkta.ability import (AbilityError, ResponseTimeStats, ability_increment, ability_vector,
                            build_timeline, fit_response_time_stats)
from aadkta.dataset import InteractionRecord, Segment, StudentSequence, segment_sequence


def rec(skill=0, ex=0, correct=1, rt=10.0, order=0, imputed=False):
    return InteractionRecord("s", ex, skill, correct, rt, float(order), rt_imputed=imputed)


def seq_of(records):
    return StudentSequence("s", tuple(
        InteractionRecord("s", r.exercise_id, r.skill_id, r.correct, r.response_time, float(i))
        for i, r in enumerate(records)))


def stats_with(means, global_mean=10.0):
    return ResponseTimeStats(dict(means), {k: 1 for k in means}, global_mean)


def brute_force_vector(segment, stats, K, c_max=5.0):
    out = [0.0] * K
    for r in segment.window:
        if r.correct == 1:
            a = stats.mean_correct_time.get((r.skill_id, r.exercise_id), stats.global_mean)
            out[r.skill_id] += min(r.response_time / a, c_max)
    return np.minimum(np.array(out), c_max)


class TestStats:
    def test_mean_of_correct_times(self):
        stats = fit_response_time_stats([rec(rt=10), rec(rt=20), rec(rt=30), rec(correct=0, rt=99)])
        assert stats.mean_correct_time[(0, 0)] == 20.0
        assert stats.correct_count[(0, 0)] == 3

    def test_incorrect_only_exercise_falls_back(self):
        records = [rec(ex=0, rt=10), rec(ex=0, rt=30), rec(ex=1, correct=0, rt=5), rec(skill=1, ex=2, rt=50)]
        stats = fit_response_time_stats(records)
        assert (0, 1) not in stats.mean_correct_time
        assert stats.global_mean == (10 + 30 + 50) / 3
        assert stats.average_time(0, 1) == stats.global_mean
        assert ability_increment(rec(ex=1, rt=30.0), stats) == 30.0 / 30.0

    def test_empty_split(self):
        with pytest.raises(AbilityError, match="cannot fit timing statistics"):
            fit_response_time_stats([])
        with pytest.raises(AbilityError):
            fit_response_time_stats([rec(correct=0)])

    def test_imputed_times_are_excluded(self):
        stats = fit_response_time_stats([rec(rt=10), rec(rt=1000, imputed=True)])
        assert stats.mean_correct_time[(0, 0)] == 10.0
        assert stats.global_mean == 10.0

    def test_keyed_by_skill_and_exercise(self):
        stats = fit_response_time_stats([rec(skill=0, ex=3, rt=10), rec(skill=1, ex=3, rt=40)])
        assert stats.mean_correct_time == {(0, 3): 10.0, (1, 3): 40.0}

    def test_json_roundtrip(self, tmp_path):
        stats = fit_response_time_stats([rec(rt=1 / 3), rec(skill=2, ex=5, rt=7.25)])
        stats.save(tmp_path / "s.json")
        back = ResponseTimeStats.load(tmp_path / "s.json")
        assert back == stats
        assert '"2:5"' in (tmp_path / "s.json").read_text()


class TestIncrement:
    def test_ratio(self):
        assert ability_increment(rec(rt=10), stats_with({(0, 0): 20.0})) == 0.5

    @pytest.mark.parametrize("rt", [0.0, 3.0, 1e6])
    def test_incorrect_is_zero(self, rt):
        assert ability_increment(rec(correct=0, rt=rt), stats_with({(0, 0): 20.0})) == 0.0

    def test_clipped(self):
        stats = stats_with({(0, 0): 10.0})
        assert 200.0 / 10.0 == 20.0
        assert ability_increment(rec(rt=200), stats) == 5.0

    def test_inverted(self):
        assert ability_increment(rec(rt=10), stats_with({(0, 0): 20.0}), invert_ratio=True) == 2.0


class TestVector:
    def segment(self, records):
        return segment_sequence(seq_of(records), g=len(records) or 1)[0]

    def test_no_correct_answers(self):
        v = ability_vector(self.segment([rec(correct=0), rec(skill=2, correct=0)]), stats_with({}), 4)
        assert np.array_equal(v.values, np.zeros(4))

    def test_sum_of_increments(self):
        stats = stats_with({(1, 0): 10.0})
        v = ability_vector(self.segment([rec(skill=1, rt=5.0), rec(skill=1, rt=3.0)]), stats, 3)
        assert v.values[1] == pytest.approx(0.8)
        assert v.values[1] == 5.0 / 10.0 + 3.0 / 10.0

    def test_support(self):
        records = [rec(skill=1), rec(skill=3), rec(skill=0, correct=0), rec(skill=2, correct=0)]
        v = ability_vector(self.segment(records), stats_with({}), 5)
        assert set(np.flatnonzero(v.values)) == {1, 3}

    def test_mean_aggregation(self):
        stats = stats_with({(1, 0): 10.0})
        v = ability_vector(self.segment([rec(skill=1, rt=5.0), rec(skill=1, rt=3.0)]), stats, 3, agg="mean")
        assert v.values[1] == pytest.approx(0.4)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 5), st.integers(0, 1),
                              st.floats(0.0, 500.0)), min_size=1, max_size=12))
    def test_matches_brute_force(self, rows):
        records = [rec(skill=k, ex=e, correct=c, rt=t) for k, e, c, t in rows]
        stats = stats_with({(k, e): 5.0 + 3.0 * k + e for k in range(4) for e in range(0, 6, 2)}, 12.5)
        seg = self.segment(records)
        assert np.array_equal(ability_vector(seg, stats, 4).values, brute_force_vector(seg, stats, 4))


class TestTimeline:
    def test_single_segment(self):
        tl = build_timeline(seq_of([rec(rt=4.0), rec(rt=6.0)]), 5, stats_with({(0, 0): 10.0}), 2)
        assert len(tl.cumulative) == 1
        assert np.array_equal(tl.cumulative[0].values, tl.per_segment[0].values)

    def test_all_incorrect(self):
        tl = build_timeline(seq_of([rec(correct=0, skill=i % 3) for i in range(17)]), 5, stats_with({}), 3)
        assert len(tl.cumulative) == 4
        assert all(not c.values.any() for c in tl.cumulative)

    def test_increments_only_in_second_segment(self):
        records = [rec(correct=0)] * 5 + [rec(skill=1, rt=7.0), rec(skill=2, rt=2.5)] + [rec(correct=0)] * 8
        tl = build_timeline(seq_of(records), 5, stats_with({(1, 0): 10.0, (2, 0): 10.0}), 3)
        expected = np.array([0.0, 0.7, 0.25])
        assert np.array_equal(tl.cumulative[0].values, np.zeros(3))
        np.testing.assert_array_equal(tl.cumulative[1].values, tl.per_segment[1].values)
        np.testing.assert_array_equal(tl.cumulative[2].values, tl.per_segment[1].values)
        np.testing.assert_allclose(tl.cumulative[2].values, expected)

    def test_cumulative_is_clipped_prefix_sum(self):
        rng = np.random.default_rng(0)
        records = [rec(skill=int(rng.integers(3)), correct=int(rng.integers(2)), rt=float(rng.uniform(1, 30)))
                   for _ in range(40)]
        stats = stats_with({(k, 0): 10.0 for k in range(3)})
        tl = build_timeline(seq_of(records), 5, stats, 3)
        running = np.zeros(3)
        for seg, cum in zip(tl.per_segment, tl.cumulative):
            running = running + seg.values
            np.testing.assert_array_equal(cum.values, np.minimum(running, 5.0))
            assert np.all(cum.values >= 0) and np.all(cum.values <= 5.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1), st.floats(0.1, 100.0)), max_size=40),
           st.integers(1, 8))
    def test_monotone_before_clipping(self, rows, g):
        records = [rec(skill=k, correct=c, rt=t) for k, c, t in rows]
        tl = build_timeline(seq_of(records), g, stats_with({}, 10.0), 3, c_max=np.inf)
        values = [c.values for c in tl.cumulative]
        assert all(np.all(b >= a) for a, b in zip(values, values[1:]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 3), st.integers(0, 1), st.floats(0.1, 100.0)),
                    min_size=1, max_size=30),
           st.floats(0.01, 100.0))
    def test_invariant_to_time_scale(self, rows, scale):
        records = [rec(skill=k, ex=e, correct=c, rt=t) for k, e, c, t in rows]
        scaled = [rec(skill=k, ex=e, correct=c, rt=t * scale) for k, e, c, t in rows]
        base = fit_response_time_stats(records) if any(c for _, _, c, _ in rows) else None
        if base is None:
            return
        other = fit_response_time_stats(scaled)
        for a, b in zip(records, scaled):
            assert ability_increment(b, other) == pytest.approx(ability_increment(a, base), rel=1e-12)
