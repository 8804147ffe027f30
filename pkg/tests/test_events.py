import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from followbench.errors import EventDataError
from followbench.events import (
    CarFollowingEvent,
    ExtractionCriteria,
    descriptive_stats,
    extract_events,
    histogram,
    load_events,
    low_speed_filter,
    save_events,
    split_dataset,
)
from followbench.sim import tracks_from_events
from followbench.trajectories import TrajectorySample, VehicleTrack


def build_pair(
    fv_id=1,
    lv_id=2,
    n=201,
    dt=0.1,
    v=12.0,
    spacing=20.0,
    lv_length=5.0,
    fv_lateral=None,
    lead_ids=None,
    dataset="d",
):
    """Constant-speed FV/LV pair; spacing is exact at every step."""
    fv_lateral = fv_lateral if fv_lateral is not None else [0.0] * n
    lead_ids = lead_ids if lead_ids is not None else [lv_id] * n
    fv_samples = [
        TrajectorySample(
            time_s=k * dt,
            longitudinal_pos_m=v * k * dt,
            lateral_pos_m=fv_lateral[k],
            speed_mps=v,
            lane_id=1,
            vehicle_length_m=4.5,
            preceding_vehicle_id=lead_ids[k],
        )
        for k in range(n)
    ]
    lv_samples = [
        TrajectorySample(
            time_s=k * dt,
            longitudinal_pos_m=spacing + lv_length + v * k * dt,
            lateral_pos_m=0.0,
            speed_mps=v,
            lane_id=1,
            vehicle_length_m=lv_length,
            preceding_vehicle_id=None,
        )
        for k in range(n)
    ]
    return (
        VehicleTrack(fv_id, dataset, dt, fv_samples),
        VehicleTrack(lv_id, dataset, dt, lv_samples),
    )


def consistent_event(v_fv, v_lv, spacing0=30.0, dt=0.1, event_id="e"):
    """Event whose spacing integrates the relative speed exactly."""
    v_fv = np.asarray(v_fv, dtype=float)
    v_lv = np.asarray(v_lv, dtype=float)
    dv = v_fv - v_lv
    spacing = np.empty(len(v_fv))
    spacing[0] = spacing0
    spacing[1:] = spacing0 - np.cumsum(0.5 * (dv[:-1] + dv[1:]) * dt)
    return CarFollowingEvent(
        event_id=event_id, dt_s=dt, spacing_m=spacing, v_fv_mps=v_fv,
        dv_mps=dv, v_lv_mps=v_lv, source="test",
    )


class TestEventInvariants:
    def test_short_event_rejected(self):
        n = 150  # 14.9 s at 10 Hz
        with pytest.raises(EventDataError, match="duration"):
            consistent_event(np.full(n, 10.0), np.full(n, 10.0))

    def test_nonpositive_spacing_rejected(self):
        v = np.full(151, 10.0)
        with pytest.raises(EventDataError, match="positive"):
            consistent_event(v, v, spacing0=0.0)

    def test_dv_channel_checked(self):
        v = np.full(151, 10.0)
        with pytest.raises(EventDataError, match="dv"):
            CarFollowingEvent(
                event_id="bad", dt_s=0.1, spacing_m=np.full(151, 10.0),
                v_fv_mps=v, dv_mps=v * 0 + 1.0, v_lv_mps=v,
            )

    def test_spacing_rate_consistency_checked(self):
        v = np.full(151, 10.0)
        spacing = np.full(151, 10.0)
        spacing[75] = 20.0  # 10 m jump in one step with dv = 0
        with pytest.raises(EventDataError, match="rate"):
            CarFollowingEvent(
                event_id="bad", dt_s=0.1, spacing_m=spacing,
                v_fv_mps=v, dv_mps=v * 0.0, v_lv_mps=v,
            )


class TestExtractEvents:
    def test_compliant_20s_pair_yields_one_event(self):
        tracks = list(build_pair(n=201))
        events = extract_events(tracks)
        assert len(events) == 1
        event = events[0]
        assert len(event) == 201
        assert np.allclose(event.spacing_m, 20.0)
        assert np.allclose(event.dv_mps, 0.0)
        assert event.fv_id == 1 and event.lv_id == 2

    def test_duration_just_below_threshold(self):
        tracks = list(build_pair(n=150))  # 14.9 s
        assert extract_events(tracks) == []

    def test_leader_switch_splits_span(self):
        n = 201
        lead_ids = [2] * 100 + [3] * 101
        fv, lv = build_pair(n=n, lead_ids=lead_ids)
        lv2_samples = [
            TrajectorySample(k * 0.1, 60.0 + 12.0 * k * 0.1, 0.0, 12.0, 1, 5.0)
            for k in range(n)
        ]
        lv2 = VehicleTrack(3, "d", 0.1, lv2_samples)
        assert extract_events([fv, lv, lv2]) == []

    def test_lateral_violation_splits_span(self):
        n = 201
        lateral = [0.0] * n
        lateral[100] = 2.5
        tracks = list(build_pair(n=n, fv_lateral=lateral))
        assert extract_events(tracks) == []

    def test_lateral_violation_leaves_long_segment(self):
        n = 360
        lateral = [0.0] * n
        lateral[10] = 2.5  # remaining 349 steps = 34.9 s still qualify
        tracks = list(build_pair(n=n, fv_lateral=lateral))
        events = extract_events(tracks)
        assert len(events) == 1
        assert len(events[0]) == n - 11

    def test_missing_leader_logged_and_skipped(self, caplog):
        fv, _ = build_pair(n=201)
        with caplog.at_level("WARNING"):
            events = extract_events([fv])
        assert events == []
        assert any("absent" in r.message for r in caplog.records)

    def test_order_insensitive(self):
        a = build_pair(fv_id=1, lv_id=2, n=201, v=10.0, spacing=18.0)
        b = build_pair(fv_id=3, lv_id=4, n=251, v=14.0, spacing=25.0)
        tracks = [*a, *b]
        forward = extract_events(tracks)
        backward = extract_events(tracks[::-1])
        assert {e.event_id for e in forward} == {e.event_id for e in backward}
        by_id = {e.event_id: e for e in backward}
        for event in forward:
            assert np.array_equal(event.spacing_m, by_id[event.event_id].spacing_m)

    def test_mixed_dt_rejected(self):
        a, b = build_pair(n=201, dt=0.1)
        c, d = build_pair(fv_id=5, lv_id=6, n=501, dt=0.04)
        with pytest.raises(EventDataError, match="share"):
            extract_events([a, b, c, d])

    def test_synthetic_spacing_reconstructed(self, sinusoidal_events):
        tracks = tracks_from_events(sinusoidal_events)
        extracted = extract_events(tracks)
        assert len(extracted) == len(sinusoidal_events)
        recovered = sorted(extracted, key=lambda e: e.fv_id)
        for original, event in zip(sinusoidal_events, recovered):
            assert len(event) == len(original)
            assert np.max(np.abs(event.spacing_m - original.spacing_m)) < 1e-9
            assert np.max(np.abs(event.v_fv_mps - original.v_fv_mps)) < 1e-9


class TestLowSpeedFilter:
    criteria = ExtractionCriteria()

    def test_low_mean_speed_dropped(self):
        v = np.full(151, 1.5)
        assert low_speed_filter(consistent_event(v, v), self.criteria) is False

    def test_long_crawl_dropped(self):
        v = np.concatenate([np.full(100, 10.0), np.full(61, 0.1), np.full(100, 10.0)])
        assert low_speed_filter(consistent_event(v, v), self.criteria) is False

    def test_short_crawl_kept(self):
        v = np.concatenate([np.full(100, 10.0), np.full(41, 0.1), np.full(120, 10.0)])
        assert low_speed_filter(consistent_event(v, v), self.criteria) is True

    def test_fast_event_kept(self):
        v = np.concatenate([np.full(100, 20.0), np.full(20, 5.0), np.full(100, 20.0)])
        assert low_speed_filter(consistent_event(v, v), self.criteria) is True

    def test_disabled_criteria(self):
        v = np.full(151, 1.0)
        off = ExtractionCriteria(
            min_avg_speed_mps=None, low_speed_threshold_mps=None,
            low_speed_max_duration_s=None,
        )
        assert low_speed_filter(consistent_event(v, v), off) is True


def dummy_events(n):
    v = np.full(151, 10.0)
    return [consistent_event(v, v, event_id=f"e{i:04d}") for i in range(n)]


class TestSplitDataset:
    def test_1000_events(self):
        train, val, test = split_dataset(dummy_events(1000), seed=5)
        assert (len(train), len(val), len(test)) == (700, 150, 150)

    def test_10_events_rounding(self):
        train, val, test = split_dataset(dummy_events(10), seed=5)
        assert (len(train), len(val), len(test)) == (7, 1, 2)

    def test_seed_determinism(self):
        events = dummy_events(40)
        first = split_dataset(events, seed=9)
        second = split_dataset(events, seed=9)
        for a, b in zip(first, second):
            assert [e.event_id for e in a] == [e.event_id for e in b]

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_dataset(dummy_events(4), ratios=(0.5, 0.2, 0.2), seed=0)

    def test_empty_rejected(self):
        with pytest.raises(EventDataError):
            split_dataset([], seed=0)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 200), seed=st.integers(0, 2**30))
    def test_partition_exact(self, n, seed):
        events = dummy_events(n)
        train, val, test = split_dataset(events, seed=seed)
        ids = [e.event_id for e in train + val + test]
        assert len(ids) == n
        assert set(ids) == {e.event_id for e in events}
        assert len(train) == math.floor(0.7 * n + 1e-9)
        assert len(val) == math.floor(0.15 * n + 1e-9)


class TestHistogram:
    def test_binning_rule_by_hand(self):
        result = histogram([1.0, 2.0, 3.0], [0.0, 2.0, 4.0])
        assert result.counts == (1, 2)
        assert result.underflow == 0 and result.overflow == 0

    def test_empty_values(self):
        result = histogram([], [0.0, 1.0, 2.0])
        assert result.counts == (0, 0)
        assert result.total == 0

    def test_last_edge_closed(self):
        result = histogram([4.0], [0.0, 2.0, 4.0])
        assert result.counts == (0, 1)
        assert result.overflow == 0

    def test_out_of_range_counted(self):
        result = histogram([-1.0, 5.0, 1.0], [0.0, 2.0, 4.0])
        assert result.underflow == 1 and result.overflow == 1
        assert result.total == 3

    def test_non_monotone_edges(self):
        with pytest.raises(ValueError):
            histogram([1.0], [0.0, 0.0, 1.0])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(0, 300))
    def test_total_always_matches(self, seed, n):
        rng = np.random.default_rng(seed)
        values = rng.normal(0, 3, n)
        result = histogram(values, np.linspace(-2, 2, 9))
        assert result.total == n


class TestDescriptiveStats:
    def test_constant_event_time_gap(self):
        v_fv = np.full(151, 10.0)
        event = consistent_event(v_fv, v_fv, spacing0=20.0)
        report = descriptive_stats([event])
        tg = report.measures["time_gap_s"]
        assert tg.mean == pytest.approx(2.0)
        assert tg.std == pytest.approx(0.0)
        # All mass in the bin containing 2.0 s.
        edges = np.asarray(tg.hist.bin_edges)
        idx = int(np.searchsorted(edges, 2.0, side="right") - 1)
        assert tg.hist.counts[idx] == tg.count

    def test_constant_speed_zero_accel(self):
        v = np.full(151, 8.0)
        report = descriptive_stats([consistent_event(v, v)])
        accel = report.measures["abs_accel_mps2"]
        assert accel.mean == pytest.approx(0.0, abs=1e-12)
        assert accel.hist.counts[0] == accel.count

    def test_slow_steps_excluded_from_time_gap(self):
        v = np.concatenate([np.full(100, 10.0), np.full(51, 0.05)])
        report = descriptive_stats([consistent_event(v, v)])
        assert report.measures["time_gap_s"].count == 100

    def test_moments_match_flat_oracle(self, sinusoidal_events):
        report = descriptive_stats(sinusoidal_events)

        # Brute-force recomputation with plain Python loops.
        gaps, speeds, time_gaps, rels, accels, durations = [], [], [], [], [], []
        for e in sinusoidal_events:
            durations.append((len(e) - 1) * e.dt_s)
            for k in range(len(e)):
                gaps.append(float(e.spacing_m[k]))
                speeds.append(float(e.v_fv_mps[k]))
                rels.append(abs(float(e.dv_mps[k])))
                if e.v_fv_mps[k] >= 0.1:
                    time_gaps.append(float(e.spacing_m[k] / e.v_fv_mps[k]))
            for k in range(len(e) - 1):
                accels.append(abs(float(e.v_fv_mps[k + 1] - e.v_fv_mps[k])) / e.dt_s)

        expected = {
            "space_gap_m": gaps,
            "following_speed_mps": speeds,
            "time_gap_s": time_gaps,
            "abs_relative_speed_mps": rels,
            "abs_accel_mps2": accels,
            "event_duration_s": durations,
        }
        for name, values in expected.items():
            measure = report.measures[name]
            assert measure.count == len(values)
            assert measure.mean == pytest.approx(statistics.fmean(values), abs=1e-9)
            assert measure.std == pytest.approx(statistics.pstdev(values), abs=1e-9)
            assert measure.hist.total == len(values)

    def test_empty_rejected(self):
        with pytest.raises(EventDataError):
            descriptive_stats([])


class TestEventStore:
    def test_roundtrip(self, tmp_path, sinusoidal_events):
        csv_path = tmp_path / "events_test.csv"
        save_events(
            sinusoidal_events, csv_path, dataset_id="synthetic", split="test",
            criteria=ExtractionCriteria(), source_hash="abc",
        )
        loaded = load_events(csv_path)
        assert [e.event_id for e in loaded] == [e.event_id for e in sinusoidal_events]
        for a, b in zip(sinusoidal_events, loaded):
            assert np.array_equal(a.spacing_m, b.spacing_m)
            assert np.array_equal(a.v_fv_mps, b.v_fv_mps)
            assert np.array_equal(a.dv_mps, b.dv_mps)
            assert np.array_equal(a.v_lv_mps, b.v_lv_mps)
            assert a.fv_id == b.fv_id and a.lv_id == b.lv_id

    def test_save_load_save_byte_identical(self, tmp_path, sinusoidal_events):
        first = tmp_path / "events_a.csv"
        save_events(sinusoidal_events, first, dataset_id="s", split="all")
        second = tmp_path / "events_b.csv"
        save_events(load_events(first), second, dataset_id="s", split="all")
        assert first.read_bytes() == second.read_bytes()
