import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from followbench.errors import TrackDataError
from followbench.trajectories import (
    TrajectorySample,
    VehicleTrack,
    load_tracks,
    resample,
    save_tracks,
    savitzky_golay,
    smooth_track,
)


def write_csv(path, rows, header=None):
    header = header or (
        "dataset_id,vehicle_id,time_s,lane_id,longitudinal_pos_m,lateral_pos_m,"
        "speed_mps,accel_mps2,preceding_vehicle_id,vehicle_length_m,is_av"
    )
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))


def make_track(vehicle_id=1, n=5, dt=0.1, v=10.0, x0=0.0, lat=0.0, lead=None):
    samples = [
        TrajectorySample(
            time_s=k * dt,
            longitudinal_pos_m=x0 + v * k * dt,
            lateral_pos_m=lat,
            speed_mps=v,
            lane_id=1,
            vehicle_length_m=5.0,
            preceding_vehicle_id=lead,
        )
        for k in range(n)
    ]
    return VehicleTrack(vehicle_id=vehicle_id, dataset_id="d", dt_s=dt, samples=samples)


class TestLoadTracks:
    def test_two_vehicles_three_rows_each(self, tmp_path):
        rows = [
            f"d,1,{k * 0.1!r},1,{k * 1.0},0.0,10.0,,,5.0,0" for k in range(3)
        ] + [
            f"d,2,{k * 0.1!r},1,{k * 1.0},0.0,10.0,,,5.0,0" for k in range(3)
        ]
        path = tmp_path / "t.csv"
        write_csv(path, rows)
        tracks = load_tracks(path)
        assert len(tracks) == 2
        assert [len(t) for t in tracks] == [3, 3]
        assert tracks[0].vehicle_id == 1 and tracks[1].vehicle_id == 2

    def test_duplicate_vehicle_time_names_line(self, tmp_path):
        rows = [
            "d,1,0.0,1,0.0,0.0,10.0,,,5.0,0",
            "d,1,0.1,1,1.0,0.0,10.0,,,5.0,0",
            "d,1,0.1,1,1.0,0.0,10.0,,,5.0,0",
        ]
        path = tmp_path / "dup.csv"
        write_csv(path, rows)
        with pytest.raises(TrackDataError, match="line 4"):
            load_tracks(path)

    def test_decreasing_time_rejected(self, tmp_path):
        rows = [
            "d,1,0.1,1,0.0,0.0,10.0,,,5.0,0",
            "d,1,0.0,1,1.0,0.0,10.0,,,5.0,0",
        ]
        path = tmp_path / "rev.csv"
        write_csv(path, rows)
        with pytest.raises(TrackDataError, match="line 3"):
            load_tracks(path)

    def test_missing_mandatory_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("dataset_id,vehicle_id,time_s\nd,1,0.0\n")
        with pytest.raises(TrackDataError, match="missing mandatory column"):
            load_tracks(path)

    def test_malformed_float_names_line(self, tmp_path):
        rows = [
            "d,1,0.0,1,0.0,0.0,10.0,,,5.0,0",
            "d,1,0.1,1,oops,0.0,10.0,,,5.0,0",
        ]
        path = tmp_path / "bad.csv"
        write_csv(path, rows)
        with pytest.raises(TrackDataError, match="line 3"):
            load_tracks(path)

    def test_schema_mapping_and_defaults(self, tmp_path):
        path = tmp_path / "foreign.csv"
        path.write_text(
            "Vehicle_ID,Global_Time,Local_X,Local_Y,v_Vel,v_Length,Lane_ID,Preceding\n"
            "7,0.0,100.0,3.5,12.0,4.8,2,9\n"
            "7,0.1,101.2,3.5,12.0,4.8,2,9\n"
        )
        schema = {
            "vehicle_id": "Vehicle_ID",
            "time_s": "Global_Time",
            "longitudinal_pos_m": "Local_X",
            "lateral_pos_m": "Local_Y",
            "speed_mps": "v_Vel",
            "vehicle_length_m": "v_Length",
            "lane_id": "Lane_ID",
            "preceding_vehicle_id": "Preceding",
        }
        tracks = load_tracks(path, schema=schema, defaults={"dataset_id": "ngsim"})
        assert len(tracks) == 1
        track = tracks[0]
        assert track.dataset_id == "ngsim"
        assert track.samples[0].preceding_vehicle_id == 9
        assert track.samples[0].accel_mps2 is None

    def test_bundled_200_vehicle_fixture(self, fixture_dir):
        path = fixture_dir / "tracks_200.csv"
        # Independent oracle: raw line count.
        n_rows = sum(1 for _ in path.open()) - 1
        tracks = load_tracks(path)
        assert len(tracks) == 200
        assert sum(len(t) for t in tracks) == n_rows

    def test_roundtrip_bit_identical(self, tmp_path):
        rows = [
            "d,1,0.0,1,0.0,0.25,10.0,0.5,2,5.0,0",
            "d,1,0.1,1,1.0045,0.25,10.1,0.5,2,5.0,0",
            "d,2,0.0,2,30.0,3.7,9.9,,,4.5,1",
            "d,2,0.1,2,30.99,3.7,9.8,,,4.5,1",
        ]
        original = tmp_path / "orig.csv"
        write_csv(original, rows)
        first = tmp_path / "first.csv"
        save_tracks(load_tracks(original), first)
        second = tmp_path / "second.csv"
        save_tracks(load_tracks(first), second)
        assert first.read_bytes() == second.read_bytes()


class TestResample:
    def test_constant_speed_downsample(self):
        track = make_track(n=51, dt=0.04, v=8.0)  # 25 Hz
        out = resample(track, 0.1)
        assert out.dt_s == 0.1
        assert np.allclose(out.speeds(), 8.0)
        assert out.times()[-1] <= track.times()[-1] + 1e-12

    def test_linear_interpolation_by_hand(self):
        samples = [
            TrajectorySample(0.08, 0.0, 0.0, 8.0, 1, 5.0),
            TrajectorySample(0.12, 0.4, 0.0, 12.0, 1, 5.0),
        ]
        track = VehicleTrack(1, "d", 0.04, samples)
        out = resample(track, 0.02)
        # Query grid lands on t = 0.08, 0.10, 0.12; midpoint speed is 10.
        assert len(out) == 3
        assert out.samples[1].time_s == pytest.approx(0.10)
        assert out.samples[1].speed_mps == pytest.approx(10.0)

    def test_identity_when_rates_match(self):
        track = make_track(n=20, dt=0.1, v=5.0)
        out = resample(track, 0.1)
        assert out == track

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        samples = [
            TrajectorySample(
                time_s=k * 0.04,
                longitudinal_pos_m=float(k * 0.3 + rng.normal(0, 0.01)),
                lateral_pos_m=0.0,
                speed_mps=float(8 + rng.uniform(-1, 1)),
                lane_id=1,
                vehicle_length_m=5.0,
            )
            for k in range(60)
        ]
        track = VehicleTrack(1, "d", 0.04, samples)
        once = resample(track, 0.1)
        twice = resample(once, 0.1)
        assert np.allclose(once.speeds(), twice.speeds(), atol=1e-9)
        assert np.allclose(once.longitudinal_pos(), twice.longitudinal_pos(), atol=1e-9)
        assert np.allclose(once.times(), twice.times(), atol=1e-9)

    def test_labels_from_nearest_sample(self):
        samples = [
            TrajectorySample(k * 0.04, k * 0.4, 0.0, 10.0, 1 if k < 30 else 2, 5.0, preceding_vehicle_id=7 if k < 30 else 8)
            for k in range(60)
        ]
        track = VehicleTrack(1, "d", 0.04, samples)
        out = resample(track, 0.1)
        switch_time = 30 * 0.04
        for s in out.samples:
            expected = 7 if s.time_s < switch_time - 0.02 else 8
            if abs(s.time_s - switch_time) > 0.02:  # skip the ambiguous midpoint
                assert s.preceding_vehicle_id == expected

    def test_too_short_raises(self):
        track = make_track(n=2, dt=0.04)
        with pytest.raises(TrackDataError, match="shorter"):
            resample(track, 1.0)


def savgol_oracle(x, window, polyorder):
    """Independent per-window least-squares fit, evaluated pointwise."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    half = window // 2
    out = np.empty(n)
    for i in range(n):
        if i < half:
            start, pos = 0, i
        elif i >= n - half:
            start, pos = n - window, i - (n - window)
        else:
            start, pos = i - half, half
        idx = np.arange(window, dtype=float)
        coeffs = np.polyfit(idx, x[start : start + window], polyorder)
        out[i] = np.polyval(coeffs, float(pos))
    return out


class TestSavitzkyGolay:
    def test_cubic_reproduced(self):
        t = np.linspace(-2.0, 3.0, 200)
        x = t**3 - 2 * t**2 + 0.5 * t - 1.0
        out = savitzky_golay(x, 11, 3)
        assert np.max(np.abs(out - x)) < 1e-9

    def test_constant_unchanged(self):
        x = np.full(40, 3.25)
        assert np.allclose(savitzky_golay(x, 11, 3), x, atol=1e-12)

    def test_noisy_sine_matches_per_window_fit_oracle(self):
        rng = np.random.default_rng(42)
        t = np.linspace(0, 4 * np.pi, 120)
        x = np.sin(t) + rng.normal(0, 0.1, t.size)
        out = savitzky_golay(x, 11, 3)
        assert np.max(np.abs(out - savgol_oracle(x, 11, 3))) < 1e-9

    def test_validation_errors(self):
        x = np.arange(30.0)
        with pytest.raises(ValueError):
            savitzky_golay(x, 10, 3)
        with pytest.raises(ValueError):
            savitzky_golay(x, 11, 11)
        with pytest.raises(ValueError):
            savitzky_golay(x[:5], 11, 3)

    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        a=st.floats(-3, 3, allow_nan=False),
        b=st.floats(-3, 3, allow_nan=False),
    )
    def test_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x = rng.normal(0, 1, 60)
        y = rng.normal(0, 1, 60)
        left = savitzky_golay(a * x + b * y, 11, 3)
        right = a * savitzky_golay(x, 11, 3) + b * savitzky_golay(y, 11, 3)
        assert np.max(np.abs(left - right)) < 1e-9

    def test_mirror_mode_interior_matches(self):
        rng = np.random.default_rng(5)
        x = rng.normal(0, 1, 80)
        interp = savitzky_golay(x, 11, 3, mode="interp")
        mirror = savitzky_golay(x, 11, 3, mode="mirror")
        assert np.allclose(interp[5:-5], mirror[5:-5], atol=1e-12)


class TestSmoothTrack:
    def test_accel_derived_from_smoothed_speed(self):
        track = make_track(n=40, dt=0.1, v=10.0)
        out = smooth_track(track)
        assert all(s.accel_mps2 == pytest.approx(0.0, abs=1e-9) for s in out.samples)

    def test_short_track_unchanged(self):
        track = make_track(n=5)
        assert smooth_track(track) == track
