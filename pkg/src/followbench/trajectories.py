"""Loading, validation, resampling, and smoothing of vehicle trajectory files.

The canonical trajectory CSV carries one row per (vehicle, time) sample:

    dataset_id,vehicle_id,time_s,lane_id,longitudinal_pos_m,lateral_pos_m,
    speed_mps,accel_mps2,preceding_vehicle_id,vehicle_length_m,is_av

Empty cells mean "missing optional value" (allowed for accel_mps2,
preceding_vehicle_id, and is_av). Foreign files (NGSIM/HighD-style exports)
are adapted onto this header through a column-name mapping plus per-column
defaults. All units are SI: meters, seconds, m/s, m/s^2.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import TrackDataError

CANONICAL_COLUMNS = (
    "dataset_id",
    "vehicle_id",
    "time_s",
    "lane_id",
    "longitudinal_pos_m",
    "lateral_pos_m",
    "speed_mps",
    "accel_mps2",
    "preceding_vehicle_id",
    "vehicle_length_m",
    "is_av",
)

MANDATORY_COLUMNS = (
    "dataset_id",
    "vehicle_id",
    "time_s",
    "lane_id",
    "longitudinal_pos_m",
    "lateral_pos_m",
    "speed_mps",
    "vehicle_length_m",
)

#: Sample times within a track must step by a constant amount up to this slack.
DT_TOLERANCE_S = 1e-6


@dataclass(frozen=True)
class TrajectorySample:
    """One time-stamped kinematic observation of a single vehicle."""

    time_s: float
    longitudinal_pos_m: float
    lateral_pos_m: float
    speed_mps: float
    lane_id: int
    vehicle_length_m: float
    accel_mps2: float | None = None
    preceding_vehicle_id: int | None = None
    is_av: bool = False

    def __post_init__(self) -> None:
        if not math.isfinite(self.time_s):
            raise TrackDataError(f"non-finite sample time {self.time_s!r}")
        if self.speed_mps < 0:
            raise TrackDataError(f"negative speed {self.speed_mps!r} at t={self.time_s}")
        if self.vehicle_length_m <= 0:
            raise TrackDataError(f"non-positive vehicle length {self.vehicle_length_m!r}")


@dataclass
class VehicleTrack:
    """All samples of one vehicle at a fixed sampling step.

    Invariants (checked on construction): sample times strictly increasing
    with constant step ``dt_s`` up to ``DT_TOLERANCE_S``. Single-sample
    tracks carry ``dt_s = 0.0``.
    """

    vehicle_id: int
    dataset_id: str
    dt_s: float
    samples: list[TrajectorySample] = field(default_factory=list)

    def __post_init__(self) -> None:
        times = [s.time_s for s in self.samples]
        for prev, cur in zip(times, times[1:]):
            if cur <= prev:
                raise TrackDataError(
                    f"vehicle {self.vehicle_id}: non-increasing time "
                    f"{prev} -> {cur}"
                )
        if len(times) >= 2:
            steps = np.diff(times)
            if np.max(np.abs(steps - self.dt_s)) > DT_TOLERANCE_S:
                raise TrackDataError(
                    f"vehicle {self.vehicle_id}: non-constant sampling step "
                    f"(dt={self.dt_s}, worst deviation "
                    f"{np.max(np.abs(steps - self.dt_s)):.3e} s)"
                )

    def __len__(self) -> int:
        return len(self.samples)

    # Array views used by extraction and smoothing. Rebuilt on each call;
    # tracks are small enough that caching is not worth the mutability risk.
    def times(self) -> np.ndarray:
        return np.array([s.time_s for s in self.samples], dtype=float)

    def longitudinal_pos(self) -> np.ndarray:
        return np.array([s.longitudinal_pos_m for s in self.samples], dtype=float)

    def lateral_pos(self) -> np.ndarray:
        return np.array([s.lateral_pos_m for s in self.samples], dtype=float)

    def speeds(self) -> np.ndarray:
        return np.array([s.speed_mps for s in self.samples], dtype=float)

    def accels(self) -> np.ndarray:
        """Acceleration channel with NaN where the sample carries none."""
        return np.array(
            [math.nan if s.accel_mps2 is None else s.accel_mps2 for s in self.samples],
            dtype=float,
        )


def _parse_float(text: str, column: str, line_num: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise TrackDataError(f"line {line_num}: bad value {text!r} in column {column}")
    if not math.isfinite(value):
        raise TrackDataError(f"line {line_num}: non-finite value in column {column}")
    return value


def _parse_int(text: str, column: str, line_num: int) -> int:
    try:
        return int(text)
    except ValueError:
        pass
    # Tolerate integral floats ("12.0"), common in foreign exports.
    try:
        value = float(text)
    except ValueError:
        raise TrackDataError(f"line {line_num}: bad value {text!r} in column {column}")
    if value != int(value):
        raise TrackDataError(f"line {line_num}: non-integer value {text!r} in column {column}")
    return int(value)


def _parse_bool(text: str, column: str, line_num: int) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes"):
        return True
    if lowered in ("", "0", "false", "no"):
        return False
    raise TrackDataError(f"line {line_num}: bad boolean {text!r} in column {column}")


def load_tracks(
    source: str | Path,
    schema: Mapping[str, str] | None = None,
    defaults: Mapping[str, object] | None = None,
) -> list[VehicleTrack]:
    """Read a trajectory CSV into per-vehicle tracks.

    ``schema`` maps canonical column names onto the file's own header names
    (identity for unmapped columns). ``defaults`` supplies constant values
    for canonical columns the file does not carry at all (e.g. a foreign
    file without a ``dataset_id`` column).

    Rows must be time-sorted within each vehicle; a repeated or decreasing
    timestamp raises :class:`TrackDataError` naming the offending line.
    Tracks come back sorted by (dataset_id, vehicle_id).
    """
    source = Path(source)
    schema = dict(schema or {})
    defaults = dict(defaults or {})
    colmap = {canon: schema.get(canon, canon) for canon in CANONICAL_COLUMNS}

    with source.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise TrackDataError(f"{source}: empty file")
        header = set(reader.fieldnames)
        for canon in MANDATORY_COLUMNS:
            if colmap[canon] not in header and canon not in defaults:
                raise TrackDataError(
                    f"{source}: missing mandatory column {colmap[canon]!r}"
                )

        def cell(row: dict, canon: str) -> str:
            name = colmap[canon]
            if name in row and row[name] is not None:
                return row[name]
            if canon in defaults:
                return str(defaults[canon])
            return ""

        grouped: dict[tuple[str, int], list[TrajectorySample]] = {}
        last_time: dict[tuple[str, int], tuple[float, int]] = {}
        for row in reader:
            line = reader.line_num
            dataset_id = cell(row, "dataset_id")
            vehicle_id = _parse_int(cell(row, "vehicle_id"), "vehicle_id", line)
            time_s = _parse_float(cell(row, "time_s"), "time_s", line)
            accel_text = cell(row, "accel_mps2")
            preceding_text = cell(row, "preceding_vehicle_id")
            try:
                sample = TrajectorySample(
                    time_s=time_s,
                    longitudinal_pos_m=_parse_float(
                        cell(row, "longitudinal_pos_m"), "longitudinal_pos_m", line
                    ),
                    lateral_pos_m=_parse_float(
                        cell(row, "lateral_pos_m"), "lateral_pos_m", line
                    ),
                    speed_mps=_parse_float(cell(row, "speed_mps"), "speed_mps", line),
                    lane_id=_parse_int(cell(row, "lane_id"), "lane_id", line),
                    vehicle_length_m=_parse_float(
                        cell(row, "vehicle_length_m"), "vehicle_length_m", line
                    ),
                    accel_mps2=(
                        None if accel_text == "" else _parse_float(accel_text, "accel_mps2", line)
                    ),
                    preceding_vehicle_id=(
                        None
                        if preceding_text == ""
                        else _parse_int(preceding_text, "preceding_vehicle_id", line)
                    ),
                    is_av=_parse_bool(cell(row, "is_av"), "is_av", line),
                )
            except TrackDataError as exc:
                raise TrackDataError(f"line {line}: {exc}") from None
            key = (dataset_id, vehicle_id)
            if key in last_time:
                prev_t, prev_line = last_time[key]
                if time_s == prev_t:
                    raise TrackDataError(
                        f"line {line}: duplicate (vehicle {vehicle_id}, t={time_s}) "
                        f"already seen on line {prev_line}"
                    )
                if time_s < prev_t:
                    raise TrackDataError(
                        f"line {line}: time {time_s} not increasing for vehicle "
                        f"{vehicle_id} (previous {prev_t} on line {prev_line})"
                    )
            last_time[key] = (time_s, line)
            grouped.setdefault(key, []).append(sample)

    tracks = []
    for (dataset_id, vehicle_id), samples in sorted(grouped.items()):
        times = [s.time_s for s in samples]
        dt = float(np.median(np.diff(times))) if len(times) >= 2 else 0.0
        tracks.append(
            VehicleTrack(vehicle_id=vehicle_id, dataset_id=dataset_id, dt_s=dt, samples=samples)
        )
    return tracks


def _format_float(value: float) -> str:
    # repr round-trips doubles exactly, which keeps save->load->save
    # byte-identical for canonical files.
    return repr(float(value))


def save_tracks(tracks: Iterable[VehicleTrack], dest: str | Path) -> None:
    """Write tracks to a canonical trajectory CSV (see module docstring)."""
    dest = Path(dest)
    with dest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CANONICAL_COLUMNS)
        for track in tracks:
            for s in track.samples:
                writer.writerow(
                    [
                        track.dataset_id,
                        track.vehicle_id,
                        _format_float(s.time_s),
                        s.lane_id,
                        _format_float(s.longitudinal_pos_m),
                        _format_float(s.lateral_pos_m),
                        _format_float(s.speed_mps),
                        "" if s.accel_mps2 is None else _format_float(s.accel_mps2),
                        "" if s.preceding_vehicle_id is None else s.preceding_vehicle_id,
                        _format_float(s.vehicle_length_m),
                        "1" if s.is_av else "0",
                    ]
                )


def _nearest_indices(times: np.ndarray, query: np.ndarray) -> np.ndarray:
    right = np.searchsorted(times, query)
    right = np.clip(right, 1, len(times) - 1)
    left = right - 1
    pick_right = (times[right] - query) < (query - times[left])
    return np.where(pick_right, right, left)


def resample(track: VehicleTrack, target_dt_s: float) -> VehicleTrack:
    """Re-grid a track to samples at t0, t0+dt, ... within the original span.

    Positions, speed, and (when present on every sample) acceleration are
    linearly interpolated; lane, leader id, AV flag, and vehicle length are
    taken from the nearest original sample.
    """
    if target_dt_s <= 0:
        raise ValueError(f"target_dt_s must be positive, got {target_dt_s}")
    if len(track.samples) < 2:
        raise TrackDataError(f"vehicle {track.vehicle_id}: need >= 2 samples to resample")
    times = track.times()
    span = times[-1] - times[0]
    if span < target_dt_s - 1e-9:
        raise TrackDataError(
            f"vehicle {track.vehicle_id}: span {span:.3f} s shorter than one "
            f"target step {target_dt_s} s"
        )
    n_out = int(math.floor(span / target_dt_s + 1e-9)) + 1
    # Grid built by direct multiplication (not cumulative addition) so that
    # resampling twice at the same rate lands on identical grid points.
    new_times = times[0] + target_dt_s * np.arange(n_out)

    pos = np.interp(new_times, times, track.longitudinal_pos())
    lat = np.interp(new_times, times, track.lateral_pos())
    spd = np.interp(new_times, times, track.speeds())
    accels = track.accels()
    have_accel = not np.isnan(accels).any()
    acc = np.interp(new_times, times, accels) if have_accel else None

    nearest = _nearest_indices(times, new_times)
    samples = []
    for k in range(n_out):
        src = track.samples[int(nearest[k])]
        samples.append(
            TrajectorySample(
                time_s=float(new_times[k]),
                longitudinal_pos_m=float(pos[k]),
                lateral_pos_m=float(lat[k]),
                speed_mps=float(max(spd[k], 0.0)),
                lane_id=src.lane_id,
                vehicle_length_m=src.vehicle_length_m,
                accel_mps2=float(acc[k]) if acc is not None else None,
                preceding_vehicle_id=src.preceding_vehicle_id,
                is_av=src.is_av,
            )
        )
    return VehicleTrack(
        vehicle_id=track.vehicle_id,
        dataset_id=track.dataset_id,
        dt_s=target_dt_s,
        samples=samples,
    )


def savitzky_golay(
    series: Sequence[float] | np.ndarray,
    window: int,
    polyorder: int,
    mode: str = "interp",
) -> np.ndarray:
    """Least-squares polynomial smoothing over a sliding window.

    Each interior output point is the center value of the degree-``polyorder``
    least-squares fit over the surrounding ``window`` samples. With the
    default ``mode="interp"`` the first/last half-windows are filled by
    fitting one polynomial over the first/last ``window`` samples and
    evaluating it at the edge positions, which reproduces any polynomial of
    degree <= polyorder exactly over the whole output. ``mode="mirror"``
    instead reflect-pads the series before filtering (polynomial inputs are
    then distorted near the edges).
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError("series must be one-dimensional")
    if window % 2 == 0 or window < 3:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if polyorder >= window:
        raise ValueError(f"polyorder {polyorder} must be < window {window}")
    if x.size < window:
        raise ValueError(f"series of length {x.size} shorter than window {window}")

    half = window // 2
    offsets = np.arange(-half, half + 1)
    design = np.vander(offsets, polyorder + 1, increasing=True)
    # Row 0 of the pseudo-inverse evaluates the LS fit at the window center.
    taps = np.linalg.pinv(design)[0]

    if mode == "mirror":
        padded = np.pad(x, half, mode="reflect")
        return np.correlate(padded, taps, mode="valid")
    if mode != "interp":
        raise ValueError(f"unknown edge mode {mode!r}")

    out = np.empty_like(x)
    out[half : x.size - half] = np.correlate(x, taps, mode="valid")
    head = np.polyfit(np.arange(window, dtype=float), x[:window], polyorder)
    out[:half] = np.polyval(head, np.arange(half, dtype=float))
    tail = np.polyfit(np.arange(window, dtype=float), x[-window:], polyorder)
    out[x.size - half :] = np.polyval(tail, np.arange(window - half, window, dtype=float))
    return out


def smooth_track(
    track: VehicleTrack,
    window: int = 11,
    polyorder: int = 3,
    mode: str = "interp",
) -> VehicleTrack:
    """Smooth position and speed channels of a track independently.

    Speeds are floored at zero after filtering. The acceleration channel is
    smoothed when fully present; otherwise it is derived from the smoothed
    speed by central differences. Tracks shorter than the window are
    returned unchanged.
    """
    if len(track.samples) < window:
        return track
    pos = savitzky_golay(track.longitudinal_pos(), window, polyorder, mode)
    lat = savitzky_golay(track.lateral_pos(), window, polyorder, mode)
    spd = np.maximum(savitzky_golay(track.speeds(), window, polyorder, mode), 0.0)
    accels = track.accels()
    if np.isnan(accels).any():
        if track.dt_s > 0:
            acc = np.gradient(spd, track.dt_s)
        else:
            acc = np.zeros_like(spd)
    else:
        acc = savitzky_golay(accels, window, polyorder, mode)
    samples = [
        replace(
            s,
            longitudinal_pos_m=float(pos[k]),
            lateral_pos_m=float(lat[k]),
            speed_mps=float(spd[k]),
            accel_mps2=float(acc[k]),
        )
        for k, s in enumerate(track.samples)
    ]
    return VehicleTrack(
        vehicle_id=track.vehicle_id,
        dataset_id=track.dataset_id,
        dt_s=track.dt_s,
        samples=samples,
    )
