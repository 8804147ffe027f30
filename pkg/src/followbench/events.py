"""Car-following event extraction, filtering, splitting, and statistics.

An event is a maximal contiguous span in which one following vehicle (FV)
tracks one unchanged lead vehicle (LV) in the same lane. Events are stored
as four fixed-rate channels: net spacing, FV speed, relative speed
(FV minus LV, positive = closing), and LV speed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EventDataError
from .trajectories import VehicleTrack

logger = logging.getLogger(__name__)

#: Events shorter than this are not valid car-following events.
MIN_EVENT_DURATION_S = 15.0

#: Steps with FV speed below this are excluded from time-gap statistics.
TIME_GAP_MIN_SPEED_MPS = 0.1

#: Allowed mismatch between d(spacing)/dt and -(relative speed).
SPACING_RATE_TOLERANCE_MPS = 0.5


@dataclass(frozen=True)
class ExtractionCriteria:
    """Thresholds controlling extraction and the optional low-speed filter.

    ``min_avg_speed_mps``, ``low_speed_threshold_mps``, and
    ``low_speed_max_duration_s`` belong to :func:`low_speed_filter`, which
    is applied per dataset on demand rather than inside extraction. Setting
    one of them to None disables that criterion.
    """

    min_duration_s: float = 15.0
    max_lateral_gap_m: float = 2.0
    min_avg_speed_mps: float | None = 2.0
    low_speed_threshold_mps: float | None = 0.2
    low_speed_max_duration_s: float | None = 5.0

    def __post_init__(self) -> None:
        thresholds = (
            self.min_duration_s,
            self.max_lateral_gap_m,
            self.min_avg_speed_mps,
            self.low_speed_threshold_mps,
            self.low_speed_max_duration_s,
        )
        for value in thresholds:
            if value is not None and value <= 0:
                raise ValueError(f"criteria thresholds must be positive, got {value}")


@dataclass(eq=False)
class CarFollowingEvent:
    """Fixed-rate 4-channel car-following series plus provenance metadata.

    Channels share one length L, span ``(L-1)*dt_s >= 15 s``, keep net
    spacing positive at every observed step, and satisfy
    ``dv = v_fv - v_lv`` plus a finite-difference consistency bound between
    spacing and relative speed. Violations raise on construction.
    """

    event_id: str
    dt_s: float
    spacing_m: np.ndarray
    v_fv_mps: np.ndarray
    dv_mps: np.ndarray
    v_lv_mps: np.ndarray
    source: str = ""
    fv_is_av: bool = False
    lv_is_av: bool = False
    fv_id: int = -1
    lv_id: int = -1

    def __post_init__(self) -> None:
        for name in ("spacing_m", "v_fv_mps", "dv_mps", "v_lv_mps"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            setattr(self, name, arr)
        n = len(self.spacing_m)
        if not (len(self.v_fv_mps) == len(self.dv_mps) == len(self.v_lv_mps) == n):
            raise EventDataError(f"{self.event_id}: channel lengths differ")
        if self.dt_s <= 0:
            raise EventDataError(f"{self.event_id}: dt_s must be positive")
        if (n - 1) * self.dt_s < MIN_EVENT_DURATION_S - 1e-9:
            raise EventDataError(
                f"{self.event_id}: duration {(n - 1) * self.dt_s:.2f} s below "
                f"{MIN_EVENT_DURATION_S} s"
            )
        if not np.all(np.isfinite(self.spacing_m)) or np.min(self.spacing_m) <= 0:
            raise EventDataError(f"{self.event_id}: spacing must stay positive and finite")
        if np.max(np.abs(self.dv_mps - (self.v_fv_mps - self.v_lv_mps))) > 1e-9:
            raise EventDataError(f"{self.event_id}: dv channel != v_fv - v_lv")
        # d(spacing)/dt should match -(dv) up to smoothing/discretization slack;
        # compare against the trapezoid average of dv over each step.
        rate = np.diff(self.spacing_m) / self.dt_s
        dv_mid = 0.5 * (self.dv_mps[:-1] + self.dv_mps[1:])
        worst = float(np.max(np.abs(rate + dv_mid))) if n > 1 else 0.0
        if worst > SPACING_RATE_TOLERANCE_MPS:
            raise EventDataError(
                f"{self.event_id}: spacing rate inconsistent with relative speed "
                f"(worst {worst:.3f} m/s)"
            )

    def __len__(self) -> int:
        return len(self.spacing_m)

    @property
    def duration_s(self) -> float:
        return (len(self) - 1) * self.dt_s


def _common_dt(tracks: Sequence[VehicleTrack]) -> float:
    dts = sorted({t.dt_s for t in tracks if len(t) >= 2})
    if not dts:
        raise EventDataError("no track has two or more samples")
    if dts[-1] - dts[0] > 1e-9:
        raise EventDataError(f"tracks do not share one sampling step: {dts}")
    return dts[0]


def extract_events(
    tracks: Iterable[VehicleTrack],
    criteria: ExtractionCriteria | None = None,
) -> list[CarFollowingEvent]:
    """Cut maximal leader-constant spans out of tracks and keep the long ones.

    A step belongs to a span when the FV names a leader, that leader has a
    sample on the same time grid, the centerline lateral offset is at most
    ``criteria.max_lateral_gap_m``, and the net gap (leader rear to
    follower front) is positive. Spans lasting at least
    ``criteria.min_duration_s`` become events. FV tracks whose named leader
    is entirely absent from the input are skipped with a log message.
    """
    criteria = criteria or ExtractionCriteria()
    tracks = sorted(tracks, key=lambda t: (t.dataset_id, t.vehicle_id))
    dt = _common_dt(tracks)
    by_id = {(t.dataset_id, t.vehicle_id): t for t in tracks}
    missing_leaders: set[tuple[str, int]] = set()
    events: list[CarFollowingEvent] = []

    for fv in tracks:
        n = len(fv)
        if n < 2:
            continue
        fv_times = fv.times()
        fv_pos = fv.longitudinal_pos()
        fv_lat = fv.lateral_pos()
        fv_spd = fv.speeds()
        lead_ids = [s.preceding_vehicle_id for s in fv.samples]

        spacing = np.full(n, np.nan)
        v_lv = np.full(n, np.nan)
        lv_is_av = np.zeros(n, dtype=bool)
        valid = np.zeros(n, dtype=bool)
        for k in range(n):
            lead_id = lead_ids[k]
            if lead_id is None:
                continue
            lv = by_id.get((fv.dataset_id, lead_id))
            if lv is None:
                missing_leaders.add((fv.dataset_id, lead_id))
                continue
            lv_times = lv.times()
            j = int(round((fv_times[k] - lv_times[0]) / dt)) if lv.dt_s > 0 else 0
            if j < 0 or j >= len(lv) or abs(lv_times[j] - fv_times[k]) > 1e-6:
                continue
            lat_gap = abs(fv_lat[k] - lv.samples[j].lateral_pos_m)
            if lat_gap > criteria.max_lateral_gap_m:
                continue
            gap = (
                lv.samples[j].longitudinal_pos_m
                - lv.samples[j].vehicle_length_m
                - fv_pos[k]
            )
            if gap <= 0:
                continue
            spacing[k] = gap
            v_lv[k] = lv.samples[j].speed_mps
            lv_is_av[k] = lv.samples[j].is_av
            valid[k] = True

        # Runs break on any invalid step and on leader change.
        start = 0
        while start < n:
            if not valid[start]:
                start += 1
                continue
            stop = start + 1
            while stop < n and valid[stop] and lead_ids[stop] == lead_ids[start]:
                stop += 1
            length = stop - start
            if (length - 1) * dt >= criteria.min_duration_s - 1e-9:
                seg = slice(start, stop)
                lv_id = lead_ids[start]
                events.append(
                    CarFollowingEvent(
                        event_id=f"{fv.dataset_id}-fv{fv.vehicle_id}-lv{lv_id}-s{start}",
                        dt_s=dt,
                        spacing_m=spacing[seg].copy(),
                        v_fv_mps=fv_spd[seg].copy(),
                        dv_mps=(fv_spd[seg] - v_lv[seg]).copy(),
                        v_lv_mps=v_lv[seg].copy(),
                        source=fv.dataset_id,
                        fv_is_av=fv.samples[start].is_av,
                        lv_is_av=bool(lv_is_av[start]),
                        fv_id=fv.vehicle_id,
                        lv_id=int(lv_id),
                    )
                )
            start = stop

    for dataset_id, lead_id in sorted(missing_leaders):
        logger.warning(
            "leader %s referenced in dataset %s but absent from input; "
            "affected steps skipped",
            lead_id,
            dataset_id,
        )
    return events


def low_speed_filter(event: CarFollowingEvent, criteria: ExtractionCriteria) -> bool:
    """True to keep the event, False to drop it.

    Drops events whose mean FV speed falls below ``min_avg_speed_mps`` or
    that contain a contiguous run of FV speed below
    ``low_speed_threshold_mps`` spanning more than
    ``low_speed_max_duration_s``.
    """
    if criteria.min_avg_speed_mps is not None:
        if float(np.mean(event.v_fv_mps)) < criteria.min_avg_speed_mps:
            return False
    threshold = criteria.low_speed_threshold_mps
    max_dur = criteria.low_speed_max_duration_s
    if threshold is not None and max_dur is not None:
        below = event.v_fv_mps < threshold
        run = 0
        for flag in below:
            run = run + 1 if flag else 0
            if run > 1 and (run - 1) * event.dt_s > max_dur + 1e-9:
                return False
    return True


def split_dataset(
    events: Sequence[CarFollowingEvent],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> tuple[list[CarFollowingEvent], list[CarFollowingEvent], list[CarFollowingEvent]]:
    """Seeded shuffle into train/val/test: floor(r0*n), floor(r1*n), rest."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(events)
    if n == 0:
        raise EventDataError("cannot split an empty event collection")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    shuffled = [events[i] for i in perm]
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


@dataclass(frozen=True)
class HistogramResult:
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]
    underflow: int
    overflow: int

    @property
    def total(self) -> int:
        return sum(self.counts) + self.underflow + self.overflow


def histogram(values: Sequence[float] | np.ndarray, bin_edges: Sequence[float]) -> HistogramResult:
    """Count values into left-closed bins; the last bin also closes on the right.

    Values outside [edges[0], edges[-1]] land in the underflow/overflow
    fields, so the total always equals the number of inputs.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be >= 2 strictly increasing values")
    x = np.asarray(values, dtype=float)
    counts, _ = np.histogram(x, bins=edges)
    underflow = int(np.count_nonzero(x < edges[0]))
    overflow = int(np.count_nonzero(x > edges[-1]))
    return HistogramResult(
        bin_edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        underflow=underflow,
        overflow=overflow,
    )


@dataclass(frozen=True)
class MeasureStats:
    name: str
    unit: str
    count: int
    mean: float
    std: float
    minimum: float
    maximum: float
    hist: HistogramResult


@dataclass
class StatsReport:
    """Summary moments plus histogram tables for the six behavioral measures."""

    n_events: int
    measures: dict[str, MeasureStats] = field(default_factory=dict)


DEFAULT_BIN_EDGES: dict[str, np.ndarray] = {
    "space_gap_m": np.linspace(0.0, 120.0, 41),
    "following_speed_mps": np.linspace(0.0, 40.0, 41),
    "time_gap_s": np.linspace(0.0, 10.0, 41),
    "abs_relative_speed_mps": np.linspace(0.0, 8.0, 41),
    "abs_accel_mps2": np.linspace(0.0, 4.0, 41),
    "event_duration_s": np.linspace(0.0, 120.0, 41),
}

MEASURE_UNITS = {
    "space_gap_m": "m",
    "following_speed_mps": "m/s",
    "time_gap_s": "s",
    "abs_relative_speed_mps": "m/s",
    "abs_accel_mps2": "m/s^2",
    "event_duration_s": "s",
}


def _measure(name: str, values: np.ndarray, edges: np.ndarray) -> MeasureStats:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return MeasureStats(name, MEASURE_UNITS[name], 0, math.nan, math.nan, math.nan, math.nan, histogram(values, edges))
    return MeasureStats(
        name=name,
        unit=MEASURE_UNITS[name],
        count=int(values.size),
        mean=float(np.mean(values)),
        std=float(np.std(values)),
        minimum=float(np.min(values)),
        maximum=float(np.max(values)),
        hist=histogram(values, edges),
    )


def descriptive_stats(
    events: Sequence[CarFollowingEvent],
    bin_edges: Mapping[str, Sequence[float]] | None = None,
) -> StatsReport:
    """Pooled behavioral measures over all steps of all events.

    Space gap, following speed, absolute relative speed, and time gap are
    per-step; absolute acceleration comes from finite differences of FV
    speed (one value per step transition); duration is per event. Steps
    slower than ``TIME_GAP_MIN_SPEED_MPS`` are excluded from the time gap.
    """
    if not events:
        raise EventDataError("descriptive_stats needs at least one event")
    edges = {k: np.asarray(v, dtype=float) for k, v in (bin_edges or {}).items()}

    spacing = np.concatenate([e.spacing_m for e in events])
    v_fv = np.concatenate([e.v_fv_mps for e in events])
    dv = np.concatenate([e.dv_mps for e in events])
    mask = v_fv >= TIME_GAP_MIN_SPEED_MPS
    time_gap = spacing[mask] / v_fv[mask]
    abs_accel = np.concatenate(
        [np.abs(np.diff(e.v_fv_mps)) / e.dt_s for e in events if len(e) >= 2]
    )
    durations = np.array([e.duration_s for e in events])

    pooled = {
        "space_gap_m": spacing,
        "following_speed_mps": v_fv,
        "time_gap_s": time_gap,
        "abs_relative_speed_mps": np.abs(dv),
        "abs_accel_mps2": abs_accel,
        "event_duration_s": durations,
    }
    report = StatsReport(n_events=len(events))
    for name, values in pooled.items():
        report.measures[name] = _measure(
            name, values, edges.get(name, DEFAULT_BIN_EDGES[name])
        )
    return report


# ---------------------------------------------------------------------------
# Event store: one CSV per split plus a JSON manifest.
# ---------------------------------------------------------------------------

EVENT_CSV_HEADER = "event_id,t_index,spacing_m,v_fv_mps,dv_mps,v_lv_mps"


def _fmt(value: float) -> str:
    return repr(float(value))


def manifest_path_for(csv_path: str | Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".manifest.json")


def source_hash_of(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_events(
    events: Sequence[CarFollowingEvent],
    csv_path: str | Path,
    *,
    dataset_id: str,
    split: str,
    criteria: ExtractionCriteria | None = None,
    source_hash: str = "",
) -> Path:
    """Write the split CSV and its manifest; returns the manifest path."""
    csv_path = Path(csv_path)
    if events:
        dts = {e.dt_s for e in events}
        if max(dts) - min(dts) > 1e-9:
            raise EventDataError("events in one store must share dt_s")
        dt_s = events[0].dt_s
    else:
        dt_s = 0.0
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(EVENT_CSV_HEADER + "\n")
        for event in events:
            for k in range(len(event)):
                fh.write(
                    f"{event.event_id},{k},{_fmt(event.spacing_m[k])},"
                    f"{_fmt(event.v_fv_mps[k])},{_fmt(event.dv_mps[k])},"
                    f"{_fmt(event.v_lv_mps[k])}\n"
                )
    manifest = {
        "dataset_id": dataset_id,
        "dt_s": dt_s,
        "n_events": len(events),
        "split": split,
        "criteria": asdict(criteria) if criteria is not None else None,
        "source_hash": source_hash,
        "events": {
            e.event_id: {
                "source": e.source,
                "fv_id": e.fv_id,
                "lv_id": e.lv_id,
                "fv_is_av": e.fv_is_av,
                "lv_is_av": e.lv_is_av,
            }
            for e in events
        },
    }
    mpath = manifest_path_for(csv_path)
    with mpath.open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return mpath


def load_events(csv_path: str | Path) -> list[CarFollowingEvent]:
    """Read a split CSV plus its sibling manifest back into events."""
    csv_path = Path(csv_path)
    with manifest_path_for(csv_path).open(encoding="utf-8") as fh:
        manifest = json.load(fh)
    dt_s = float(manifest["dt_s"])
    meta = manifest.get("events", {})

    order: list[str] = []
    columns: dict[str, list[list[float]]] = {}
    with csv_path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != EVENT_CSV_HEADER:
            raise EventDataError(f"{csv_path}: unexpected header {header!r}")
        for line in fh:
            event_id, t_index, *values = line.rstrip("\n").split(",")
            if event_id not in columns:
                columns[event_id] = [[], [], [], []]
                order.append(event_id)
            rows = columns[event_id]
            if int(t_index) != len(rows[0]):
                raise EventDataError(f"{csv_path}: t_index gap in event {event_id}")
            for i in range(4):
                rows[i].append(float(values[i]))

    events = []
    for event_id in order:
        spacing, v_fv, dv, v_lv = (np.array(c) for c in columns[event_id])
        info = meta.get(event_id, {})
        events.append(
            CarFollowingEvent(
                event_id=event_id,
                dt_s=dt_s,
                spacing_m=spacing,
                v_fv_mps=v_fv,
                dv_mps=dv,
                v_lv_mps=v_lv,
                source=info.get("source", manifest.get("dataset_id", "")),
                fv_is_av=bool(info.get("fv_is_av", False)),
                lv_is_av=bool(info.get("lv_is_av", False)),
                fv_id=int(info.get("fv_id", -1)),
                lv_id=int(info.get("lv_id", -1)),
            )
        )
    return events
