#!/usr/bin/env python3
"""Regenerate the bundled trajectory fixtures (deterministic).

    fixtures/mini.csv        -- 9 vehicles exercising every extraction rule
    fixtures/tracks_200.csv  -- 200-vehicle synthetic corpus (100 FV/LV pairs)

Run from the repository root: python scripts/make_fixtures.py
"""

from pathlib import Path

from followbench.models.classic import IDMParams
from followbench.sim import LeaderProfile, synthesize_dataset, tracks_from_events
from followbench.trajectories import TrajectorySample, VehicleTrack, save_tracks

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"


def pair(fv_id, lv_id, n, v, spacing, dataset, lateral=None, lead_ids=None, dt=0.1):
    lateral = lateral if lateral is not None else [0.0] * n
    lead_ids = lead_ids if lead_ids is not None else [lv_id] * n
    fv = VehicleTrack(
        fv_id,
        dataset,
        dt,
        [
            TrajectorySample(
                time_s=k * dt,
                longitudinal_pos_m=v * k * dt,
                lateral_pos_m=lateral[k],
                speed_mps=v,
                lane_id=1,
                vehicle_length_m=4.5,
                preceding_vehicle_id=lead_ids[k],
            )
            for k in range(n)
        ],
    )
    lv = VehicleTrack(
        lv_id,
        dataset,
        dt,
        [
            TrajectorySample(
                time_s=k * dt,
                longitudinal_pos_m=spacing + 5.0 + v * k * dt,
                lateral_pos_m=0.0,
                speed_mps=v,
                lane_id=1,
                vehicle_length_m=5.0,
            )
            for k in range(n)
        ],
    )
    return [fv, lv]


def make_mini() -> None:
    tracks = []
    # Pair A: fully compliant 20 s span -> exactly one event.
    tracks += pair(1, 2, n=201, v=12.0, spacing=20.0, dataset="mini")
    # Pair B: 14.9 s, just under the duration threshold -> no event.
    tracks += pair(3, 4, n=150, v=12.0, spacing=20.0, dataset="mini")
    # Pair C: leader id switches mid-span; both sides too short -> no event.
    lead_ids = [6] * 100 + [9] * 101
    tracks += pair(5, 6, n=201, v=12.0, spacing=20.0, dataset="mini", lead_ids=lead_ids)
    extra_leader = VehicleTrack(
        9,
        "mini",
        0.1,
        [
            TrajectorySample(k * 0.1, 40.0 + 12.0 * k * 0.1, 0.0, 12.0, 1, 5.0)
            for k in range(201)
        ],
    )
    tracks.append(extra_leader)
    # Pair D: one 2.5 m lateral excursion splits the span -> no event.
    lateral = [0.0] * 201
    lateral[100] = 2.5
    tracks += pair(7, 8, n=201, v=12.0, spacing=20.0, dataset="mini", lateral=lateral)
    save_tracks(tracks, FIXTURES / "mini.csv")


def make_tracks_200() -> None:
    generator = IDMParams(a0=1.2, b=1.8, v_des=28.0, t_des=1.4, s0=2.5, lambda_exp=4.0)
    profile = LeaderProfile(
        kind="sinusoidal",
        duration_s=20.0,
        base_speed_mps=14.0,
        amplitude_mps=2.5,
        period_s=11.0,
    )
    events = synthesize_dataset(
        100,
        profile,
        generator,
        noise_std=0.05,
        seed=2024,
        dataset_id="fixture200",
        speed_spread_mps=5.0,
        period_spread_s=3.0,
    )
    tracks = tracks_from_events(events)
    save_tracks(tracks, FIXTURES / "tracks_200.csv")


if __name__ == "__main__":
    FIXTURES.mkdir(exist_ok=True)
    make_mini()
    make_tracks_200()
    for name in ("mini.csv", "tracks_200.csv"):
        path = FIXTURES / name
        rows = sum(1 for _ in path.open()) - 1
        print(f"{path}: {rows} data rows")
