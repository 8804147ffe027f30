"""Closed-loop rollout of an acceleration policy against an observed leader.

The leader replays its recorded speed profile (open loop); the follower is
integrated with a ballistic update whose speed floors at zero. The same
integrator drives the reinforcement-learning environment, the calibrator's
vectorized fitness, and the synthetic-event generator, so their
trajectories agree step for step.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ModelEvaluationError, SynthesisError
from .events import CarFollowingEvent
from .models.base import AccelerationPolicy, CFState, ReplayAccelerationPolicy
from .models.classic import IDMParams, IDMPolicy, idm_equilibrium_spacing
from .trajectories import TrajectorySample, VehicleTrack


def ballistic_step(x: float, v: float, a: float, dt: float) -> tuple[float, float]:
    """Advance position/speed one step; speed floors at zero.

    If the commanded deceleration would drive the speed negative, the
    vehicle covers only the distance to standstill instead of reversing.
    """
    v_next = v + a * dt
    if v_next < 0.0:
        dx = -0.5 * v * v / a if a < 0.0 else 0.0
        return x + dx, 0.0
    return x + (v * dt + 0.5 * a * dt * dt), v_next


def lv_rear_positions(event: CarFollowingEvent) -> np.ndarray:
    """Leader rear-bumper positions from trapezoidal integration of LV speed.

    The follower's front bumper starts at the origin, so index 0 equals the
    observed initial spacing.
    """
    v = event.v_lv_mps
    pos = np.empty(len(v))
    pos[0] = event.spacing_m[0]
    if len(v) > 1:
        pos[1:] = event.spacing_m[0] + np.cumsum(0.5 * (v[:-1] + v[1:]) * event.dt_s)
    return pos


@dataclass
class RolloutResult:
    """Simulated follower trajectory against one event's leader profile."""

    spacing_sim_m: np.ndarray
    v_sim_mps: np.ndarray
    a_sim_mps2: np.ndarray
    collided: bool
    collision_step: int | None
    steps_completed: int

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_index", "spacing_sim_m", "v_sim_mps", "a_sim_mps2"])
            for k in range(self.steps_completed):
                writer.writerow(
                    [
                        k,
                        repr(float(self.spacing_sim_m[k])),
                        repr(float(self.v_sim_mps[k])),
                        repr(float(self.a_sim_mps2[k])),
                    ]
                )


def rollout(policy: AccelerationPolicy, event: CarFollowingEvent) -> RolloutResult:
    """Simulate the follower under ``policy`` for the whole event.

    The follower starts from the observed initial spacing and speed. The
    policy's history ring is seeded by replicating the step-0 observation.
    Terminates early when spacing reaches zero (collision); the collision
    step is recorded with a zero placeholder action.
    """
    n = len(event)
    dt = event.dt_s
    x_lv = lv_rear_positions(event)
    v_lv = event.v_lv_mps

    depth = max(int(getattr(policy, "history_steps", 0)), 0)
    initial = (float(event.spacing_m[0]), float(event.dv_mps[0]), float(event.v_fv_mps[0]))
    ring: deque[tuple[float, float, float]] = deque([initial] * depth, maxlen=depth or 1)

    policy.reset(event)
    x = 0.0
    v = float(event.v_fv_mps[0])
    spacing_sim = np.empty(n)
    v_sim = np.empty(n)
    a_sim = np.empty(n)
    collided = False
    collision_step: int | None = None
    steps = 0

    for k in range(n):
        spacing_k = x_lv[k] - x
        spacing_sim[k] = spacing_k
        v_sim[k] = v
        steps = k + 1
        if spacing_k <= 0.0:
            collided = True
            collision_step = k
            a_sim[k] = 0.0
            break
        state = CFState(
            spacing_m=spacing_k,
            v_fv_mps=v,
            dv_mps=v - float(v_lv[k]),
            v_lv_mps=float(v_lv[k]),
            dt_s=dt,
            history=tuple(ring) if depth else (),
        )
        a = float(policy.accel(state))
        if not math.isfinite(a):
            raise ModelEvaluationError(
                f"policy {policy.name!r} returned non-finite acceleration at "
                f"step {k} of event {event.event_id}"
            )
        a_sim[k] = a
        if k == n - 1:
            break
        if depth:
            ring.append((spacing_k, v - float(v_lv[k]), v))
        x, v = ballistic_step(x, v, a, dt)

    return RolloutResult(
        spacing_sim_m=spacing_sim[:steps],
        v_sim_mps=v_sim[:steps],
        a_sim_mps2=a_sim[:steps],
        collided=collided,
        collision_step=collision_step,
        steps_completed=steps,
    )


def derived_accel_targets(event: CarFollowingEvent) -> np.ndarray:
    """One-step finite-difference accelerations of the observed FV speed."""
    if len(event) < 2:
        raise ValueError("event must have at least two samples")
    return np.diff(event.v_fv_mps) / event.dt_s


def make_replay_policy(event: CarFollowingEvent) -> ReplayAccelerationPolicy:
    """Replay oracle: feeds back the event's own derived accelerations."""
    return ReplayAccelerationPolicy(derived_accel_targets(event))


# ---------------------------------------------------------------------------
# Synthetic events
# ---------------------------------------------------------------------------

LEADER_PROFILE_KINDS = ("constant", "sinusoidal", "stop_and_go")


@dataclass(frozen=True)
class LeaderProfile:
    """Scripted leader speed profile plus follower initialization knobs.

    The follower starts at IDM equilibrium for the initial leader speed;
    ``fv_initial_speed_offset_mps`` and ``fv_initial_spacing_scale`` shift
    it off equilibrium for scenarios where a trivial constant-speed policy
    should not already be optimal.
    """

    kind: str = "constant"
    duration_s: float = 20.0
    base_speed_mps: float = 15.0
    amplitude_mps: float = 3.0
    period_s: float = 12.0
    low_speed_mps: float = 0.5
    fv_initial_speed_offset_mps: float = 0.0
    fv_initial_spacing_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in LEADER_PROFILE_KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.duration_s < 15.0:
            raise ValueError(f"profile duration {self.duration_s} s below 15 s")


def leader_speed_series(profile: LeaderProfile, dt_s: float) -> np.ndarray:
    n = int(round(profile.duration_s / dt_s)) + 1
    t = dt_s * np.arange(n)
    if profile.kind == "constant":
        v = np.full(n, profile.base_speed_mps)
    elif profile.kind == "sinusoidal":
        v = profile.base_speed_mps + profile.amplitude_mps * np.sin(
            2.0 * math.pi * t / profile.period_s
        )
    else:  # stop_and_go: cruise, brake, crawl, accelerate, cruise
        d = profile.duration_s
        knots = [0.0, 0.25 * d, 0.40 * d, 0.60 * d, 0.75 * d, d]
        speeds = [
            profile.base_speed_mps,
            profile.base_speed_mps,
            profile.low_speed_mps,
            profile.low_speed_mps,
            profile.base_speed_mps,
            profile.base_speed_mps,
        ]
        v = np.interp(t, knots, speeds)
    return np.maximum(v, 0.0)


def synthesize_event(
    profile: LeaderProfile,
    generator: IDMParams,
    noise_std: float = 0.0,
    seed: int | Sequence[int] = 0,
    *,
    dt_s: float = 0.1,
    dataset_id: str = "synthetic",
    event_id: str | None = None,
    fv_id: int = 0,
    lv_id: int = 1,
) -> CarFollowingEvent:
    """Drive an IDM follower behind a scripted leader and record the event.

    Gaussian acceleration noise (std ``noise_std``) is added to the IDM
    command before integration. Raises :class:`SynthesisError` if the
    generator parameters produce a collision, which well-posed IDM
    parameters do not.
    """
    v_lv = leader_speed_series(profile, dt_s)
    n = len(v_lv)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n)

    v0 = max(float(v_lv[0]) + profile.fv_initial_speed_offset_mps, 0.0)
    try:
        spacing0 = idm_equilibrium_spacing(generator, float(v_lv[0]))
    except ValueError as exc:
        raise SynthesisError(str(exc)) from None
    spacing0 *= profile.fv_initial_spacing_scale

    x_lv = np.empty(n)
    x_lv[0] = spacing0
    x_lv[1:] = spacing0 + np.cumsum(0.5 * (v_lv[:-1] + v_lv[1:]) * dt_s)

    policy = IDMPolicy(generator)
    x = 0.0
    v = v0
    spacing = np.empty(n)
    v_fv = np.empty(n)
    for k in range(n):
        gap = x_lv[k] - x
        if gap <= 0.0:
            raise SynthesisError(
                f"generator parameters collided at step {k} "
                f"(profile {profile.kind}, seed {seed})"
            )
        spacing[k] = gap
        v_fv[k] = v
        if k == n - 1:
            break
        state = CFState(spacing_m=gap, v_fv_mps=v, dv_mps=v - float(v_lv[k]), v_lv_mps=float(v_lv[k]), dt_s=dt_s)
        a = policy.accel(state) + noise_std * float(noise[k])
        x, v = ballistic_step(x, v, a, dt_s)

    if event_id is None:
        event_id = f"{dataset_id}-{profile.kind}-fv{fv_id}-lv{lv_id}"
    return CarFollowingEvent(
        event_id=event_id,
        dt_s=dt_s,
        spacing_m=spacing,
        v_fv_mps=v_fv,
        dv_mps=v_fv - v_lv,
        v_lv_mps=v_lv.copy(),
        source=dataset_id,
        fv_id=fv_id,
        lv_id=lv_id,
    )


def synthesize_dataset(
    n_events: int,
    profile: LeaderProfile,
    generator: IDMParams,
    noise_std: float = 0.0,
    seed: int = 0,
    *,
    dt_s: float = 0.1,
    dataset_id: str = "synthetic",
    speed_spread_mps: float = 0.0,
    period_spread_s: float = 0.0,
) -> list[CarFollowingEvent]:
    """Batch of synthetic events with per-event jittered leader profiles.

    Base speed and (for sinusoidal profiles) period are drawn uniformly
    within +/- the given spreads so the batch spans distinct operating
    points; per-event noise streams derive deterministically from ``seed``.
    """
    from dataclasses import replace

    jitter_rng = np.random.default_rng([seed, 0xBA5E])
    events = []
    for i in range(n_events):
        base = profile.base_speed_mps + speed_spread_mps * float(
            jitter_rng.uniform(-1.0, 1.0)
        )
        period = profile.period_s + period_spread_s * float(jitter_rng.uniform(-1.0, 1.0))
        variant = replace(
            profile,
            base_speed_mps=max(base, max(profile.amplitude_mps + 0.5, 1.0))
            if profile.kind == "sinusoidal"
            else max(base, 1.0),
            period_s=max(period, 2.0),
        )
        events.append(
            synthesize_event(
                variant,
                generator,
                noise_std,
                seed=[seed, i],
                dt_s=dt_s,
                dataset_id=dataset_id,
                event_id=f"{dataset_id}-{profile.kind}-{i:04d}",
                fv_id=2 * i,
                lv_id=2 * i + 1,
            )
        )
    return events


def event_from_rollout(
    policy: AccelerationPolicy,
    base_event: CarFollowingEvent,
    event_id: str | None = None,
) -> CarFollowingEvent:
    """Record a policy's own closed-loop behavior as a new event.

    The leader profile is taken from ``base_event``; the follower channels
    come from simulating ``policy``. Useful for building ground-truth sets
    whose generating law is an arbitrary policy. Fails if the policy
    collides or the rollout violates event invariants.
    """
    result = rollout(policy, base_event)
    if result.collided:
        raise SynthesisError(
            f"policy {policy.name!r} collided while generating from "
            f"{base_event.event_id}"
        )
    return CarFollowingEvent(
        event_id=event_id or f"{base_event.event_id}-{policy.name}",
        dt_s=base_event.dt_s,
        spacing_m=result.spacing_sim_m.copy(),
        v_fv_mps=result.v_sim_mps.copy(),
        dv_mps=result.v_sim_mps - base_event.v_lv_mps,
        v_lv_mps=base_event.v_lv_mps.copy(),
        source=base_event.source,
        fv_id=base_event.fv_id,
        lv_id=base_event.lv_id,
    )


def tracks_from_events(
    events: Sequence[CarFollowingEvent],
    *,
    lane_id: int = 1,
    lv_length_m: float = 5.0,
    fv_length_m: float = 4.5,
) -> list[VehicleTrack]:
    """Reconstruct leader/follower tracks whose extraction reproduces the events.

    Follower positions come from trapezoidal integration of FV speed; the
    leader front bumper sits one leader length ahead of spacing. Each event
    becomes an independent vehicle pair on its own id range.
    """
    tracks: list[VehicleTrack] = []
    for i, event in enumerate(events):
        n = len(event)
        dt = event.dt_s
        fv_id = 2 * i + 1
        lv_id = 2 * i + 2
        x_fv = np.empty(n)
        x_fv[0] = 0.0
        x_fv[1:] = np.cumsum(0.5 * (event.v_fv_mps[:-1] + event.v_fv_mps[1:]) * dt)
        x_lv_front = x_fv + event.spacing_m + lv_length_m
        fv_samples = []
        lv_samples = []
        for k in range(n):
            t = k * dt
            fv_samples.append(
                TrajectorySample(
                    time_s=t,
                    longitudinal_pos_m=float(x_fv[k]),
                    lateral_pos_m=0.0,
                    speed_mps=float(event.v_fv_mps[k]),
                    lane_id=lane_id,
                    vehicle_length_m=fv_length_m,
                    preceding_vehicle_id=lv_id,
                    is_av=event.fv_is_av,
                )
            )
            lv_samples.append(
                TrajectorySample(
                    time_s=t,
                    longitudinal_pos_m=float(x_lv_front[k]),
                    lateral_pos_m=0.0,
                    speed_mps=float(event.v_lv_mps[k]),
                    lane_id=lane_id,
                    vehicle_length_m=lv_length_m,
                    preceding_vehicle_id=None,
                    is_av=event.lv_is_av,
                )
            )
        tracks.append(
            VehicleTrack(vehicle_id=fv_id, dataset_id=event.source or "synthetic", dt_s=dt, samples=fv_samples)
        )
        tracks.append(
            VehicleTrack(vehicle_id=lv_id, dataset_id=event.source or "synthetic", dt_s=dt, samples=lv_samples)
        )
    return tracks
