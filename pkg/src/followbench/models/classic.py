"""Closed-form acceleration models: stimulus-response (GHR) and IDM."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from ..errors import ModelEvaluationError
from .base import AccelerationPolicy, CFState

#: Default hard braking bound applied to model output during rollout (m/s^2).
DEFAULT_MAX_DECEL_MPS2 = 8.0


@dataclass(frozen=True)
class GHRParams:
    """Gain, speed exponent, spacing exponent, and reaction delay."""

    c: float
    m_exp: float
    l_exp: float
    reaction_time_s: float = 0.0

    def __post_init__(self) -> None:
        if self.reaction_time_s < 0:
            raise ValueError(f"reaction_time_s must be >= 0, got {self.reaction_time_s}")


@dataclass(frozen=True)
class IDMParams:
    a0: float = 1.5          # max acceleration, m/s^2
    b: float = 1.67          # comfortable deceleration, m/s^2
    v_des: float = 30.0      # desired speed, m/s
    t_des: float = 1.5       # desired time headway, s
    s0: float = 2.0          # minimum safe headway, m
    lambda_exp: float = 4.0  # free-flow exponent

    def __post_init__(self) -> None:
        for field_name in ("a0", "b", "v_des", "t_des", "s0"):
            if getattr(self, field_name) <= 0:
                raise ValueError(f"{field_name} must be positive")
        if self.lambda_exp < 1:
            raise ValueError(f"lambda_exp must be >= 1, got {self.lambda_exp}")


def reaction_lag_steps(reaction_time_s: float, dt_s: float) -> int:
    """Reaction delay expressed in whole simulation steps.

    The delay must quantize exactly (within 1e-9 s); calibration rounds its
    delay gene onto the step grid before building parameters.
    """
    lag = int(round(reaction_time_s / dt_s))
    if abs(lag * dt_s - reaction_time_s) > 1e-9:
        raise ValueError(
            f"reaction time {reaction_time_s} s is not a multiple of dt {dt_s} s"
        )
    return lag


def ghr_accel(
    params: GHRParams,
    state: CFState,
    *,
    stimulus_leader_minus_follower: bool = True,
) -> float:
    """Stimulus-response acceleration a = c * v^m * stimulus(t-T) / spacing(t-T)^l.

    The stimulus is the delayed speed difference; with the default sign a
    leader pulling away produces positive acceleration. Set
    ``stimulus_leader_minus_follower=False`` to flip the convention.
    """
    lag = reaction_lag_steps(params.reaction_time_s, state.dt_s)
    spacing_d, dv_d, _ = state.delayed(lag)
    if spacing_d <= 0:
        raise ModelEvaluationError(f"delayed spacing {spacing_d} is not positive")
    stimulus = -dv_d if stimulus_leader_minus_follower else dv_d
    v = state.v_fv_mps
    try:
        speed_term = v**params.m_exp
    except ZeroDivisionError:
        raise ModelEvaluationError(
            f"speed term 0^{params.m_exp} undefined at standstill"
        ) from None
    accel = params.c * speed_term * stimulus / spacing_d**params.l_exp
    if not math.isfinite(accel):
        raise ModelEvaluationError(f"non-finite GHR acceleration {accel}")
    return accel


def idm_accel(
    params: IDMParams,
    state: CFState,
    *,
    literal_desired_gap: bool = False,
    max_decel: float = DEFAULT_MAX_DECEL_MPS2,
) -> float:
    """Intelligent-driver-model acceleration.

    Desired gap: s0 + max(0, v*T + v*dv / (2*sqrt(a0*b))); the max() floor
    keeps a fast-receding leader from producing a negative desired gap whose
    square would reward tailgating. ``literal_desired_gap=True`` drops the
    floor. Output is clamped to [-max_decel, a0].
    """
    s = state.spacing_m
    if s <= 0:
        raise ModelEvaluationError(f"spacing {s} is not positive")
    v = state.v_fv_mps
    dynamic = v * params.t_des + v * state.dv_mps / (2.0 * math.sqrt(params.a0 * params.b))
    if not literal_desired_gap:
        dynamic = max(0.0, dynamic)
    desired = params.s0 + dynamic
    accel = params.a0 * (1.0 - (v / params.v_des) ** params.lambda_exp - (desired / s) ** 2)
    return min(max(accel, -max_decel), params.a0)


def idm_equilibrium_spacing(params: IDMParams, v_mps: float) -> float:
    """Spacing at which IDM holds speed ``v`` exactly (zero acceleration)."""
    if not 0 <= v_mps < params.v_des:
        raise ValueError(f"equilibrium needs 0 <= v < v_des, got v={v_mps}")
    free = 1.0 - (v_mps / params.v_des) ** params.lambda_exp
    return (params.s0 + v_mps * params.t_des) / math.sqrt(free)


class GHRPolicy(AccelerationPolicy):
    name = "ghr"

    def __init__(
        self,
        params: GHRParams,
        dt_s: float,
        *,
        stimulus_leader_minus_follower: bool = True,
    ):
        self.params = params
        self.dt_s = dt_s
        self.stimulus_leader_minus_follower = stimulus_leader_minus_follower
        self.history_steps = reaction_lag_steps(params.reaction_time_s, dt_s)

    def accel(self, state: CFState) -> float:
        return ghr_accel(
            self.params,
            state,
            stimulus_leader_minus_follower=self.stimulus_leader_minus_follower,
        )


class IDMPolicy(AccelerationPolicy):
    name = "idm"

    def __init__(
        self,
        params: IDMParams,
        *,
        literal_desired_gap: bool = False,
        max_decel: float = DEFAULT_MAX_DECEL_MPS2,
    ):
        self.params = params
        self.literal_desired_gap = literal_desired_gap
        self.max_decel = max_decel

    def accel(self, state: CFState) -> float:
        return idm_accel(
            self.params,
            state,
            literal_desired_gap=self.literal_desired_gap,
            max_decel=self.max_decel,
        )


def make_policy(params: GHRParams | IDMParams, dt_s: float) -> AccelerationPolicy:
    if isinstance(params, GHRParams):
        return GHRPolicy(params, dt_s)
    if isinstance(params, IDMParams):
        return IDMPolicy(params)
    raise TypeError(f"unknown parameter type {type(params).__name__}")


# JSON round-trip with units spelled out in the key names.

def params_to_dict(params: GHRParams | IDMParams) -> dict:
    if isinstance(params, GHRParams):
        return {
            "model_type": "ghr",
            "c": params.c,
            "m_exp": params.m_exp,
            "l_exp": params.l_exp,
            "reaction_time_s": params.reaction_time_s,
        }
    if isinstance(params, IDMParams):
        return {
            "model_type": "idm",
            "a0_mps2": params.a0,
            "b_mps2": params.b,
            "v_des_mps": params.v_des,
            "t_des_s": params.t_des,
            "s0_m": params.s0,
            "lambda_exp": params.lambda_exp,
        }
    raise TypeError(f"unknown parameter type {type(params).__name__}")


def params_from_dict(data: dict) -> GHRParams | IDMParams:
    kind = data.get("model_type")
    if kind == "ghr":
        return GHRParams(
            c=float(data["c"]),
            m_exp=float(data["m_exp"]),
            l_exp=float(data["l_exp"]),
            reaction_time_s=float(data["reaction_time_s"]),
        )
    if kind == "idm":
        return IDMParams(
            a0=float(data["a0_mps2"]),
            b=float(data["b_mps2"]),
            v_des=float(data["v_des_mps"]),
            t_des=float(data["t_des_s"]),
            s0=float(data["s0_m"]),
            lambda_exp=float(data["lambda_exp"]),
        )
    raise ValueError(f"unknown model_type {kind!r}")


def save_params(params: GHRParams | IDMParams, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(params_to_dict(params), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path: str | Path) -> GHRParams | IDMParams:
    with Path(path).open(encoding="utf-8") as fh:
        return params_from_dict(json.load(fh))
