"""Car-following state and the acceleration-policy contract.

Every model family (closed-form, neural, reinforcement-learned) is wrapped
as an :class:`AccelerationPolicy` so the simulator, calibrator, and
benchmark runner can treat them identically.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ModelEvaluationError


@dataclass(frozen=True)
class CFState:
    """Instantaneous follower view of a car-following situation.

    ``history`` holds past (spacing_m, dv_mps, v_fv_mps) triples ordered
    oldest to newest, excluding the current step; delayed models index it
    backwards from the end. The simulator seeds it before step 0 and keeps
    it at least as deep as the policy's ``history_steps``.
    """

    spacing_m: float
    v_fv_mps: float
    dv_mps: float
    v_lv_mps: float
    dt_s: float
    history: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.spacing_m <= 0:
            raise ModelEvaluationError(f"state requires positive spacing, got {self.spacing_m}")

    def delayed(self, lag_steps: int) -> tuple[float, float, float]:
        """(spacing, dv, v_fv) as of ``lag_steps`` steps ago (0 = now)."""
        if lag_steps == 0:
            return (self.spacing_m, self.dv_mps, self.v_fv_mps)
        if lag_steps < 0 or lag_steps > len(self.history):
            raise ModelEvaluationError(
                f"history holds {len(self.history)} steps, need lag {lag_steps}"
            )
        return self.history[-lag_steps]


class AccelerationPolicy:
    """A calibrated/trained acceleration model behind one ``accel(state)`` call.

    ``history_steps`` tells the simulator how many past states beyond the
    current one the policy reads. ``reset`` is called once before each
    rollout; stateless policies ignore it.
    """

    name: str = "policy"
    history_steps: int = 0

    def reset(self, event) -> None:  # noqa: ARG002 - subclasses may use the event
        return None

    def accel(self, state: CFState) -> float:
        raise NotImplementedError


class ConstantAccelerationPolicy(AccelerationPolicy):
    """Always commands the same acceleration; a degenerate reference model."""

    def __init__(self, accel_mps2: float, name: str | None = None):
        self.accel_mps2 = float(accel_mps2)
        self.name = name or f"constant_{accel_mps2:+g}"

    def accel(self, state: CFState) -> float:
        return self.accel_mps2


class ReplayAccelerationPolicy(AccelerationPolicy):
    """Replays a precomputed acceleration sequence step by step.

    With the sequence of finite-difference targets derived from an event's
    observed speeds this is the replay oracle: it reproduces the observed
    trajectory up to integration error. Past the end of the sequence it
    commands zero.
    """

    name = "replay"

    def __init__(self, targets):
        self._targets = [float(a) for a in targets]
        self._index = 0

    def reset(self, event) -> None:
        self._index = 0

    def accel(self, state: CFState) -> float:
        if self._index >= len(self._targets):
            return 0.0
        value = self._targets[self._index]
        self._index += 1
        return value
