from pathlib import Path

import numpy as np
import pytest

from followbench.events import CarFollowingEvent
from followbench.models.classic import IDMParams
from followbench.sim import LeaderProfile, synthesize_dataset, synthesize_event

GENERATOR = IDMParams(a0=1.2, b=1.8, v_des=28.0, t_des=1.4, s0=2.5, lambda_exp=4.0)

FIXTURE_DIR = Path(__file__).resolve().parents[1] / "fixtures"


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE_DIR


@pytest.fixture(scope="session")
def generator_params() -> IDMParams:
    return GENERATOR


@pytest.fixture(scope="session")
def constant_event() -> CarFollowingEvent:
    """Noise-free equilibrium event: constant leader at 15 m/s for 20 s."""
    return synthesize_event(LeaderProfile(kind="constant", duration_s=20.0), GENERATOR, seed=1)


@pytest.fixture(scope="session")
def stop_and_go_events() -> list[CarFollowingEvent]:
    """Five noise-free events whose leader brakes to a crawl mid-event."""
    profile = LeaderProfile(kind="stop_and_go", duration_s=30.0, base_speed_mps=12.0,
                            low_speed_mps=0.3)
    return synthesize_dataset(5, profile, GENERATOR, noise_std=0.0, seed=31,
                              speed_spread_mps=2.0)


@pytest.fixture(scope="session")
def sinusoidal_events() -> list[CarFollowingEvent]:
    """Eight noise-free events with varied base speeds, 20 s each."""
    profile = LeaderProfile(kind="sinusoidal", duration_s=20.0, base_speed_mps=14.0,
                            amplitude_mps=2.5, period_s=11.0)
    return synthesize_dataset(8, profile, GENERATOR, noise_std=0.0, seed=11,
                              speed_spread_mps=4.0, period_spread_s=2.0)


def make_event(spacing, v_fv, v_lv, dt=0.1, event_id="test-event") -> CarFollowingEvent:
    spacing = np.asarray(spacing, dtype=float)
    v_fv = np.asarray(v_fv, dtype=float)
    v_lv = np.asarray(v_lv, dtype=float)
    return CarFollowingEvent(
        event_id=event_id,
        dt_s=dt,
        spacing_m=spacing,
        v_fv_mps=v_fv,
        dv_mps=v_fv - v_lv,
        v_lv_mps=v_lv,
        source="test",
    )
