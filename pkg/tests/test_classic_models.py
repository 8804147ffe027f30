import json
import math

import numpy as np
import pytest

from followbench.errors import ModelEvaluationError
from followbench.models import (
    CFState,
    GHRParams,
    GHRPolicy,
    IDMParams,
    ghr_accel,
    idm_accel,
    load_params,
    make_policy,
    params_from_dict,
    params_to_dict,
    save_params,
)


def state(spacing=20.0, v_fv=10.0, v_lv=10.0, dt=0.1, history=()):
    return CFState(
        spacing_m=spacing, v_fv_mps=v_fv, dv_mps=v_fv - v_lv,
        v_lv_mps=v_lv, dt_s=dt, history=history,
    )


class TestGHR:
    def test_zero_stimulus_gives_zero(self):
        params = GHRParams(c=2.3, m_exp=0.8, l_exp=1.5)
        assert ghr_accel(params, state(v_fv=12.0, v_lv=12.0)) == 0.0

    def test_direct_substitution(self):
        # c=1, m=0, l=1, T=0; leader 2 m/s faster at 20 m -> 2/20 = 0.1.
        params = GHRParams(c=1.0, m_exp=0.0, l_exp=1.0, reaction_time_s=0.0)
        accel = ghr_accel(params, state(spacing=20.0, v_fv=10.0, v_lv=12.0))
        assert accel == pytest.approx(0.1, abs=1e-12)

    def test_delay_reads_history_only(self):
        params = GHRParams(c=1.0, m_exp=0.0, l_exp=1.0, reaction_time_s=0.5)
        history = tuple((20.0, -2.0, 10.0) for _ in range(5))
        base = ghr_accel(params, state(spacing=20.0, v_fv=10.0, v_lv=12.0, history=history))
        # Perturbing the *current* spacing and speeds leaves the output unchanged.
        perturbed = ghr_accel(params, state(spacing=7.0, v_fv=10.0, v_lv=9.0, history=history))
        assert base == pytest.approx(2.0 / 20.0, abs=1e-12)
        assert perturbed == base

    def test_delay_uses_correct_lag(self):
        params = GHRParams(c=1.0, m_exp=0.0, l_exp=1.0, reaction_time_s=0.3)
        history = ((40.0, -4.0, 10.0), (30.0, -3.0, 10.0), (20.0, -2.0, 10.0), (10.0, -1.0, 10.0))
        # lag 3 steps back from the end -> (30.0, -3.0, ...)
        accel = ghr_accel(params, state(history=history))
        assert accel == pytest.approx(3.0 / 30.0, abs=1e-12)

    def test_insufficient_history(self):
        params = GHRParams(c=1.0, m_exp=0.0, l_exp=1.0, reaction_time_s=1.0)
        with pytest.raises(ModelEvaluationError, match="history"):
            ghr_accel(params, state(history=()))

    def test_unquantized_reaction_time(self):
        params = GHRParams(c=1.0, m_exp=0.0, l_exp=1.0, reaction_time_s=0.15)
        with pytest.raises(ValueError, match="multiple"):
            ghr_accel(params, state())

    def test_linear_in_stimulus(self):
        params = GHRParams(c=0.7, m_exp=1.0, l_exp=1.2)
        one = ghr_accel(params, state(v_fv=10.0, v_lv=11.0))
        two = ghr_accel(params, state(v_fv=10.0, v_lv=12.0))
        assert two == pytest.approx(2.0 * one, abs=1e-12)

    def test_sign_convention_flag(self):
        params = GHRParams(c=1.0, m_exp=0.0, l_exp=1.0)
        s = state(spacing=10.0, v_fv=10.0, v_lv=12.0)
        default = ghr_accel(params, s)
        flipped = ghr_accel(params, s, stimulus_leader_minus_follower=False)
        assert default == pytest.approx(0.2) and flipped == pytest.approx(-0.2)

    def test_standstill_with_negative_exponent(self):
        params = GHRParams(c=1.0, m_exp=-1.0, l_exp=1.0)
        with pytest.raises(ModelEvaluationError):
            ghr_accel(params, state(v_fv=0.0, v_lv=2.0))


class TestIDM:
    params = IDMParams(a0=1.0, b=1.5, v_des=30.0, t_des=1.5, s0=2.0, lambda_exp=4.0)

    def test_standstill_equilibrium(self):
        accel = idm_accel(self.params, state(spacing=2.0, v_fv=0.0, v_lv=0.0))
        assert accel == pytest.approx(0.0, abs=1e-12)

    def test_direct_substitution(self):
        # v=20, dv=0, spacing=32: desired gap = 2 + 20*1.5 = 32,
        # a = 1 - (20/30)^4 - 1 = -0.19753...
        accel = idm_accel(self.params, state(spacing=32.0, v_fv=20.0, v_lv=20.0))
        assert accel == pytest.approx(1.0 - (20.0 / 30.0) ** 4 - 1.0, abs=1e-12)
        assert accel == pytest.approx(-0.1975, abs=5e-5)

    def test_free_flow_limit(self):
        accel = idm_accel(self.params, state(spacing=1e9, v_fv=0.0, v_lv=0.0))
        assert accel == pytest.approx(self.params.a0, abs=1e-9)

    def test_monotone_in_speed_at_fixed_spacing(self):
        speeds = np.linspace(0.0, 29.0, 40)
        accels = [
            idm_accel(self.params, state(spacing=25.0, v_fv=float(v), v_lv=float(v)))
            for v in speeds
        ]
        assert all(a2 <= a1 + 1e-12 for a1, a2 in zip(accels, accels[1:]))

    def test_never_exceeds_a0(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            s = state(
                spacing=float(rng.uniform(0.5, 200.0)),
                v_fv=float(rng.uniform(0.0, 35.0)),
                v_lv=float(rng.uniform(0.0, 35.0)),
            )
            assert idm_accel(self.params, s) <= self.params.a0 + 1e-12

    def test_output_clamped_below(self):
        accel = idm_accel(self.params, state(spacing=0.5, v_fv=30.0, v_lv=0.0))
        assert accel == -8.0

    def test_literal_desired_gap_flag(self):
        # Receding leader at low speed: dynamic term negative.
        s = state(spacing=10.0, v_fv=5.0, v_lv=20.0)
        floored = idm_accel(self.params, s)
        literal = idm_accel(self.params, s, literal_desired_gap=True)
        assert literal != floored

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            IDMParams(a0=-1.0)
        with pytest.raises(ValueError):
            IDMParams(lambda_exp=0.5)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        for params in (
            IDMParams(a0=1.1, b=2.2, v_des=27.0, t_des=1.3, s0=2.4, lambda_exp=3.5),
            GHRParams(c=-0.4, m_exp=0.9, l_exp=1.7, reaction_time_s=0.8),
        ):
            path = tmp_path / "p.json"
            save_params(params, path)
            assert load_params(path) == params

    def test_units_in_keys(self):
        data = params_to_dict(IDMParams())
        assert {"a0_mps2", "b_mps2", "v_des_mps", "t_des_s", "s0_m", "lambda_exp"} <= set(data)

    def test_unknown_type_rejected(self):
        with pytest.raises(ValueError):
            params_from_dict({"model_type": "gipps"})

    def test_make_policy_dispatch(self):
        assert make_policy(IDMParams(), 0.1).name == "idm"
        ghr = make_policy(GHRParams(c=1.0, m_exp=0.0, l_exp=1.0, reaction_time_s=0.5), 0.1)
        assert ghr.name == "ghr"
        assert ghr.history_steps == 5
