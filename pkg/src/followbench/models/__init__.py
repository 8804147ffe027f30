from .base import (
    CFState,
    AccelerationPolicy,
    ConstantAccelerationPolicy,
    ReplayAccelerationPolicy,
)
from .classic import (
    GHRParams,
    IDMParams,
    GHRPolicy,
    IDMPolicy,
    ghr_accel,
    idm_accel,
    make_policy,
    params_to_dict,
    params_from_dict,
    save_params,
    load_params,
)

__all__ = [
    "CFState",
    "AccelerationPolicy",
    "ConstantAccelerationPolicy",
    "ReplayAccelerationPolicy",
    "GHRParams",
    "IDMParams",
    "GHRPolicy",
    "IDMPolicy",
    "ghr_accel",
    "idm_accel",
    "make_policy",
    "params_to_dict",
    "params_from_dict",
    "save_params",
    "load_params",
]
