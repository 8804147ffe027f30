"""Car-following modeling and benchmarking toolkit.

Pipeline: load raw trajectory files -> extract car-following events ->
calibrate/train acceleration models (GHR, IDM, feedforward net, recurrent
net, DDPG) -> evaluate by closed-loop rollout against observed leader
trajectories (spacing MSE + collision rate).
"""

__version__ = "0.1.0"
