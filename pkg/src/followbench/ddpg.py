"""Deep deterministic policy gradient agent for human-like car following.

The environment replays one event's leader profile with the same ballistic
integrator as :func:`followbench.sim.rollout`; an episode ends on collision
or at the event's final step. The step reward scores the log relative
spacing error against the observed trajectory, with a ceiling/floor
parameter H and an additive collision penalty.

Two reward orientations ship. ``literal`` applies the formula
``-max(ln e, H)``, which pins the reward at -H for any relative error below
e^H and therefore carries no gradient in the accurate regime.
``survival_floor`` (default) applies ``max(-ln e, H)``, rewarding accuracy
above a per-step floor of H so that surviving a step is always worth at
least H; this matches the stated intent of keeping the agent exploring
whole events.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FollowBenchError
from .events import CarFollowingEvent
from .models.base import AccelerationPolicy, CFState
from .neural import (
    AdamConfig,
    AdamState,
    MLPSpec,
    Weights,
    adam_step,
    init_mlp,
    load_weights_file,
    mlp_backward,
    mlp_forward,
    mlp_forward_cache,
    register_policy_loader,
    save_weights_file,
    weights_from_payload,
)
from .sim import ballistic_step, lv_rear_positions, rollout

#: Fixed feature scales (spacing, speed, relative speed) for actor/critic inputs.
STATE_SCALES = (100.0, 40.0, 10.0)

REWARD_VARIANTS = ("literal", "survival_floor")


@dataclass(frozen=True)
class DDPGConfig:
    gamma: float = 0.99
    tau: float = 0.005
    buffer_capacity: int = 100_000
    batch_size: int = 64
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    action_bound_mps2: float = 3.0
    exploration_sigma: float = 0.5
    step_reward_h: float = 1.0
    collision_penalty: float = -50.0
    epsilon_floor: float = 1e-6
    reward_variant: str = "survival_floor"
    episodes: int = 300
    seed: int = 0
    hidden_size: int = 64
    probe_every: int = 10

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.action_bound_mps2 <= 0:
            raise ValueError("action_bound_mps2 must be positive")
        if self.epsilon_floor <= 0:
            raise ValueError("epsilon_floor must be positive")
        if self.reward_variant not in REWARD_VARIANTS:
            raise ValueError(f"reward_variant must be one of {REWARD_VARIANTS}")


def reward(
    spacing_sim_m: float,
    spacing_obs_m: float,
    collided: bool,
    cfg: DDPGConfig,
) -> float:
    """Step reward from the relative spacing error against the observation."""
    if spacing_obs_m <= 0:
        raise ValueError(f"observed spacing must be positive, got {spacing_obs_m}")
    epsilon = max(
        abs(spacing_sim_m - spacing_obs_m) / spacing_obs_m, cfg.epsilon_floor
    )
    if cfg.reward_variant == "literal":
        value = -max(math.log(epsilon), cfg.step_reward_h)
    else:
        value = max(-math.log(epsilon), cfg.step_reward_h)
    if collided:
        value += cfg.collision_penalty
    return value


def normalize_state(spacing_m: float, v_fv_mps: float, dv_mps: float) -> np.ndarray:
    return np.array(
        [
            spacing_m / STATE_SCALES[0],
            v_fv_mps / STATE_SCALES[1],
            dv_mps / STATE_SCALES[2],
        ]
    )


class CarFollowingEnv:
    """One event as an episodic environment; terminal on collision or event end."""

    def __init__(self, event: CarFollowingEvent, cfg: DDPGConfig):
        if len(event) < 2:
            raise ValueError("event too short for an episode")
        self.event = event
        self.cfg = cfg
        self._x_lv = lv_rear_positions(event)
        self.reset()

    def reset(self) -> np.ndarray:
        self._k = 0
        self._x = 0.0
        self._v = float(self.event.v_fv_mps[0])
        self._spacing = float(self.event.spacing_m[0])
        self.done = False
        self.collided = False
        return self._state()

    def _state(self) -> np.ndarray:
        dv = self._v - float(self.event.v_lv_mps[self._k])
        return normalize_state(self._spacing, self._v, dv)

    def step(self, action_mps2: float) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise FollowBenchError("episode is over; call reset()")
        bound = self.cfg.action_bound_mps2
        action = float(np.clip(action_mps2, -bound, bound))
        self._x, self._v = ballistic_step(self._x, self._v, action, self.event.dt_s)
        self._k += 1
        self._spacing = float(self._x_lv[self._k] - self._x)
        self.collided = self._spacing <= 0.0
        value = reward(
            self._spacing, float(self.event.spacing_m[self._k]), self.collided, self.cfg
        )
        self.done = self.collided or self._k == len(self.event) - 1
        return self._state(), value, self.done


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform seeded sampling."""

    def __init__(self, capacity: int, state_dim: int = 3):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._states = np.zeros((capacity, state_dim))
        self._actions = np.zeros(capacity)
        self._rewards = np.zeros(capacity)
        self._next_states = np.zeros((capacity, state_dim))
        self._dones = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, transition: Transition) -> None:
        i = self._next
        self._states[i] = transition.state
        self._actions[i] = transition.action
        self._rewards[i] = transition.reward
        self._next_states[i] = transition.next_state
        self._dones[i] = float(transition.done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if batch_size > self._size:
            raise ValueError(f"buffer holds {self._size} < batch {batch_size}")
        idx = rng.integers(0, self._size, size=batch_size)
        return (
            self._states[idx],
            self._actions[idx],
            self._rewards[idx],
            self._next_states[idx],
            self._dones[idx],
        )

    def contains_action(self, action: float) -> bool:
        return bool(np.any(self._actions[: self._size] == action))


def soft_update(target: Weights, online: Weights, tau: float) -> Weights:
    """Polyak averaging: target <- tau * online + (1 - tau) * target."""
    return {key: tau * online[key] + (1.0 - tau) * target[key] for key in target}


class ActorPolicy(AccelerationPolicy):
    """Deterministic trained actor; output bounded by tanh times the action bound."""

    def __init__(self, weights: Weights, action_bound_mps2: float, name: str = "ddpg"):
        self.weights = weights
        self.action_bound_mps2 = action_bound_mps2
        self.name = name

    def raw_action(self, state_vec: np.ndarray) -> float:
        return self.action_bound_mps2 * math.tanh(float(mlp_forward(self.weights, state_vec)))

    def accel(self, state: CFState) -> float:
        return self.raw_action(normalize_state(state.spacing_m, state.v_fv_mps, state.dv_mps))


class DDPGAgent:
    """Actor-critic pair with target networks and decoupled Adam optimizers."""

    def __init__(self, cfg: DDPGConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden_size
        self.actor = init_mlp(MLPSpec(layer_sizes=(3, h, h, 1)), rng)
        self.critic = init_mlp(MLPSpec(layer_sizes=(4, h, h, 1)), rng)
        self.actor_target = {k: w.copy() for k, w in self.actor.items()}
        self.critic_target = {k: w.copy() for k, w in self.critic.items()}
        self._actor_adam = AdamState.init(self.actor)
        self._critic_adam = AdamState.init(self.critic)
        self._actor_cfg = AdamConfig(learning_rate=cfg.actor_lr, epochs=1)
        self._critic_cfg = AdamConfig(learning_rate=cfg.critic_lr, epochs=1)
        self.rng = rng

    def _actions(self, weights: Weights, states: np.ndarray) -> np.ndarray:
        raw = mlp_forward(weights, states)
        return self.cfg.action_bound_mps2 * np.tanh(raw)

    def act(self, state: np.ndarray, noise_sigma: float = 0.0) -> float:
        action = float(self._actions(self.actor, state[None, :])[0])
        if noise_sigma > 0.0:
            action += noise_sigma * float(self.rng.standard_normal())
        bound = self.cfg.action_bound_mps2
        return float(np.clip(action, -bound, bound))

    def td_targets(
        self, rewards: np.ndarray, next_states: np.ndarray, dones: np.ndarray
    ) -> np.ndarray:
        """Critic regression targets y = r + gamma * (1 - done) * Q'(s', mu'(s'))."""
        next_actions = self._actions(self.actor_target, next_states)
        next_q = mlp_forward(
            self.critic_target, np.column_stack([next_states, next_actions])
        )
        return rewards + self.cfg.gamma * (1.0 - dones) * next_q

    def update(self, batch) -> tuple[float, float]:
        """One critic + actor step from a replay batch; returns the losses."""
        states, actions, rewards, next_states, dones = batch
        cfg = self.cfg
        n = len(actions)
        y = self.td_targets(rewards, next_states, dones)

        critic_in = np.column_stack([states, actions])
        q, cache = mlp_forward_cache(self.critic, critic_in)
        td = q - y
        critic_loss = float(np.mean(td * td))
        if not math.isfinite(critic_loss):
            raise FollowBenchError(f"critic loss diverged: {critic_loss}")
        critic_grads, _ = mlp_backward(self.critic, cache, 2.0 * td / n)
        self.critic, self._critic_adam = adam_step(
            self.critic, critic_grads, self._critic_adam, self._critic_cfg
        )

        # Actor ascends Q(s, mu(s)): gradient of -mean(Q) through the critic
        # input back into the tanh-bounded action head.
        raw = mlp_forward(self.actor, states)
        mu = cfg.action_bound_mps2 * np.tanh(raw)
        q_mu, cache_mu = mlp_forward_cache(self.critic, np.column_stack([states, mu]))
        actor_loss = float(-np.mean(q_mu))
        if not math.isfinite(actor_loss):
            raise FollowBenchError(f"actor loss diverged: {actor_loss}")
        _, d_input = mlp_backward(self.critic, cache_mu, np.full(n, -1.0 / n))
        d_mu = d_input[:, 3]
        d_raw = d_mu * cfg.action_bound_mps2 * (1.0 - np.tanh(raw) ** 2)
        _, actor_inputs = mlp_forward_cache(self.actor, states)
        actor_grads, _ = mlp_backward(self.actor, actor_inputs, d_raw)
        self.actor, self._actor_adam = adam_step(
            self.actor, actor_grads, self._actor_adam, self._actor_cfg
        )

        self.actor_target = soft_update(self.actor_target, self.actor, cfg.tau)
        self.critic_target = soft_update(self.critic_target, self.critic, cfg.tau)
        return critic_loss, actor_loss

    def policy(self, name: str = "ddpg") -> ActorPolicy:
        frozen = {k: w.copy() for k, w in self.actor.items()}
        return ActorPolicy(frozen, self.cfg.action_bound_mps2, name=name)


@dataclass
class DDPGTrainReport:
    returns: list[float] = field(default_factory=list)
    collided: list[bool] = field(default_factory=list)
    probe: list[tuple[int, float]] = field(default_factory=list)  # (episode, spacing MSE)

    def to_csv(self, path: str | Path) -> None:
        probe_by_episode = dict(self.probe)
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "return", "collided", "probe_mse"])
            for ep, (ret, col) in enumerate(zip(self.returns, self.collided)):
                probe_val = probe_by_episode.get(ep)
                writer.writerow(
                    [ep, repr(ret), int(col), "" if probe_val is None else repr(probe_val)]
                )


def probe_spacing_mse(policy: AccelerationPolicy, events: Sequence[CarFollowingEvent]) -> float:
    """Mean per-event spacing MSE of evaluation-mode rollouts."""
    total = 0.0
    for event in events:
        result = rollout(policy, event)
        n = result.steps_completed
        err = result.spacing_sim_m - event.spacing_m[:n]
        total += float(np.mean(err * err))
    return total / len(events)


def train_ddpg(
    train_events: Sequence[CarFollowingEvent],
    cfg: DDPGConfig,
    probe_events: Sequence[CarFollowingEvent] | None = None,
) -> tuple[ActorPolicy, DDPGTrainReport]:
    """Episodic training: one event per episode, shuffled each pass.

    Exploration noise decays linearly to zero over the configured episode
    count. Probe MSE (evaluation-mode rollouts over ``probe_events``) is
    recorded every ``cfg.probe_every`` episodes.
    """
    if not train_events:
        raise ValueError("train_ddpg needs a nonempty event collection")
    agent = DDPGAgent(cfg)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    order_rng = np.random.default_rng([cfg.seed, 0x0D0E])
    report = DDPGTrainReport()

    envs = [CarFollowingEnv(event, cfg) for event in train_events]
    order: list[int] = []
    decay_span = max(cfg.episodes - 1, 1)
    for episode in range(cfg.episodes):
        if not order:
            order = list(order_rng.permutation(len(envs)))
        env = envs[order.pop()]
        sigma = cfg.exploration_sigma * (1.0 - episode / decay_span)
        sigma = max(sigma, 0.0)

        state = env.reset()
        episode_return = 0.0
        done = False
        while not done:
            action = agent.act(state, noise_sigma=sigma)
            next_state, step_reward, done = env.step(action)
            buffer.push(Transition(state, action, step_reward, next_state, done))
            episode_return += step_reward
            state = next_state
            if len(buffer) >= cfg.batch_size:
                agent.update(buffer.sample(cfg.batch_size, agent.rng))
        report.returns.append(episode_return)
        report.collided.append(env.collided)

        if probe_events and (episode % cfg.probe_every == 0 or episode == cfg.episodes - 1):
            report.probe.append((episode, probe_spacing_mse(agent.policy(), probe_events)))

    return agent.policy(), report


# Serialization in the shared weights format.


def save_actor(policy: ActorPolicy, path: str | Path) -> None:
    n_layers = sum(1 for key in policy.weights if key.startswith("W"))
    sizes = [policy.weights["W0"].shape[0]] + [
        policy.weights[f"W{i}"].shape[1] for i in range(n_layers)
    ]
    save_weights_file(
        path,
        "ddpg_actor",
        {"layer_sizes": sizes},
        policy.weights,
        normalizer=None,
        extra={"action_bound_mps2": policy.action_bound_mps2},
    )


def _load_actor(document: dict) -> ActorPolicy:
    return ActorPolicy(
        weights_from_payload(document["weights"]),
        float(document["extra"]["action_bound_mps2"]),
    )


register_policy_loader("ddpg_actor", _load_actor)


def load_actor(path: str | Path) -> ActorPolicy:
    document = load_weights_file(path)
    if document.get("kind") != "ddpg_actor":
        raise ValueError(f"expected ddpg_actor weights, got {document.get('kind')!r}")
    return _load_actor(document)
