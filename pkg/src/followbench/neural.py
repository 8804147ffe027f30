"""Dense and recurrent acceleration regressors with hand-rolled backprop.

Everything runs in double precision so gradients can be validated against
central finite differences. Weights live in plain ``{name: ndarray}``
dicts; the Adam step, loss gradients, and forward passes are pure
functions over those dicts.

Features are (spacing, FV speed, relative speed) at one step for the MLP
and over a sliding window for the recurrent net; targets are the one-step
finite-difference accelerations of the observed FV speed. At a fixed step
size the next-step spacing error is an affine function of the acceleration
error, so this regression shares minimizers with a one-step spacing MSE.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import TrainingDivergedError
from .events import CarFollowingEvent
from .models.base import AccelerationPolicy, CFState
from .sim import derived_accel_targets

FEATURE_NAMES = ("spacing_m", "v_fv_mps", "dv_mps")


@dataclass(frozen=True)
class MLPSpec:
    """Feedforward net: tanh hidden layers, linear scalar output."""

    layer_sizes: tuple[int, ...] = (3, 64, 64, 1)

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 3:
            raise ValueError("need input, at least one hidden, and output layer")
        if self.layer_sizes[-1] != 1:
            raise ValueError("output layer must have size 1")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")


@dataclass(frozen=True)
class RecurrentSpec:
    """Gated recurrent (LSTM) regressor over a fixed feature window."""

    input_size: int = 3
    window_steps: int = 10
    hidden_size: int = 64
    num_layers: int = 1
    dropout_prob: float = 0.1

    def __post_init__(self) -> None:
        if self.window_steps < 1:
            raise ValueError("window_steps must be >= 1")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")
        if self.hidden_size < 1 or self.num_layers < 1:
            raise ValueError("hidden_size and num_layers must be >= 1")


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for beta in (self.beta1, self.beta2):
            if not 0.0 < beta < 1.0:
                raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass(frozen=True)
class Normalizer:
    """Per-feature z-scaling fitted on the training split."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def fit(cls, features: np.ndarray) -> "Normalizer":
        features = np.asarray(features, dtype=float)
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        if np.any(std < 1e-9):
            flat = [FEATURE_NAMES[i] if i < 3 else str(i) for i in np.flatnonzero(std < 1e-9)]
            raise ValueError(f"features with (near-)zero variance: {flat}")
        return cls(mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in std))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - np.asarray(self.mean)) / np.asarray(self.std)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * np.asarray(self.std) + np.asarray(self.mean)


Weights = dict  # {name: np.ndarray}


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(spec: MLPSpec, rng: np.random.Generator) -> Weights:
    weights: Weights = {}
    sizes = spec.layer_sizes
    for i in range(len(sizes) - 1):
        weights[f"W{i}"] = _xavier(rng, sizes[i], sizes[i + 1])
        weights[f"b{i}"] = np.zeros(sizes[i + 1])
    return weights


def _mlp_layer_count(weights: Weights) -> int:
    return sum(1 for key in weights if key.startswith("W"))


def mlp_forward(weights: Weights, x: np.ndarray) -> np.ndarray:
    """Batch prediction; a single feature vector yields a scalar."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    h = np.atleast_2d(arr)
    n_layers = _mlp_layer_count(weights)
    for i in range(n_layers):
        z = h @ weights[f"W{i}"] + weights[f"b{i}"]
        h = np.tanh(z) if i < n_layers - 1 else z
    out = h[:, 0]
    return float(out[0]) if single else out


def mlp_forward_cache(weights: Weights, x: np.ndarray):
    h = np.atleast_2d(np.asarray(x, dtype=float))
    n_layers = _mlp_layer_count(weights)
    inputs = []
    for i in range(n_layers):
        inputs.append(h)
        z = h @ weights[f"W{i}"] + weights[f"b{i}"]
        h = np.tanh(z) if i < n_layers - 1 else z
    return h[:, 0], inputs


def mlp_backward(weights: Weights, inputs: list, d_out: np.ndarray):
    """Gradients of a scalar-output MLP; also returns d(input)."""
    n_layers = _mlp_layer_count(weights)
    grads: Weights = {}
    dz = np.asarray(d_out, dtype=float)[:, None]
    for i in reversed(range(n_layers)):
        h_in = inputs[i]
        grads[f"W{i}"] = h_in.T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ weights[f"W{i}"].T
        if i > 0:
            # h_in was produced by tanh of the previous layer.
            dz = dh * (1.0 - h_in * h_in)
    return grads, dh


def mlp_loss_gradients(weights: Weights, x: np.ndarray, targets: np.ndarray):
    """Mean-squared-error loss and its gradients w.r.t. every weight."""
    targets = np.asarray(targets, dtype=float)
    if targets.size == 0:
        raise ValueError("empty batch")
    preds, inputs = mlp_forward_cache(weights, x)
    residual = preds - targets
    loss = float(np.mean(residual * residual))
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    d_out = 2.0 * residual / targets.size
    grads, _ = mlp_backward(weights, inputs, d_out)
    return loss, grads


# ---------------------------------------------------------------------------
# Gated recurrent cell (standard LSTM equations), stacked, with BPTT.
# ---------------------------------------------------------------------------


def init_recurrent(spec: RecurrentSpec, rng: np.random.Generator) -> Weights:
    weights: Weights = {}
    for layer in range(spec.num_layers):
        in_dim = spec.input_size if layer == 0 else spec.hidden_size
        weights[f"lstm{layer}_Wx"] = _xavier(rng, in_dim, 4 * spec.hidden_size)
        weights[f"lstm{layer}_Wh"] = _xavier(rng, spec.hidden_size, 4 * spec.hidden_size)
        weights[f"lstm{layer}_b"] = np.zeros(4 * spec.hidden_size)
    weights["head_W"] = _xavier(rng, spec.hidden_size, 1)
    weights["head_b"] = np.zeros(1)
    return weights


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def recurrent_forward_cache(
    weights: Weights,
    spec: RecurrentSpec,
    windows: np.ndarray,
    dropout_mask: np.ndarray | None = None,
):
    windows = np.asarray(windows, dtype=float)
    if windows.ndim == 2:
        windows = windows[None, :, :]
    n, steps, n_features = windows.shape
    if steps != spec.window_steps:
        raise ValueError(f"window length {steps} != spec.window_steps {spec.window_steps}")
    if n_features != spec.input_size:
        raise ValueError(f"feature count {n_features} != spec.input_size {spec.input_size}")
    hidden = spec.hidden_size
    h = [np.zeros((n, hidden)) for _ in range(spec.num_layers)]
    c = [np.zeros((n, hidden)) for _ in range(spec.num_layers)]
    cache = []
    for t in range(steps):
        x_in = windows[:, t, :]
        step_cache = []
        for layer in range(spec.num_layers):
            z = (
                x_in @ weights[f"lstm{layer}_Wx"]
                + h[layer] @ weights[f"lstm{layer}_Wh"]
                + weights[f"lstm{layer}_b"]
            )
            gi = _sigmoid(z[:, 0 * hidden : 1 * hidden])
            gf = _sigmoid(z[:, 1 * hidden : 2 * hidden])
            gg = np.tanh(z[:, 2 * hidden : 3 * hidden])
            go = _sigmoid(z[:, 3 * hidden : 4 * hidden])
            c_new = gf * c[layer] + gi * gg
            tanh_c = np.tanh(c_new)
            h_new = go * tanh_c
            step_cache.append(
                {
                    "x_in": x_in,
                    "h_prev": h[layer],
                    "c_prev": c[layer],
                    "i": gi,
                    "f": gf,
                    "g": gg,
                    "o": go,
                    "tanh_c": tanh_c,
                }
            )
            h[layer] = h_new
            c[layer] = c_new
            x_in = h_new
        cache.append(step_cache)
    h_top = h[-1]
    if dropout_mask is not None:
        h_top = h_top * dropout_mask
    preds = (h_top @ weights["head_W"])[:, 0] + weights["head_b"][0]
    return preds, {"steps": cache, "h_top_raw": h[-1], "dropout_mask": dropout_mask}


def recurrent_forward(
    weights: Weights,
    spec: RecurrentSpec,
    windows: np.ndarray,
    dropout_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Prediction for one window (scalar) or a batch of windows."""
    single = np.asarray(windows).ndim == 2
    preds, _ = recurrent_forward_cache(weights, spec, windows, dropout_mask)
    return float(preds[0]) if single else preds


def recurrent_backward(weights: Weights, spec: RecurrentSpec, cache, d_out: np.ndarray):
    hidden = spec.hidden_size
    steps = len(cache["steps"])
    grads: Weights = {key: np.zeros_like(value) for key, value in weights.items()}
    d_out = np.asarray(d_out, dtype=float)

    h_top = cache["h_top_raw"]
    mask = cache["dropout_mask"]
    h_for_head = h_top if mask is None else h_top * mask
    grads["head_W"] = h_for_head.T @ d_out[:, None]
    grads["head_b"] = np.array([d_out.sum()])
    dh_top = d_out[:, None] * weights["head_W"][:, 0][None, :]
    if mask is not None:
        dh_top = dh_top * mask

    n = h_top.shape[0]
    dh_time = [np.zeros((n, hidden)) for _ in range(spec.num_layers)]
    dc_time = [np.zeros((n, hidden)) for _ in range(spec.num_layers)]
    dh_time[-1] = dh_top
    for t in reversed(range(steps)):
        dx_above = None
        for layer in reversed(range(spec.num_layers)):
            sc = cache["steps"][t][layer]
            dh = dh_time[layer].copy()
            if dx_above is not None:
                dh += dx_above
            dc = dc_time[layer] + dh * sc["o"] * (1.0 - sc["tanh_c"] ** 2)
            do = dh * sc["tanh_c"]
            di = dc * sc["g"]
            dg = dc * sc["i"]
            df = dc * sc["c_prev"]
            dc_prev = dc * sc["f"]
            dz = np.concatenate(
                [
                    di * sc["i"] * (1.0 - sc["i"]),
                    df * sc["f"] * (1.0 - sc["f"]),
                    dg * (1.0 - sc["g"] ** 2),
                    do * sc["o"] * (1.0 - sc["o"]),
                ],
                axis=1,
            )
            grads[f"lstm{layer}_Wx"] += sc["x_in"].T @ dz
            grads[f"lstm{layer}_Wh"] += sc["h_prev"].T @ dz
            grads[f"lstm{layer}_b"] += dz.sum(axis=0)
            dx_above = dz @ weights[f"lstm{layer}_Wx"].T
            dh_time[layer] = dz @ weights[f"lstm{layer}_Wh"].T
            dc_time[layer] = dc_prev
    return grads


def recurrent_loss_gradients(
    weights: Weights,
    spec: RecurrentSpec,
    windows: np.ndarray,
    targets: np.ndarray,
    dropout_mask: np.ndarray | None = None,
):
    targets = np.asarray(targets, dtype=float)
    if targets.size == 0:
        raise ValueError("empty batch")
    preds, cache = recurrent_forward_cache(weights, spec, windows, dropout_mask)
    residual = preds - targets
    loss = float(np.mean(residual * residual))
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    d_out = 2.0 * residual / targets.size
    grads = recurrent_backward(weights, spec, cache, d_out)
    return loss, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: Weights
    v: Weights

    @classmethod
    def init(cls, weights: Weights) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(w) for k, w in weights.items()},
            v={k: np.zeros_like(w) for k, w in weights.items()},
        )


def adam_step(
    weights: Weights, grads: Weights, state: AdamState, cfg: AdamConfig
) -> tuple[Weights, AdamState]:
    """Bias-corrected Adam update; returns fresh dicts, inputs untouched."""
    t = state.step + 1
    new_w: Weights = {}
    new_m: Weights = {}
    new_v: Weights = {}
    for key, w in weights.items():
        g = grads[key]
        m = cfg.beta1 * state.m[key] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[key] + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        new_w[key] = w - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[key] = m
        new_v[key] = v
    return new_w, AdamState(step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Datasets, training loop, policies
# ---------------------------------------------------------------------------


def step_features(event: CarFollowingEvent) -> np.ndarray:
    """(spacing, v_fv, dv) per step, all steps of the event."""
    return np.column_stack([event.spacing_m, event.v_fv_mps, event.dv_mps])


def build_step_dataset(events: Sequence[CarFollowingEvent]):
    xs = [step_features(e)[:-1] for e in events]
    ys = [derived_accel_targets(e) for e in events]
    return np.concatenate(xs), np.concatenate(ys)


def build_window_dataset(events: Sequence[CarFollowingEvent], window: int):
    """Windows ending at each step; the first steps repeat the initial state.

    Matches the rollout-time behavior where the policy's history ring is
    seeded with the step-0 observation.
    """
    xs, ys = [], []
    for event in events:
        feats = step_features(event)
        n = len(event) - 1
        idx = np.arange(n)[:, None] + np.arange(-window + 1, 1)[None, :]
        xs.append(feats[np.maximum(idx, 0)])
        ys.append(derived_accel_targets(event))
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, (tr, va) in enumerate(zip(self.train_losses, self.val_losses)):
                writer.writerow([epoch, repr(tr), repr(va)])


class MLPPolicy(AccelerationPolicy):
    def __init__(self, weights: Weights, normalizer: Normalizer, spec: MLPSpec, name: str = "nn"):
        self.weights = weights
        self.normalizer = normalizer
        self.spec = spec
        self.name = name

    def accel(self, state: CFState) -> float:
        x = self.normalizer.normalize(
            np.array([state.spacing_m, state.v_fv_mps, state.dv_mps])
        )
        return float(mlp_forward(self.weights, x))


class RecurrentPolicy(AccelerationPolicy):
    def __init__(
        self,
        weights: Weights,
        normalizer: Normalizer,
        spec: RecurrentSpec,
        name: str = "lstm",
    ):
        self.weights = weights
        self.normalizer = normalizer
        self.spec = spec
        self.name = name
        self.history_steps = spec.window_steps - 1

    def accel(self, state: CFState) -> float:
        rows = [(s, v_fv, dv) for (s, dv, v_fv) in state.history[-self.history_steps :]] if self.history_steps else []
        rows.append((state.spacing_m, state.v_fv_mps, state.dv_mps))
        while len(rows) < self.spec.window_steps:
            rows.insert(0, rows[0])
        window = self.normalizer.normalize(np.asarray(rows, dtype=float))
        return float(recurrent_forward(self.weights, self.spec, window))


def train_supervised(
    spec: MLPSpec | RecurrentSpec,
    train_events: Sequence[CarFollowingEvent],
    val_events: Sequence[CarFollowingEvent],
    cfg: AdamConfig,
) -> tuple[AccelerationPolicy, TrainReport]:
    """Minibatch Adam regression onto derived acceleration targets.

    Features are z-normalized with train-split statistics; the returned
    policy carries the weights from the best validation epoch.
    """
    if not train_events or not val_events:
        raise ValueError("train and validation splits must be nonempty")
    recurrent = isinstance(spec, RecurrentSpec)
    normalizer = Normalizer.fit(np.concatenate([step_features(e) for e in train_events]))

    if recurrent:
        x_train, y_train = build_window_dataset(train_events, spec.window_steps)
        x_val, y_val = build_window_dataset(val_events, spec.window_steps)
    else:
        x_train, y_train = build_step_dataset(train_events)
        x_val, y_val = build_step_dataset(val_events)
    x_train = normalizer.normalize(x_train)
    x_val = normalizer.normalize(x_val)

    rng = np.random.default_rng(cfg.seed)
    weights = init_recurrent(spec, rng) if recurrent else init_mlp(spec, rng)
    state = AdamState.init(weights)
    report = TrainReport()
    best_val = math.inf
    best_weights = {k: w.copy() for k, w in weights.items()}
    n = len(y_train)

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            xb, yb = x_train[batch], y_train[batch]
            if recurrent:
                mask = None
                if spec.dropout_prob > 0.0:
                    keep = rng.random((len(batch), spec.hidden_size)) >= spec.dropout_prob
                    mask = keep / (1.0 - spec.dropout_prob)
                loss, grads = recurrent_loss_gradients(weights, spec, xb, yb, mask)
            else:
                loss, grads = mlp_loss_gradients(weights, xb, yb)
            weights, state = adam_step(weights, grads, state, cfg)
            epoch_loss += loss * len(batch)
        report.train_losses.append(epoch_loss / n)

        if recurrent:
            val_preds = recurrent_forward(weights, spec, x_val)
        else:
            val_preds = mlp_forward(weights, x_val)
        val_loss = float(np.mean((val_preds - y_val) ** 2))
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"validation loss diverged at epoch {epoch}")
        report.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_weights = {k: w.copy() for k, w in weights.items()}
            report.best_epoch = epoch

    if recurrent:
        policy: AccelerationPolicy = RecurrentPolicy(best_weights, normalizer, spec)
    else:
        policy = MLPPolicy(best_weights, normalizer, spec)
    return policy, report


# ---------------------------------------------------------------------------
# Weight serialization (shared JSON format, version field required)
# ---------------------------------------------------------------------------

WEIGHTS_FORMAT_VERSION = 1

_POLICY_LOADERS: dict[str, Callable[[dict], AccelerationPolicy]] = {}


def register_policy_loader(kind: str, loader: Callable[[dict], AccelerationPolicy]) -> None:
    _POLICY_LOADERS[kind] = loader


def weights_to_payload(weights: Weights) -> dict:
    return {
        name: {"shape": list(arr.shape), "data": [float(x) for x in np.ravel(arr)]}
        for name, arr in weights.items()
    }


def weights_from_payload(payload: dict) -> Weights:
    return {
        name: np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        for name, entry in payload.items()
    }


def save_weights_file(
    path: str | Path,
    kind: str,
    spec_fields: dict,
    weights: Weights,
    normalizer: Normalizer | None = None,
    extra: dict | None = None,
) -> None:
    document = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "kind": kind,
        "spec": spec_fields,
        "normalizer": (
            {"mean": list(normalizer.mean), "std": list(normalizer.std)}
            if normalizer is not None
            else None
        ),
        "extra": extra or {},
        "weights": weights_to_payload(weights),
    }
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_weights_file(path: str | Path) -> dict:
    with Path(path).open(encoding="utf-8") as fh:
        document = json.load(fh)
    version = document.get("format_version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version!r}")
    return document


def save_policy(policy: AccelerationPolicy, path: str | Path) -> None:
    if isinstance(policy, MLPPolicy):
        save_weights_file(
            path,
            "mlp",
            {"layer_sizes": list(policy.spec.layer_sizes)},
            policy.weights,
            policy.normalizer,
        )
    elif isinstance(policy, RecurrentPolicy):
        save_weights_file(
            path,
            "lstm",
            {
                "input_size": policy.spec.input_size,
                "window_steps": policy.spec.window_steps,
                "hidden_size": policy.spec.hidden_size,
                "num_layers": policy.spec.num_layers,
                "dropout_prob": policy.spec.dropout_prob,
            },
            policy.weights,
            policy.normalizer,
        )
    else:
        raise TypeError(f"cannot serialize policy of type {type(policy).__name__}")


def _load_mlp(document: dict) -> MLPPolicy:
    spec = MLPSpec(layer_sizes=tuple(document["spec"]["layer_sizes"]))
    norm = document["normalizer"]
    return MLPPolicy(
        weights_from_payload(document["weights"]),
        Normalizer(mean=tuple(norm["mean"]), std=tuple(norm["std"])),
        spec,
    )


def _load_lstm(document: dict) -> RecurrentPolicy:
    spec = RecurrentSpec(**document["spec"])
    norm = document["normalizer"]
    return RecurrentPolicy(
        weights_from_payload(document["weights"]),
        Normalizer(mean=tuple(norm["mean"]), std=tuple(norm["std"])),
        spec,
    )


register_policy_loader("mlp", _load_mlp)
register_policy_loader("lstm", _load_lstm)


def load_policy(path: str | Path) -> AccelerationPolicy:
    document = load_weights_file(path)
    kind = document.get("kind")
    loader = _POLICY_LOADERS.get(kind)
    if loader is None:
        raise ValueError(f"no loader registered for weights kind {kind!r}")
    return loader(document)
