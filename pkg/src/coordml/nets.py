"""MLP regressors and the shared full-batch training loop.

Two architectures are provided. ``three_layer`` has widths
``(d // 2, d // 4, 1)``; ``five_layer_dropout`` has widths ``(d, d, d, d, 1)``
with dropout on the output of the second hidden layer. Hidden layers use ReLU,
the output layer is linear.

Training is plain gradient descent with one step per epoch over the whole
training batch, global-norm gradient clipping and early stopping on a hold-out
loss. Several networks can be trained together against one joint loss; they
keep separate parameters but share the step schedule and the stopping rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .grad_engine import Tape, clip_global_norm

THREE_LAYER = "three_layer"
FIVE_LAYER_DROPOUT = "five_layer_dropout"
VARIANTS = (THREE_LAYER, FIVE_LAYER_DROPOUT)

# retention probability for the dropout layer of the five-layer network
DEFAULT_KEEP_PROB = 0.1

MODEL_SCHEMA_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    layer_widths: tuple[int, ...]
    dropout_keep_prob: float | None = None
    # index of the hidden layer whose activations get the dropout mask
    dropout_after: int | None = None

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.layer_widths or self.layer_widths[-1] != 1:
            raise ValueError("last layer width must be 1")
        if min(self.layer_widths) < 1:
            raise ValueError(f"all widths must be >= 1, got {self.layer_widths}")
        if self.dropout_keep_prob is not None and not 0.0 < self.dropout_keep_prob <= 1.0:
            raise ValueError("dropout_keep_prob must lie in (0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 2000
    clip_norm: float = 3.0
    early_stop_patience: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")


@dataclass
class FittedRegressor:
    spec: MlpSpec
    params: dict[str, np.ndarray]
    x_mean: np.ndarray
    x_scale: np.ndarray
    history: dict[str, list[float]] = field(default_factory=lambda: {"train_loss": [], "holdout_loss": []})
    stopped_epoch: int = 0
    best_epoch: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.spec.layer_widths)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected X with {self.spec.input_dim} columns, got shape {X.shape}")
        h = (X - self.x_mean) / self.x_scale
        last = self.n_layers - 1
        for k in range(self.n_layers):
            h = h @ self.params[f"W{k}"] + self.params[f"b{k}"]
            if k < last:
                h = np.maximum(h, 0.0)
        return h[:, 0]

    __call__ = predict

    def add_to_tape(self, tape: Tape, x_node: int, prefix: str) -> int:
        """Record this network on ``tape`` and return the (n, 1) output node."""
        h = x_node
        last = self.n_layers - 1
        for k in range(self.n_layers):
            w = tape.param(f"{prefix}W{k}", self.params[f"W{k}"])
            b = tape.param(f"{prefix}b{k}", self.params[f"b{k}"])
            h = tape.add(tape.matmul(h, w), b)
            if k < last:
                h = tape.relu(h)
                if self.spec.dropout_keep_prob is not None and k == self.spec.dropout_after:
                    h = tape.dropout(h, self.spec.dropout_keep_prob)
        return h

    def to_dict(self) -> dict:
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "kind": "mlp",
            "spec": {
                "input_dim": self.spec.input_dim,
                "layer_widths": list(self.spec.layer_widths),
                "dropout_keep_prob": self.spec.dropout_keep_prob,
                "dropout_after": self.spec.dropout_after,
            },
            "x_mean": _array_to_json(self.x_mean),
            "x_scale": _array_to_json(self.x_scale),
            "params": {k: _array_to_json(v) for k, v in self.params.items()},
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "FittedRegressor":
        if obj.get("kind") != "mlp":
            raise ValueError("not an mlp model file")
        if obj.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {obj.get('schema_version')}")
        s = obj["spec"]
        spec = MlpSpec(s["input_dim"], tuple(s["layer_widths"]), s["dropout_keep_prob"], s["dropout_after"])
        return cls(
            spec=spec,
            params={k: _array_from_json(v) for k, v in obj["params"].items()},
            x_mean=_array_from_json(obj["x_mean"]),
            x_scale=_array_from_json(obj["x_scale"]),
            history={k: list(v) for k, v in obj.get("history", {}).items()},
            stopped_epoch=obj.get("stopped_epoch", 0),
            best_epoch=obj.get("best_epoch", 0),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FittedRegressor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _array_to_json(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": a.ravel().tolist()}


def _array_from_json(obj: Mapping) -> np.ndarray:
    return np.asarray(obj["values"], dtype=np.float64).reshape(obj["shape"])


def layer_widths(d: int, variant: str) -> tuple[int, ...]:
    if variant == THREE_LAYER:
        if d < 4:
            raise ValueError(f"three_layer needs d >= 4 so that d // 4 >= 1, got d={d}")
        return (d // 2, d // 4, 1)
    if variant == FIVE_LAYER_DROPOUT:
        if d < 1:
            raise ValueError("d must be >= 1")
        return (d, d, d, d, 1)
    raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")


def build_mlp(
    d: int,
    variant: str = THREE_LAYER,
    seed: int = 0,
    keep_prob: float = DEFAULT_KEEP_PROB,
    keep_prob_is_drop_rate: bool = False,
) -> FittedRegressor:
    """Build an untrained network with Glorot-uniform weights and zero biases.

    ``keep_prob`` only matters for the five-layer variant. Setting
    ``keep_prob_is_drop_rate`` reads it as a drop probability instead, i.e.
    units are retained with probability ``1 - keep_prob``.
    """
    widths = layer_widths(d, variant)
    if variant == FIVE_LAYER_DROPOUT:
        keep = 1.0 - keep_prob if keep_prob_is_drop_rate else keep_prob
        spec = MlpSpec(d, widths, dropout_keep_prob=keep, dropout_after=1)
    else:
        spec = MlpSpec(d, widths)
    rng = np.random.default_rng(seed)
    params = {}
    fan_in = d
    for k, fan_out in enumerate(widths):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{k}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"b{k}"] = np.zeros(fan_out)
        fan_in = fan_out
    return FittedRegressor(spec, params, x_mean=np.zeros(d), x_scale=np.ones(d))


def fit_scaler(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


# loss(tape, prediction nodes, {name: input node}) -> scalar node
LossBuilder = Callable[[Tape, list, dict], int]


def mse_loss(target: str) -> LossBuilder:
    """Mean squared error of the single network against input ``target``."""

    def build(tape: Tape, preds: list, batch: dict) -> int:
        return tape.mean(tape.square(tape.sub(batch[target], preds[0])))

    return build


def train(
    models: FittedRegressor | Sequence[FittedRegressor],
    loss: LossBuilder,
    train_data: Mapping[str, np.ndarray],
    holdout_data: Mapping[str, np.ndarray],
    cfg: TrainConfig = TrainConfig(),
):
    """Full-batch gradient descent with clipping and early stopping.

    ``train_data`` and ``holdout_data`` hold the covariates under ``"X"`` and
    any number of 1-d target arrays; targets become ``(n, 1)`` input nodes of
    the loss graph. The returned networks carry the parameters from the epoch
    with the lowest hold-out loss (earliest epoch on ties). Epoch 0 is the
    initialisation.
    """
    single = isinstance(models, FittedRegressor)
    nets = [models] if single else list(models)
    X_tr = np.asarray(train_data["X"], dtype=np.float64)
    X_ho = np.asarray(holdout_data["X"], dtype=np.float64)
    if len(X_tr) == 0 or len(X_ho) == 0:
        raise ValueError("train and holdout sets must be non-empty")
    d = X_tr.shape[1]
    if X_ho.shape[1] != d:
        raise ValueError(f"train has {d} columns but holdout has {X_ho.shape[1]}")
    for net in nets:
        if net.spec.input_dim != d:
            raise ValueError(f"network expects {net.spec.input_dim} features, data has {d}")

    x_mean, x_scale = fit_scaler(X_tr)
    tape = Tape(seed=cfg.seed)
    x_node = tape.input("X", (None, d))
    batch = {k: tape.input(k, (None, 1)) for k in train_data if k != "X"}
    preds = [net.add_to_tape(tape, x_node, f"{i}.") for i, net in enumerate(nets)]
    loss_node = loss(tape, preds, batch)

    def feed(data, X):
        out = {"X": (X - x_mean) / x_scale}
        for k in batch:
            out[k] = np.asarray(data[k], dtype=np.float64).reshape(-1, 1)
        return out

    train_in = feed(train_data, X_tr)
    hold_in = feed(holdout_data, X_ho)

    def holdout_loss(epoch: int) -> float:
        tape.forward(hold_in, train=False)
        val = float(tape.value(loss_node))
        if not math.isfinite(val):
            raise TrainingError(f"non-finite hold-out loss at epoch {epoch}")
        return val

    lr = cfg.learning_rate
    train_hist: list[float] = []
    hold_hist = [holdout_loss(0)]
    best_loss, best_epoch = hold_hist[0], 0
    best_params = dict(tape.params)
    since_best = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        tape.forward(train_in, train=True)
        cur = float(tape.value(loss_node))
        if not math.isfinite(cur):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        train_hist.append(cur)
        grads = tape.backward(loss_node)
        if math.isfinite(cfg.clip_norm):
            grads = clip_global_norm(grads, cfg.clip_norm)
        for name, g in grads.items():
            tape.params[name] = tape.params[name] - lr * g
        h = holdout_loss(epoch)
        hold_hist.append(h)
        if h < best_loss:
            best_loss, best_epoch = h, epoch
            best_params = dict(tape.params)
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.early_stop_patience:
                break

    fitted = []
    for i, net in enumerate(nets):
        prefix = f"{i}."
        params = {k[len(prefix):]: v for k, v in best_params.items() if k.startswith(prefix)}
        fitted.append(
            replace(
                net,
                params=params,
                x_mean=x_mean,
                x_scale=x_scale,
                history={"train_loss": list(train_hist), "holdout_loss": list(hold_hist)},
                stopped_epoch=epoch,
                best_epoch=best_epoch,
            )
        )
    return fitted[0] if single else fitted


def predict(model: FittedRegressor, X) -> np.ndarray:
    return model.predict(X)
