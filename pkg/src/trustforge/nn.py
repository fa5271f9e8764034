"""Layered networks, losses, Adam/AdamW and the classifier training loop.

A model is a list of layer-spec dicts plus an ordered dict of named
parameter tensors. Specs are plain JSON-able data, which is what the
checkpoint format stores.

Dropout follows the classic (non-inverted) convention: in train mode each
unit is kept with probability ``1 - p`` and left unscaled; in eval mode
activations are multiplied by ``1 - p`` so that expectations agree.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledDataset, SplitPair, iterate_minibatches, stratified_split
from .errors import ContractError, DimensionError, FormatError
from .tensor import Tensor

HEADS = ("softmax", "sigmoid", "linear")


def _out_shape(spec: dict, shape: tuple) -> tuple:
    kind = spec["type"]
    if kind == "linear":
        if len(shape) != 1 or shape[0] != spec["in"]:
            raise DimensionError(f"linear layer expects ({spec['in']},) input, got {shape}")
        return (spec["out"],)
    if kind == "conv":
        if len(shape) != 3 or shape[0] != spec["in"]:
            raise DimensionError(f"conv layer expects {spec['in']} input channels, got {shape}")
        k = spec["k"]
        if spec.get("padding", "valid") == "same":
            return (spec["out"],) + shape[1:]
        if k > shape[1] or k > shape[2]:
            raise DimensionError(f"kernel {k} larger than feature map {shape}")
        return (spec["out"], shape[1] - k + 1, shape[2] - k + 1)
    if kind == "maxpool":
        s = spec.get("size", 2)
        if len(shape) != 3 or shape[1] < s or shape[2] < s:
            raise DimensionError(f"maxpool {s} cannot reduce {shape}")
        return (shape[0], shape[1] // s, shape[2] // s)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "reshape":
        new = tuple(int(d) for d in spec["shape"])
        if int(np.prod(new)) != int(np.prod(shape)):
            raise DimensionError(f"cannot reshape {shape} into {new}")
        return new
    if kind == "attention":
        if len(shape) != 3 or shape[0] != spec["channels"]:
            raise DimensionError(f"attention expects {spec['channels']} channels, got {shape}")
        return shape
    if kind == "dropout":
        if not 0 <= spec["p"] < 1:
            raise ContractError(f"dropout rate must be in [0, 1), got {spec['p']}")
        return shape
    if kind in ("relu", "leaky_relu", "tanh", "sigmoid"):
        return shape
    raise ContractError(f"unknown layer type {kind!r}")


class Model:
    """Sequential network with named parameters.

    ``layers`` are dicts such as ``{"type": "linear", "in": 784, "out": 256}``,
    ``{"type": "conv", "in": 1, "out": 8, "k": 3}``, ``{"type": "maxpool"}``,
    ``{"type": "relu"}``, ``{"type": "dropout", "p": 0.3}``,
    ``{"type": "flatten"}``, ``{"type": "reshape", "shape": [C, H, W]}`` or
    ``{"type": "attention", "channels": C}``.
    """

    def __init__(self, layers: Sequence[dict], input_shape: Sequence[int], head: str = "softmax",
                 params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0):
        if head not in HEADS:
            raise ContractError(f"head must be one of {HEADS}, got {head!r}")
        self.layers: List[dict] = [dict(s) for s in layers]
        self.input_shape = tuple(int(d) for d in input_shape)
        self.head = head
        shape = self.input_shape
        self.shapes = [shape]
        for spec in self.layers:
            shape = _out_shape(spec, shape)
            self.shapes.append(shape)
        self.output_shape = shape
        self.params: Dict[str, Tensor] = {}
        init = self._init_params(np.random.default_rng(seed))
        if params is not None:
            for name, value in init.items():
                if name not in params:
                    raise FormatError(f"missing parameter {name}")
                if params[name].shape != value.shape:
                    raise DimensionError(f"parameter {name}: expected {value.shape}, got {params[name].shape}")
            init = {k: np.array(params[k], dtype=np.float64) for k in init}
        for name, value in init.items():
            self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        out = {}
        for i, spec in enumerate(self.layers):
            kind = spec["type"]
            if kind == "linear":
                fan_in = spec["in"]
                out[f"{i}.W"] = rng.normal(0, math.sqrt(2.0 / fan_in), (fan_in, spec["out"]))
                out[f"{i}.b"] = np.zeros(spec["out"])
            elif kind == "conv":
                fan_in = spec["in"] * spec["k"] ** 2
                out[f"{i}.W"] = rng.normal(0, math.sqrt(2.0 / fan_in), (spec["out"], spec["in"], spec["k"], spec["k"]))
                out[f"{i}.b"] = np.zeros(spec["out"])
            elif kind == "attention":
                out[f"{i}.w"] = rng.normal(0, math.sqrt(1.0 / spec["channels"]), (spec["channels"],))
        return out

    @property
    def dropout_rates(self) -> List[float]:
        return [s["p"] for s in self.layers if s["type"] == "dropout"]

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def clone(self) -> "Model":
        return Model(self.layers, self.input_shape, self.head, self.state())

    def spec(self) -> dict:
        return {"layers": copy.deepcopy(self.layers), "input_shape": list(self.input_shape), "head": self.head}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, x, mode: str = "eval", rng=None) -> Tensor:
        return forward(self, x, mode, rng)

    def __repr__(self):
        kinds = "-".join(s["type"] for s in self.layers)
        return f"Model({kinds}, head={self.head}, params={self.n_parameters()})"


def spatial_attention(x: Tensor, w: Tensor) -> Tensor:
    """Reweight feature positions by a softmax over 1×1-conv scores.

    ``x`` is (N, C, H, W). Scores ``s = w·x[:, :, i, j]`` are normalized
    over all H·W positions into ``alpha``; the output ``alpha * x`` is rescaled
    by H·W so that a uniform ``alpha`` is the identity.
    """
    n, c, h, wd = x.shape
    flat = T.reshape(x, (n, c, h * wd))
    scores = T.matmul(T.reshape(w, (1, 1, c)), flat)
    alpha = T.softmax(T.reshape(scores, (n, h * wd)), axis=1)
    alpha = T.reshape(alpha, (n, 1, h, wd)) * float(h * wd)
    return x * alpha


def _coerce_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    # a missing seed means seed 0 so that train-mode forwards stay reproducible
    return np.random.default_rng(0 if rng is None else rng)


def run_layers(model: Model, h: Tensor, start: int, stop: int, mode: str, rng) -> Tensor:
    """Apply ``model.layers[start:stop]`` to ``h``."""
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    for i in range(start, stop):
        spec = model.layers[i]
        kind = spec["type"]
        if kind == "linear":
            h = T.matmul(h, model.params[f"{i}.W"]) + model.params[f"{i}.b"]
        elif kind == "conv":
            h = T.conv2d(h, model.params[f"{i}.W"], model.params[f"{i}.b"], spec.get("padding", "valid"))
        elif kind == "maxpool":
            h = T.max_pool2d(h, spec.get("size", 2))
        elif kind == "flatten":
            h = T.reshape(h, (h.shape[0], -1))
        elif kind == "reshape":
            h = T.reshape(h, (h.shape[0],) + tuple(spec["shape"]))
        elif kind == "relu":
            h = T.relu(h)
        elif kind == "leaky_relu":
            h = T.leaky_relu(h, spec.get("slope", 0.2))
        elif kind == "tanh":
            h = h.tanh()
        elif kind == "sigmoid":
            h = h.sigmoid()
        elif kind == "attention":
            h = spatial_attention(h, model.params[f"{i}.w"])
        elif kind == "dropout":
            p = spec["p"]
            if p == 0:
                continue
            if mode == "train":
                h = h * Tensor(rng.random(h.shape) >= p)
            else:
                h = h * (1.0 - p)
    return h


def _check_input(model: Model, x) -> Tensor:
    h = T.as_tensor(x)
    if tuple(h.shape[1:]) != model.input_shape:
        raise DimensionError(f"model expects input (N, {', '.join(map(str, model.input_shape))}), got {h.shape}")
    return h


def logits(model: Model, x, mode: str = "eval", rng=None) -> Tensor:
    """Network output before the head nonlinearity."""
    h = _check_input(model, x)
    return run_layers(model, h, 0, len(model.layers), mode, _coerce_rng(rng))


def apply_head(model: Model, z: Tensor) -> Tensor:
    if model.head == "softmax":
        return T.softmax(z, axis=-1)
    if model.head == "sigmoid":
        return z.sigmoid()
    return z


def forward(model: Model, x, mode: str = "eval", rng=None) -> Tensor:
    """Predictions: class probabilities (softmax/sigmoid heads) or raw outputs (linear head)."""
    return apply_head(model, logits(model, x, mode, rng))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

BCE_EPS = 1e-12


def bce_loss(yhat, y) -> Tensor:
    """Mean binary cross-entropy on probabilities clipped to [1e-12, 1 - 1e-12]."""
    yhat = T.as_tensor(yhat)
    y = np.asarray(y, dtype=np.float64).reshape(yhat.shape) if np.size(y) == yhat.size else np.asarray(y)
    if np.size(y) != yhat.size:
        raise ContractError(f"bce_loss: {yhat.size} predictions but {np.size(y)} labels")
    p = T.clip(yhat, BCE_EPS, 1.0 - BCE_EPS)
    ll = Tensor(y) * p.log() + Tensor(1.0 - y) * (1.0 - p).log()
    return -ll.mean()


def bce_with_logits(z, y) -> Tensor:
    """Numerically stable BCE on logits: ``relu(z) - z*y + log(1 + exp(-|z|))``."""
    z = T.as_tensor(z)
    y = np.asarray(y, dtype=np.float64)
    if y.size != z.size:
        raise ContractError(f"bce_with_logits: {z.size} logits but {y.size} labels")
    y = Tensor(y.reshape(z.shape))
    return (T.relu(z) - z * y + (1.0 + (-z.abs()).exp()).log()).mean()


def ce_loss(logits_, y) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    z = T.as_tensor(logits_)
    y = np.asarray(y)
    if z.ndim != 2 or len(y) != z.shape[0]:
        raise ContractError(f"ce_loss expects (m, C) logits and m labels, got {z.shape} and {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1] or not np.issubdtype(y.dtype, np.integer)):
        raise ContractError(f"class indices must be integers in [0, {z.shape[1]})")
    lp = T.log_softmax(z, axis=1)
    return -lp[np.arange(len(y)), y].mean()


def mse_loss(pred, y) -> Tensor:
    pred = T.as_tensor(pred)
    y = np.asarray(y, dtype=np.float64)
    if y.size != pred.size:
        raise ContractError(f"mse_loss: {pred.size} predictions but {y.size} targets")
    d = pred - Tensor(y.reshape(pred.shape))
    return (d * d).mean()


def model_loss(model: Model, z: Tensor, y) -> Tensor:
    """Loss matched to the head: CE for softmax, BCE for sigmoid, MSE for linear."""
    if model.head == "softmax":
        return ce_loss(z, y)
    if model.head == "sigmoid":
        return bce_with_logits(z, y)
    return mse_loss(z, y)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

_T_MAX = 2**53


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ContractError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.t < 0:
            raise ContractError("step counter must be nonnegative")


def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              lr: Optional[float] = None) -> Dict[str, Tensor]:
    """One Adam update in place; ``weight_decay > 0`` adds decoupled (AdamW) decay.

    Parameters with no entry in ``grads`` are treated as having zero gradient.
    """
    if state.t >= _T_MAX:
        raise ContractError(f"Adam step counter overflow at t={state.t}")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise ContractError(f"non-finite gradient for {name}")
    eta = state.lr if lr is None else lr
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data -= eta * state.weight_decay * p.data
        p.data -= eta * update
    return params


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    """Cosine annealing from ``base`` at step 0 to ``floor`` at ``total``."""
    if total <= 0:
        return base
    frac = min(step, total) / total
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale in place so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if max_norm and total > max_norm:
        s = max_norm / total
        for g in grads.values():
            if g is not None:
                g *= s
    return total


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 5e-5
    optimizer: str = "adamw"
    schedule: str = "cosine"
    patience: int = 3
    val_fraction: float = 0.1
    clip_norm: float = 5.0
    seed: int = 0
    max_steps: Optional[int] = None
    eval_batch: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class TrainedModel:
    model: Model
    history: List[dict]
    config: TrainConfig
    steps: int = 0
    stopped_early: bool = False


BatchHook = Callable[[Model, np.ndarray, np.ndarray, np.random.Generator], tuple]


def _batch(ds: LabeledDataset, idx) -> tuple:
    return np.asarray(ds.x[idx], dtype=np.float64), np.asarray(ds.labels[idx])


def loss_and_accuracy(model: Model, ds: LabeledDataset, batch: int = 1000) -> tuple:
    """Eval-mode mean loss and accuracy (accuracy is None for a linear head)."""
    if len(ds) == 0:
        raise ContractError("empty dataset")
    total, correct = 0.0, 0
    with T.no_grad():
        for start in range(0, len(ds), batch):
            xb, yb = _batch(ds, slice(start, start + batch))
            z = logits(model, xb, "eval")
            total += model_loss(model, z, yb).item() * len(yb)
            if model.head != "linear":
                correct += int(np.sum(decide(model, z.data) == yb))
    acc = None if model.head == "linear" else correct / len(ds)
    return total / len(ds), acc


def decide(model: Model, z: np.ndarray) -> np.ndarray:
    """Class decisions from logits: argmax for softmax, threshold 0.5 for sigmoid."""
    if model.head == "softmax":
        return np.argmax(z, axis=1)
    if model.head == "sigmoid":
        return (z.reshape(len(z), -1)[:, 0] > 0).astype(np.int64)
    raise ContractError("decisions need a softmax or sigmoid head")


def predict(model: Model, x, batch: int = 1000) -> np.ndarray:
    x = np.asarray(x)
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch):
            out.append(decide(model, logits(model, np.asarray(x[start:start + batch], dtype=np.float64)).data))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, ds: LabeledDataset, batch: int = 1000) -> float:
    """Fraction of samples whose decision matches the label."""
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(predict(model, ds.x, batch) == ds.labels))


def train_step(model: Model, state: AdamState, xb, yb, rng, lr: float, clip_norm: float) -> float:
    model.zero_grad()
    z = logits(model, xb, "train", rng)
    loss = model_loss(model, z, yb)
    loss.backward()
    grads = {k: p.grad for k, p in model.params.items()}
    clip_grad_norm(grads, clip_norm)
    adam_step(state, model.params, grads, lr)
    return loss.item()


def train_classifier(model: Model, data, config: Optional[TrainConfig] = None,
                     batch_hook: Optional[BatchHook] = None, log: Optional[Callable[[dict], None]] = None) -> TrainedModel:
    """Minibatch Adam/AdamW training with validation-based early stopping.

    ``data`` is a :class:`SplitPair` (its ``train`` part is used) or a
    :class:`LabeledDataset`. A stratified ``val_fraction`` of the training data
    is held out for early stopping (disabled when ``val_fraction`` is 0); the
    parameters with the best validation loss are restored at the end.
    ``batch_hook(model, x, y, rng) -> (x, y)`` may rewrite each minibatch
    (e.g. to mix in adversarial examples).
    """
    cfg = config or TrainConfig()
    if cfg.epochs < 1:
        raise ContractError(f"epochs must be at least 1, got {cfg.epochs}")
    if cfg.optimizer not in ("adam", "adamw"):
        raise ContractError(f"optimizer must be 'adam' or 'adamw', got {cfg.optimizer!r}")
    ds = data.train if isinstance(data, SplitPair) else data
    if len(ds) == 0:
        raise ContractError("cannot train on an empty dataset")
    val = None
    if cfg.val_fraction > 0:
        if model.head == "linear":
            rng0 = np.random.default_rng(cfg.seed)
            perm = rng0.permutation(len(ds))
            k = max(1, int(round(cfg.val_fraction * len(ds))))
            val, ds = ds.subset(np.sort(perm[:k])), ds.subset(np.sort(perm[k:]))
        else:
            sp = stratified_split(ds, cfg.val_fraction, cfg.seed)
            ds, val = sp.train, sp.test

    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay if cfg.optimizer == "adamw" else 0.0)
    steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    history: List[dict] = []
    best, best_state, bad = math.inf, None, 0
    step, stopped = 0, False
    for epoch in range(cfg.epochs):
        run_loss, seen = 0.0, 0
        for idx in iterate_minibatches(len(ds), cfg.batch_size, rng):
            if step >= total:
                break
            xb, yb = _batch(ds, idx)
            if batch_hook is not None:
                xb, yb = batch_hook(model, xb, yb, rng)
            lr = cosine_lr(cfg.lr, step, total) if cfg.schedule == "cosine" else cfg.lr
            run_loss += train_step(model, state, xb, yb, rng, lr, cfg.clip_norm) * len(yb)
            seen += len(yb)
            step += 1
        rec = {"epoch": epoch + 1, "steps": step, "train_loss": run_loss / max(seen, 1), "lr": lr}
        if val is not None:
            vl, va = loss_and_accuracy(model, val, cfg.eval_batch)
            rec.update(val_loss=vl, val_acc=va)
            if vl < best - 1e-12:
                best, best_state, bad = vl, model.state(), 0
            else:
                bad += 1
        history.append(rec)
        if log is not None:
            log(rec)
        if val is not None and bad >= cfg.patience:
            stopped = True
            break
        if step >= total:
            break
    if best_state is not None:
        model.load_state(best_state)
    return TrainedModel(model, history, cfg, step, stopped)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def mlp(sizes: Sequence[int], activation: str = "relu", head: str = "softmax",
        dropout: float = 0.0, seed: int = 0) -> Model:
    layers: List[dict] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append({"type": "linear", "in": a, "out": b})
        if i < len(sizes) - 2:
            layers.append({"type": activation})
            if dropout:
                layers.append({"type": "dropout", "p": dropout})
    return Model(layers, (sizes[0],), head, seed=seed)


def dnn(seed: int = 0) -> Model:
    """784-256-128-10 ReLU network on flattened 28×28 images."""
    layers = [{"type": "flatten"}, {"type": "linear", "in": 784, "out": 256}, {"type": "relu"},
              {"type": "linear", "in": 256, "out": 128}, {"type": "relu"},
              {"type": "linear", "in": 128, "out": 10}]
    return Model(layers, (1, 28, 28), "softmax", seed=seed)


def cnn(dropout: float = 0.0, seed: int = 0) -> Model:
    """conv(1→8,3×3)-ReLU-pool-conv(8→16,3×3)-ReLU-pool-affine(10).

    With ``dropout > 0`` a dropout layer precedes the final affine map.
    """
    layers = [{"type": "conv", "in": 1, "out": 8, "k": 3}, {"type": "relu"}, {"type": "maxpool", "size": 2},
              {"type": "conv", "in": 8, "out": 16, "k": 3}, {"type": "relu"}, {"type": "maxpool", "size": 2},
              {"type": "flatten"}]
    if dropout:
        layers.append({"type": "dropout", "p": dropout})
    layers.append({"type": "linear", "in": 16 * 5 * 5, "out": 10})
    return Model(layers, (1, 28, 28), "softmax", seed=seed)


def regression_net(hidden: int = 15, dropout: float = 0.2, seed: int = 0) -> Model:
    """1-hidden-1 ReLU regressor with dropout on the hidden layer."""
    return mlp([1, hidden, 1], "relu", "linear", dropout=dropout, seed=seed)


def last_conv_index(model: Model) -> int:
    idx = [i for i, s in enumerate(model.layers) if s["type"] == "conv"]
    if not idx:
        raise ContractError("model has no convolutional layer")
    return idx[-1]


def features_and_logits(model: Model, x, layer: int, mode: str = "eval", rng=None) -> tuple:
    """Activation after ``layers[layer]`` (and its rectifier, if next) plus the final logits."""
    h = _check_input(model, x)
    keep = layer + 1
    if keep < len(model.layers) and model.layers[keep]["type"] in ("relu", "leaky_relu"):
        keep += 1
    gen = _coerce_rng(rng)
    feats = run_layers(model, h, 0, keep, mode, gen)
    return feats, run_layers(model, feats, keep, len(model.layers), mode, gen)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

MAGIC = b"TFMD"
VERSION = 1


def save_models(path, models: Dict[str, Model], config: Optional[dict] = None,
                history: Optional[list] = None) -> Path:
    """Write one or more named models to ``path`` plus a ``path + '.json'`` sidecar.

    Binary layout, little-endian: ``b"TFMD"``, u32 version, u32 header length,
    UTF-8 JSON header (per-section layer specs, input shape, head, parameter
    names and shapes), then every parameter as raw f64 in header order.
    """
    path = Path(path)
    header = {"sections": []}
    blobs = []
    for section, model in models.items():
        spec = model.spec()
        spec["name"] = section
        spec["params"] = [[n, list(p.shape)] for n, p in model.params.items()]
        header["sections"].append(spec)
        blobs.extend(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.params.values())
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<II", VERSION, len(head)) + head + b"".join(blobs))
    side = {"config": config or {}, "history": history or []}
    Path(str(path) + ".json").write_text(json.dumps(side, sort_keys=True, indent=2, default=_jsonable))
    return path


def save_model(path, model: Model, config: Optional[dict] = None, history: Optional[list] = None) -> Path:
    return save_models(path, {"model": model}, config, history)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def load_models(path) -> Dict[str, Model]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"not a model checkpoint: magic {raw[:4]!r}")
    if len(raw) < 12:
        raise FormatError("checkpoint header truncated")
    version, n = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + n])
    off = 12 + n
    out = {}
    for spec in header["sections"]:
        params = {}
        for name, shape in spec["params"]:
            count = int(np.prod(shape))
            end = off + 8 * count
            if end > len(raw):
                raise FormatError(f"checkpoint truncated in parameter {spec['name']}/{name}")
            params[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).astype(np.float64)
            off = end
        out[spec["name"]] = Model(spec["layers"], spec["input_shape"], spec["head"], params)
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after parameters")
    return out


def load_model(path) -> Model:
    models = load_models(path)
    if len(models) != 1:
        raise FormatError(f"checkpoint holds {len(models)} models; use load_models")
    return next(iter(models.values()))


def load_sidecar(path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text())
