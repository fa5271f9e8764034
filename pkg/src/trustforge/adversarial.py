"""L∞ gradient-sign attacks, adversarial training and MC-dropout uncertainty.

All attacks take input gradients from an eval-mode forward pass and keep
the result inside both the ε-ball around the clean input and [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .data import LabeledDataset, SplitPair
from .errors import AttackError, ContractError
from .tensor import Tensor

METHODS = ("fgsm", "bim", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "bim"
    eps: float = 0.1
    alpha: Optional[float] = None  # None means eps / 4
    steps: int = 10
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"attack method must be one of {METHODS}, got {self.method!r}")
        if self.eps < 0:
            raise ContractError(f"eps must be nonnegative, got {self.eps}")
        if self.steps < 1:
            raise ContractError(f"steps must be at least 1, got {self.steps}")
        if self.alpha is not None and self.alpha <= 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")

    @property
    def step_size(self) -> float:
        return self.eps / 4 if self.alpha is None else self.alpha


def input_gradient(model: nn.Model, x: np.ndarray, y) -> np.ndarray:
    """Gradient of the summed per-sample loss with respect to the input batch."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    z = nn.logits(model, xt, "eval")
    loss = nn.model_loss(model, z, y) * float(len(x))
    (g,) = T.grad(loss, [xt])
    g = g.data
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(x_adv, np.maximum(x - eps, 0.0), np.minimum(x + eps, 1.0))


def _check_input(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ContractError("attack inputs must lie in [0, 1]")
    return x


def fgsm(model: nn.Model, x, y, eps: float = 0.1) -> np.ndarray:
    """Single signed-gradient step of size ``eps``, clipped to [0, 1]."""
    if eps < 0:
        raise ContractError(f"eps must be nonnegative, got {eps}")
    x = _check_input(x)
    if eps == 0:
        return x.copy()
    g = input_gradient(model, x, y)
    return _project(x + eps * np.sign(g), x, eps)


def bim(model: nn.Model, x, y, cfg: AttackConfig = AttackConfig()) -> np.ndarray:
    """Iterated FGSM with projection onto the ε-ball ∩ [0, 1] after each step."""
    return _iterate(model, _check_input(x), y, cfg, x_start=None)


def pgd(model: nn.Model, x, y, cfg: AttackConfig = AttackConfig(method="pgd")) -> np.ndarray:
    """BIM started from a uniform random point of the ε-ball (when ``random_start``)."""
    x = _check_input(x)
    start = None
    if cfg.random_start and cfg.eps > 0:
        rng = np.random.default_rng(cfg.seed)
        start = _project(x + rng.uniform(-cfg.eps, cfg.eps, x.shape), x, cfg.eps)
    return _iterate(model, x, y, cfg, start)


def _iterate(model, x, y, cfg: AttackConfig, x_start) -> np.ndarray:
    if cfg.eps == 0:
        return x.copy()
    x_adv = x.copy() if x_start is None else x_start
    for _ in range(cfg.steps):
        g = input_gradient(model, x_adv, y)
        x_adv = _project(x_adv + cfg.step_size * np.sign(g), x, cfg.eps)
    return x_adv


def attack(model: nn.Model, x, y, cfg: AttackConfig) -> np.ndarray:
    if cfg.method == "fgsm":
        return fgsm(model, x, y, cfg.eps)
    if cfg.method == "bim":
        return bim(model, x, y, cfg)
    return pgd(model, x, y, cfg)


def attack_dataset(model: nn.Model, ds: LabeledDataset, cfg: AttackConfig, batch: int = 500) -> np.ndarray:
    """Adversarial versions of every sample in ``ds``, processed in chunks.

    PGD chunks draw their random starts from seeds derived from ``cfg.seed``
    and the chunk index, so the result does not depend on thread scheduling.
    """
    out = []
    for k, start in enumerate(range(0, len(ds), batch)):
        xb = np.asarray(ds.x[start:start + batch], dtype=np.float64)
        yb = np.asarray(ds.labels[start:start + batch])
        c = replace(cfg, seed=cfg.seed * 1_000_003 + k) if cfg.method == "pgd" else cfg
        out.append(attack(model, xb, yb, c))
    return np.concatenate(out) if out else np.zeros((0,) + ds.x.shape[1:])


def robust_accuracy(model: nn.Model, ds: LabeledDataset, cfg: AttackConfig, batch: int = 500) -> float:
    x_adv = attack_dataset(model, ds, cfg, batch)
    return float(np.mean(nn.predict(model, x_adv) == ds.labels))


def adversarial_train(model: nn.Model, split, attack_cfg: Optional[AttackConfig] = None,
                      train_cfg: Optional[nn.TrainConfig] = None, mix: float = 1.0, log=None) -> nn.TrainedModel:
    """Train on minibatches whose first ``round(mix * B)`` samples are replaced by attacks.

    The attack is regenerated against the current parameters at every step.
    """
    acfg = attack_cfg or AttackConfig(method="bim")
    if not 0 <= mix <= 1:
        raise ContractError(f"mix must lie in [0, 1], got {mix}")

    def hook(m, xb, yb, rng):
        k = int(round(mix * len(xb)))
        if k == 0:
            return xb, yb
        c = acfg
        if acfg.method == "pgd":
            c = replace(acfg, seed=int(rng.integers(2**31)))
        xb = xb.copy()
        xb[:k] = attack(m, xb[:k], yb[:k], c)
        return xb, yb

    return nn.train_classifier(model, split, train_cfg, batch_hook=hook, log=log)


# ---------------------------------------------------------------------------
# uncertainty
# ---------------------------------------------------------------------------

@dataclass
class UncertaintyReport:
    mean: np.ndarray
    variance: np.ndarray
    passes: int

    @property
    def total_variance(self) -> np.ndarray:
        """Per-sample variance summed over output dimensions."""
        return self.variance.reshape(len(self.variance), -1).sum(axis=1)

    def to_dict(self) -> dict:
        return {"passes": self.passes, "mean": self.mean.tolist(), "variance": self.variance.tolist()}


def mc_dropout_predict(model: nn.Model, x, passes: int = 50, seed: int = 0, batch: int = 1000) -> UncertaintyReport:
    """Mean and unbiased variance of ``passes`` train-mode (dropout on) forwards."""
    if passes < 2:
        raise ContractError(f"MC dropout needs at least 2 passes, got {passes}")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    draws = []
    with T.no_grad():
        for _ in range(passes):
            parts = [nn.forward(model, x[s:s + batch], "train", rng).data for s in range(0, len(x), batch)]
            draws.append(np.concatenate(parts))
    return summarize_passes(np.stack(draws))


def summarize_passes(values) -> UncertaintyReport:
    """Report for explicit per-pass outputs (passes along axis 0)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise ContractError(f"need at least 2 passes, got {len(v)}")
    # deviations from the first pass are exactly zero when all passes agree
    d = v - v[0]
    return UncertaintyReport(v.mean(axis=0), d.var(axis=0, ddof=1), len(v))
