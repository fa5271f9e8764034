"""Classical-GAN identities and a conditional attention WGAN-GP with a bias penalty.

The generator maps ``[z, onehot(y)]`` through an MLP whose hidden layer is
reshaped into a small feature map and passed through spatial attention.
The critic embeds ``x`` with an MLP, concatenates ``onehot(y)`` to the
penultimate features and ends in an unsquashed linear score.

Training follows the usual WGAN-GP schedule: ``n_critic`` critic updates
on ``E[D(fake)] - E[D(real)] + GP`` per generator update on
``-E[D(fake)] + lambda_bias * R_bias``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import xlogy

from . import nn
from . import tensor as T
from .data import LabeledDataset
from .errors import ContractError, DivergenceError
from .tensor import Tensor
from .xai import SurrogateExplanation, lime_explain

LN4 = math.log(4.0)


# ---------------------------------------------------------------------------
# discrete oracle identities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteDist:
    support: tuple
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or len(p) != len(self.support):
            raise ContractError(f"{len(self.support)} support points but probabilities of shape {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ContractError(f"probabilities must be nonnegative and sum to 1, got sum {p.sum()!r}")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "support", tuple(self.support))

    @classmethod
    def from_probs(cls, probs) -> "DiscreteDist":
        return cls(tuple(range(len(probs))), np.asarray(probs, dtype=np.float64))


def _aligned(p: DiscreteDist, q: DiscreteDist):
    if p.support != q.support:
        raise ContractError("distributions must share the same support")
    return p.probs, q.probs


def optimal_discriminator(p: DiscreteDist, q: DiscreteDist) -> np.ndarray:
    """``D*(x) = p(x) / (p(x) + q(x))``, and 0.5 where both vanish."""
    a, b = _aligned(p, q)
    s = a + b
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, a / np.where(s > 0, s, 1.0), 0.5)


def value_function(p: DiscreteDist, q: DiscreteDist, d) -> float:
    """``V(D, G) = E_p[log D] + E_q[log(1 - D)]`` with ``0 log 0 = 0``."""
    a, b = _aligned(p, q)
    d = np.asarray(d, dtype=np.float64)
    return float(np.sum(xlogy(a, d)) + np.sum(xlogy(b, 1.0 - d)))


def js_divergence(p: DiscreteDist, q: DiscreteDist) -> float:
    """Jensen-Shannon divergence in nats."""
    a, b = _aligned(p, q)
    m = 0.5 * (a + b)
    kl_a = np.sum(xlogy(a, a) - xlogy(a, m))
    kl_b = np.sum(xlogy(b, b) - xlogy(b, m))
    return float(max(0.5 * (kl_a + kl_b), 0.0))


# ---------------------------------------------------------------------------
# penalties and bias statistics
# ---------------------------------------------------------------------------

def interpolates(x_real: np.ndarray, x_fake: np.ndarray, rng: np.random.Generator) -> tuple:
    """Per-sample ``eps * x + (1 - eps) * x_fake`` with ``eps ~ U(0, 1)``; returns (x_hat, eps)."""
    x_real = np.asarray(x_real, dtype=np.float64)
    x_fake = np.asarray(x_fake, dtype=np.float64)
    if x_real.shape != x_fake.shape:
        raise ContractError(f"real and fake batches differ in shape: {x_real.shape} vs {x_fake.shape}")
    eps = rng.random(len(x_real)).reshape((-1,) + (1,) * (x_real.ndim - 1))
    return eps * x_real + (1.0 - eps) * x_fake, eps


def gradient_penalty(critic: Callable, x_real, x_fake, y, lambda_gp: float = 10.0, seed=0,
                     return_norms: bool = False):
    """``lambda_gp * mean((||grad_xhat D(xhat, y)|| - 1)**2)`` over random interpolates.

    ``critic(x: Tensor, y) -> Tensor`` of per-sample scores. The result is a
    Tensor that stays differentiable with respect to the critic parameters.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x_hat, _ = interpolates(x_real, x_fake, rng)
    xt = Tensor(x_hat, requires_grad=True)
    scores = critic(xt, y)
    norms = T.grad_norm_node(xt, scores.sum(), per_sample=True)
    gp = ((norms - 1.0) ** 2).mean() * lambda_gp
    return (gp, norms.data) if return_norms else gp


class BiasStatistic:
    """Batch statistic ``B`` for the bias penalty; default is the mean feature vector."""

    def __call__(self, x: Tensor, groups=None) -> Tensor:
        return T.reshape(x, (x.shape[0], -1)).mean(axis=0)

    def target(self, x_real: Tensor, groups=None) -> Tensor:
        return self(x_real, groups)


class GroupParity(BiasStatistic):
    """Per-group mean features of fakes against the pooled real mean for every group.

    Zero penalty means every protected group is generated with the same mean
    as the data overall.
    """

    def __init__(self, n_groups: int):
        self.n_groups = n_groups

    def __call__(self, x: Tensor, groups=None) -> Tensor:
        if groups is None:
            raise ContractError("group parity needs group labels")
        groups = np.asarray(groups)
        flat = T.reshape(x, (x.shape[0], -1))
        parts = []
        for g in range(self.n_groups):
            m = groups == g
            if m.any():
                parts.append(T.reshape(flat[np.flatnonzero(m)].mean(axis=0), (1, -1)))
            else:
                parts.append(T.reshape(flat.mean(axis=0), (1, -1)) * 0.0 + Tensor(np.nan))
        return T.reshape(T.concat(parts, axis=0), (-1,))

    def target(self, x_real: Tensor, groups=None) -> Tensor:
        pooled = T.reshape(x_real, (x_real.shape[0], -1)).mean(axis=0)
        return T.reshape(T.concat([T.reshape(pooled, (1, -1))] * self.n_groups, axis=0), (-1,))


def bias_regularizer(x_fake, x_real, bias_fn: Optional[BiasStatistic] = None,
                     groups_fake=None, groups_real=None) -> Tensor:
    """``||E[B(x_fake)] - E[B(x_real)]||**2``; groups without fake samples are skipped."""
    bias_fn = bias_fn or BiasStatistic()
    xf, xr = T.as_tensor(x_fake), T.as_tensor(x_real)
    a = bias_fn(xf, groups_fake)
    b = bias_fn.target(xr, groups_real)
    if a.shape != b.shape:
        raise ContractError(f"bias statistic dimensions differ: {a.shape} vs {b.shape}")
    keep = np.flatnonzero(np.isfinite(a.data))
    d = a[keep] - b.detach()[keep]
    return (d * d).sum()


def delta_bias(samples_by_group: Dict, statistic: Optional[Callable] = None) -> float:
    """Largest pairwise gap of a scalar per-group statistic (default: mean feature value)."""
    if len(samples_by_group) < 2:
        raise ContractError("delta_bias needs at least two groups")
    stat = statistic or (lambda s: float(np.mean(s)))
    vals = []
    for g, s in samples_by_group.items():
        s = np.asarray(s, dtype=np.float64)
        if s.size == 0:
            raise ContractError(f"group {g} has no samples")
        vals.append(stat(s))
    return float(max(vals) - min(vals))


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

@dataclass
class GanConfig:
    lambda_gp: float = 10.0
    lambda_bias: float = 0.0
    n_critic: int = 5
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    optimizer: str = "adam"
    dz: int = 8
    hidden: int = 64
    attn_channels: int = 4
    batch_size: int = 64
    epochs: int = 20
    steps_per_epoch: Optional[int] = None
    eval_samples: int = 1000
    bias: str = "group_parity"
    divergence_limit: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.lambda_gp < 0 or self.lambda_bias < 0:
            raise ContractError("lambda_gp and lambda_bias must be nonnegative")
        if self.n_critic < 1:
            raise ContractError(f"n_critic must be at least 1, got {self.n_critic}")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be at least 1, got {self.epochs}")
        if self.hidden % self.attn_channels:
            raise ContractError("hidden width must be a multiple of attn_channels")

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _onehot(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((len(y), n))
    out[np.arange(len(y)), y] = 1.0
    return out


class GanPair:
    """Conditional generator and critic sharing a label space of ``n_classes``."""

    def __init__(self, data_shape: Sequence[int], n_classes: int, cfg: GanConfig, image: bool = False,
                 models: Optional[Dict[str, nn.Model]] = None):
        self.data_shape = tuple(int(d) for d in data_shape)
        self.n_classes = n_classes
        self.cfg = cfg
        self.image = image
        d_out = int(np.prod(self.data_shape))
        h, c = cfg.hidden, cfg.attn_channels
        if models is None:
            rng = np.random.default_rng(cfg.seed)
            g_layers = [
                {"type": "linear", "in": cfg.dz + n_classes, "out": h}, {"type": "leaky_relu", "slope": 0.2},
                {"type": "reshape", "shape": [c, 1, h // c]}, {"type": "attention", "channels": c},
                {"type": "flatten"},
                {"type": "linear", "in": h, "out": h}, {"type": "leaky_relu", "slope": 0.2},
                {"type": "linear", "in": h, "out": d_out},
            ]
            if image:
                g_layers.append({"type": "tanh"})
            body = [
                {"type": "flatten"},
                {"type": "linear", "in": d_out, "out": h}, {"type": "leaky_relu", "slope": 0.2},
                {"type": "linear", "in": h, "out": h}, {"type": "leaky_relu", "slope": 0.2},
            ]
            head = [{"type": "linear", "in": h + n_classes, "out": 1}]
            models = {
                "generator": nn.Model(g_layers, (cfg.dz + n_classes,), "linear", seed=int(rng.integers(2**31))),
                "critic_body": nn.Model(body, self.data_shape, "linear", seed=int(rng.integers(2**31))),
                "critic_head": nn.Model(head, (h + n_classes,), "linear", seed=int(rng.integers(2**31))),
            }
        self.G = models["generator"]
        self.D_body = models["critic_body"]
        self.D_head = models["critic_head"]

    @property
    def models(self) -> Dict[str, nn.Model]:
        return {"generator": self.G, "critic_body": self.D_body, "critic_head": self.D_head}

    def generator_params(self) -> Dict[str, Tensor]:
        return {f"G.{k}": v for k, v in self.G.params.items()}

    def critic_params(self) -> Dict[str, Tensor]:
        out = {f"Db.{k}": v for k, v in self.D_body.params.items()}
        out.update({f"Dh.{k}": v for k, v in self.D_head.params.items()})
        return out

    def generate(self, z, y) -> Tensor:
        inp = np.concatenate([np.asarray(z, dtype=np.float64), _onehot(y, self.n_classes)], axis=1)
        out = nn.logits(self.G, inp, "eval")
        if self.image:
            out = (out + 1.0) * 0.5
        return T.reshape(out, (len(inp),) + self.data_shape)

    def critic(self, x, y) -> Tensor:
        feats = nn.logits(self.D_body, x, "eval")
        joint = T.concat([feats, Tensor(_onehot(y, self.n_classes))], axis=1)
        return T.reshape(nn.logits(self.D_head, joint, "eval"), (-1,))

    def attention_weights(self, z, y) -> np.ndarray:
        """Softmax attention over the generator's hidden positions (rows sum to 1)."""
        inp = np.concatenate([np.asarray(z, dtype=np.float64), _onehot(y, self.n_classes)], axis=1)
        idx = next(i for i, s in enumerate(self.G.layers) if s["type"] == "attention")
        with T.no_grad():
            h = nn.run_layers(self.G, Tensor(inp), 0, idx, "eval", None)
            n, c, hh, ww = h.shape
            w = self.G.params[f"{idx}.w"]
            scores = T.matmul(T.reshape(w, (1, 1, c)), T.reshape(h, (n, c, hh * ww)))
            return T.softmax(T.reshape(scores, (n, hh * ww)), axis=1).data

    def sample(self, n: int, y, rng: np.random.Generator) -> np.ndarray:
        y = np.broadcast_to(np.asarray(y), (n,))
        with T.no_grad():
            return self.generate(rng.standard_normal((n, self.cfg.dz)), y).data


def _make_bias(cfg: GanConfig, n_groups: int) -> BiasStatistic:
    if cfg.bias == "group_parity":
        return GroupParity(n_groups)
    if cfg.bias == "mean":
        return BiasStatistic()
    raise ContractError(f"unknown bias statistic {cfg.bias!r}")


class _Optimizer:
    def __init__(self, cfg: GanConfig, lr: float):
        self.sgd = cfg.optimizer == "sgd"
        self.lr = lr
        self.state = nn.AdamState(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2)

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> None:
        if self.sgd:
            for k, p in params.items():
                g = grads.get(k)
                if g is not None:
                    p.data -= self.lr * g
        else:
            nn.adam_step(self.state, params, grads)


@dataclass
class GanResult:
    gan: GanPair
    history: List[dict]
    grad_norms: List[float] = field(default_factory=list)

    @property
    def final_grad_norm(self) -> float:
        return self.history[-1]["grad_norm"]


def group_delta_bias(gan: GanPair, n_groups: int, n: int, rng: np.random.Generator) -> float:
    return delta_bias({g: gan.sample(n, g, rng) for g in range(n_groups)})


def train_gan(data: LabeledDataset, cfg: Optional[GanConfig] = None, log=None) -> GanResult:
    """Conditional WGAN-GP with an optional bias penalty on the generator.

    Labels condition both networks; the bias penalty groups samples by
    ``data.group`` (falling back to labels). An epoch is ``steps_per_epoch``
    generator updates, by default one pass worth of batches.
    """
    cfg = cfg or GanConfig()
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    x_all = np.asarray(data.x, dtype=np.float64)
    y_all = np.asarray(data.labels, dtype=np.int64)
    g_all = y_all if data.group is None else np.asarray(data.group, dtype=np.int64)
    n_classes = data.n_classes or int(y_all.max()) + 1
    n_groups = data.n_groups or int(g_all.max()) + 1
    gan = GanPair(x_all.shape[1:], n_classes, cfg, image=data.is_image)
    bias = _make_bias(cfg, n_groups)
    rng = np.random.default_rng(cfg.seed + 1)
    eval_rng_seed = cfg.seed + 2
    opt_d = _Optimizer(cfg, cfg.lr_d)
    opt_g = _Optimizer(cfg, cfg.lr_g)
    d_params, g_params = gan.critic_params(), gan.generator_params()
    history: List[dict] = []
    norms_log: List[float] = []
    acc = {"d_loss": 0.0, "g_loss": 0.0, "gp": 0.0, "r_bias": 0.0, "grad_norm": 0.0}
    count_d = count_g = 0
    B = cfg.batch_size

    steps = cfg.steps_per_epoch or max(1, len(x_all) // B)

    for epoch in range(1, cfg.epochs + 1):
        for _ in range(steps):
            for _ in range(cfg.n_critic):
                idx = rng.integers(0, len(x_all), B)
                xr, yr = x_all[idx], y_all[idx]
                with T.no_grad():
                    xf = gan.generate(rng.standard_normal((B, cfg.dz)), yr).data
                gp, norms = gradient_penalty(gan.critic, xr, xf, yr, cfg.lambda_gp, rng, return_norms=True)
                d_loss = gan.critic(Tensor(xf), yr).mean() - gan.critic(Tensor(xr), yr).mean() + gp
                if not math.isfinite(d_loss.item()) or abs(d_loss.item()) > cfg.divergence_limit:
                    raise DivergenceError(
                        f"critic loss {d_loss.item():.4g} exceeded {cfg.divergence_limit:g} in epoch {epoch}; "
                        f"last GP {gp.item():.4g}, mean grad norm {float(norms.mean()):.4g}"
                    )
                grads = T.grad(d_loss, list(d_params.values()))
                opt_d.step(d_params, {k: g.data for k, g in zip(d_params, grads)})
                acc["d_loss"] += d_loss.item()
                acc["gp"] += gp.item()
                acc["grad_norm"] += float(norms.mean())
                count_d += 1
                norms_log.append(float(norms.mean()))

            idx = rng.integers(0, len(x_all), B)
            yb, gb = y_all[idx], g_all[idx]
            fake = gan.generate(rng.standard_normal((B, cfg.dz)), yb)
            g_loss = -gan.critic(fake, yb).mean()
            r_bias = bias_regularizer(fake, x_all[idx], bias, gb, gb)
            total = g_loss + r_bias * cfg.lambda_bias if cfg.lambda_bias else g_loss
            grads = T.grad(total, list(g_params.values()))
            opt_g.step(g_params, {k: g.data for k, g in zip(g_params, grads)})
            acc["g_loss"] += g_loss.item()
            acc["r_bias"] += r_bias.item()
            count_g += 1

        row = {
            "epoch": epoch,
            "d_loss": acc["d_loss"] / count_d,
            "g_loss": acc["g_loss"] / count_g,
            "gp": acc["gp"] / count_d,
            "r_bias": acc["r_bias"] / count_g,
            "delta_bias": group_delta_bias(gan, n_groups, cfg.eval_samples,
                                           np.random.default_rng(eval_rng_seed)),
            "grad_norm": acc["grad_norm"] / count_d,
        }
        history.append(row)
        if log is not None:
            log(row)
        acc = dict.fromkeys(acc, 0.0)
        count_d = count_g = 0
    return GanResult(gan, history, norms_log)


HISTORY_COLUMNS = ("epoch", "d_loss", "g_loss", "gp", "r_bias", "delta_bias", "grad_norm")


def write_history_csv(path, history: List[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return path


def save_gan(path, gan: GanPair, history: Optional[list] = None) -> Path:
    cfg = asdict(gan.cfg)
    cfg.update(data_shape=list(gan.data_shape), n_classes=gan.n_classes, image=gan.image)
    return nn.save_models(path, gan.models, cfg, history)


def load_gan(path) -> GanPair:
    models = nn.load_models(path)
    side = nn.load_sidecar(path)["config"]
    cfg = GanConfig.from_dict(side)
    return GanPair(side["data_shape"], side["n_classes"], cfg, side["image"], models)


# ---------------------------------------------------------------------------
# explanations of generated samples
# ---------------------------------------------------------------------------

def explain_generated(gan: GanPair, n_expl: int, seed: int = 0, **lime_kwargs) -> List[SurrogateExplanation]:
    """Local surrogates of the critic score ``D(., y)`` around ``n_expl`` generated samples."""
    if n_expl <= 0:
        return []
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, gan.n_classes, n_expl)
    out = []
    for k, y in enumerate(labels):
        x0 = gan.sample(1, y, rng)[0]

        def blackbox(X, y=y):
            X = np.asarray(X, dtype=np.float64)
            with T.no_grad():
                return gan.critic(Tensor(X), np.full(len(X), y)).data

        kw = {"n_perturb": max(500, x0.size + 2), "seed": seed + k}
        kw.update(lime_kwargs)
        out.append(lime_explain(blackbox, x0, **kw))
    return out
