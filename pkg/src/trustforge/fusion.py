"""Two-modality classifier with attention fusion and attribution-driven bias correction.

Images pass through a small CNN encoder, captions (integer token
sequences) through an embedding bag plus affine map. Both emit ``d``
features that are fused per head by a softmax over the two modality slots.
The forbidden-region penalty is computed from saliency maps, which stay
differentiable in the parameters so it can be minimized directly.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import fairmetrics as fm
from . import nn
from . import tensor as T
from .data import LabeledDataset, load_idx, save_idx
from .errors import ContractError, FormatError
from .tensor import Tensor
from .xai import AttributionMap, grad_cam_from

N_DIGIT_TOKENS = 10


# ---------------------------------------------------------------------------
# paired data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedSample:
    image: np.ndarray
    tokens: np.ndarray
    label: int
    forbidden_mask: Optional[np.ndarray] = None


@dataclass(frozen=True)
class PairedDataset:
    """Images ``(N, 1, H, W)``, token ids ``(N, L)``, labels and forbidden masks ``(N, H, W)``.

    ``foreground`` holds the digit region before any artifact was planted.
    """

    images: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    vocab_size: int
    n_classes: int = 10
    foreground: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.images)
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got {self.images.shape}")
        for name in ("tokens", "labels", "masks"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"{name} has {len(getattr(self, name))} rows for {n} images")
        if self.masks.shape[1:] != self.images.shape[2:]:
            raise ContractError(f"mask shape {self.masks.shape[1:]} does not match image {self.images.shape[2:]}")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise ContractError(f"token ids must lie in [0, {self.vocab_size})")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels must lie in [0, {self.n_classes})")
        if self.foreground is None:
            object.__setattr__(self, "foreground", self.images[:, 0] > 0.5)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> PairedSample:
        m = self.masks[i]
        return PairedSample(self.images[i], self.tokens[i], int(self.labels[i]), m if m.any() else None)

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx)
        return PairedDataset(self.images[idx], self.tokens[idx], self.labels[idx], self.masks[idx],
                             self.vocab_size, self.n_classes, self.foreground[idx])

    @property
    def has_mask(self) -> np.ndarray:
        return self.masks.reshape(len(self), -1).any(axis=1)


def make_captions(labels, seed: int = 0, length: int = 6, p_label: float = 0.7,
                  vocab_size: int = 30) -> np.ndarray:
    """One digit-word slot (true digit with probability ``p_label``, else a random digit) plus noise tokens."""
    if vocab_size <= N_DIGIT_TOKENS:
        raise ContractError(f"vocab_size must exceed {N_DIGIT_TOKENS} to hold noise tokens")
    if length < 1 or not 0.0 <= p_label <= 1.0:
        raise ContractError("caption length must be positive and p_label in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    n = len(labels)
    keep = rng.random(n) < p_label
    digit = np.where(keep, labels, rng.integers(0, N_DIGIT_TOKENS, n))
    toks = rng.integers(N_DIGIT_TOKENS, vocab_size, (n, length))
    slot = rng.integers(0, length, n)
    toks[np.arange(n), slot] = digit
    return toks


def plant_patch(images: np.ndarray, which: np.ndarray, size: int = 4, corner: str = "tl",
                value: float = 1.0):
    """Copy of ``images`` with a bright square in a corner for rows in ``which``; returns (images, masks)."""
    images = np.array(images, dtype=np.float64)
    n, _, h, w = images.shape
    masks = np.zeros((n, h, w), dtype=bool)
    r0 = 0 if corner[0] == "t" else h - size
    c0 = 0 if corner[1] == "l" else w - size
    sel = np.flatnonzero(which)
    images[sel, :, r0:r0 + size, c0:c0 + size] = value
    masks[sel, r0:r0 + size, c0:c0 + size] = True
    return images, masks


def make_paired(base: LabeledDataset, seed: int = 0, caption_len: int = 6, p_label: float = 0.7,
                vocab_size: int = 30, image_noise: float = 0.0, planted_class: Optional[int] = None,
                plant_prob: float = 1.0, patch: int = 4, corner: str = "tl") -> PairedDataset:
    """Pair images with synthetic captions, optional pixel noise and a class-correlated artifact."""
    x = np.asarray(base.x, dtype=np.float64)
    if x.ndim != 4:
        raise ContractError("paired data needs image inputs")
    rng = np.random.default_rng(seed)
    labels = np.asarray(base.labels, dtype=np.int64)
    fg = x[:, 0] > 0.5
    if image_noise > 0:
        x = np.clip(x + image_noise * rng.standard_normal(x.shape), 0.0, 1.0)
    toks = make_captions(labels, int(rng.integers(2**31)), caption_len, p_label, vocab_size)
    if planted_class is None:
        masks = np.zeros((len(x),) + x.shape[2:], dtype=bool)
    else:
        which = (labels == planted_class) & (rng.random(len(x)) < plant_prob)
        x, masks = plant_patch(x, which, patch, corner)
    return PairedDataset(x, toks, labels, masks, vocab_size, base.n_classes or 10, fg)


def mask_to_rle(mask) -> List[List[int]]:
    flat = np.asarray(mask, dtype=bool).ravel()
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [[int(s), int(e - s)] for s, e in zip(edges[::2], edges[1::2])]


def rle_to_mask(runs, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for start, length in runs:
        if start < 0 or length < 0 or start + length > flat.size:
            raise FormatError(f"run [{start}, {length}] falls outside a mask of {flat.size} pixels")
        flat[start:start + length] = True
    return flat.reshape(shape)


def save_paired(directory, ds: PairedDataset) -> Path:
    """``images.idx`` plus ``captions.jsonl`` rows ``{index, tokens, label, mask_rle}``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_idx(d / "images.idx", ds.images[:, 0], "images")
    save_idx(d / "foreground.idx", ds.foreground.astype(np.float64), "images")
    with open(d / "captions.jsonl", "w", encoding="utf-8") as f:
        for i in range(len(ds)):
            row = {"index": i, "tokens": ds.tokens[i].tolist(), "label": int(ds.labels[i]),
                   "mask_rle": mask_to_rle(ds.masks[i])}
            f.write(json.dumps(row) + "\n")
    meta = {"vocab_size": ds.vocab_size, "n_classes": ds.n_classes}
    (d / "paired.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return d


def load_paired(directory) -> PairedDataset:
    d = Path(directory)
    images, _ = load_idx(d / "images.idx")
    images = images.astype(np.float64)[:, None]
    fg_path = d / "foreground.idx"
    fg = load_idx(fg_path)[0] > 0.5 if fg_path.exists() else None
    meta = json.loads((d / "paired.json").read_text())
    rows = [json.loads(line) for line in (d / "captions.jsonl").read_text(encoding="utf-8").splitlines() if line]
    if [r["index"] for r in rows] != list(range(len(images))):
        raise FormatError(f"captions do not index images 0..{len(images) - 1} in order")
    tokens = np.array([r["tokens"] for r in rows], dtype=np.int64)
    labels = np.array([r["label"] for r in rows], dtype=np.int64)
    masks = np.stack([rle_to_mask(r["mask_rle"], images.shape[2:]) for r in rows])
    return PairedDataset(images, tokens, labels, masks, meta["vocab_size"], meta["n_classes"], fg)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def attention_fusion(v, t, w_f, h: int, return_weights: bool = False):
    """Per-head softmax over the slots ``{v, t}`` scored by ``(w_f . k) / sqrt(d / h)``.

    ``v`` and ``t`` are ``(N, d)``; ``w_f`` is ``(h, d / h)``.
    """
    v, t, w_f = T.as_tensor(v), T.as_tensor(t), T.as_tensor(w_f)
    if v.shape != t.shape or v.ndim != 2:
        raise ContractError(f"modality features must share an (N, d) shape, got {v.shape} and {t.shape}")
    n, d = v.shape
    if h < 1 or d % h:
        raise ContractError(f"feature width {d} is not divisible by {h} heads")
    dh = d // h
    if w_f.shape != (h, dh):
        raise ContractError(f"fusion query must be ({h}, {dh}), got {w_f.shape}")
    vh = T.reshape(v, (n, h, dh))
    th = T.reshape(t, (n, h, dh))
    scale = 1.0 / math.sqrt(dh)
    sv = T.reshape((vh * w_f).sum(axis=2) * scale, (n, h, 1))
    st = T.reshape((th * w_f).sum(axis=2) * scale, (n, h, 1))
    alpha = T.softmax(T.concat([sv, st], axis=2), axis=2)
    av = T.reshape(alpha[:, :, 0], (n, h, 1))
    at = T.reshape(alpha[:, :, 1], (n, h, 1))
    z = T.reshape(av * vh + at * th, (n, d))
    return (z, alpha) if return_weights else z


MODES = ("fused", "image", "text")


class FusionModel:
    """Visual CNN encoder, embedding-bag text encoder, attention fusion and a linear classifier."""

    def __init__(self, image_shape=(1, 28, 28), vocab_size: int = 30, n_classes: int = 10, d: int = 16,
                 heads: int = 2, mode: str = "fused", seed: int = 0):
        if mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
        if d % heads:
            raise ContractError(f"feature width {d} is not divisible by {heads} heads")
        c, hgt, wid = image_shape
        h1, w1 = (hgt - 4) // 2, (wid - 4) // 2
        h2, w2 = (h1 - 2) // 2, (w1 - 2) // 2
        if h2 < 1 or w2 < 1:
            raise ContractError(f"image {image_shape} is too small for the visual encoder")
        rng = np.random.default_rng(seed)
        self.visual = nn.Model([
            {"type": "conv", "in": c, "out": 4, "k": 5}, {"type": "relu"}, {"type": "maxpool"},
            {"type": "conv", "in": 4, "out": 8, "k": 3}, {"type": "relu"}, {"type": "maxpool"},
            {"type": "flatten"}, {"type": "linear", "in": 8 * h2 * w2, "out": d},
        ], tuple(image_shape), "linear", seed=int(rng.integers(2**31)))
        self.cam_layer = 4
        self.image_shape = tuple(image_shape)
        self.vocab_size, self.n_classes, self.d, self.heads, self.mode = vocab_size, n_classes, d, heads, mode
        self.text = {
            "E": Tensor(rng.standard_normal((vocab_size, d)) * 0.5, requires_grad=True),
            "Wt": Tensor(rng.standard_normal((d, d)) * math.sqrt(1.0 / d), requires_grad=True),
            "bt": Tensor(np.zeros(d), requires_grad=True),
        }
        self.fusion = {"wf": Tensor(rng.standard_normal((heads, d // heads)) * 0.1, requires_grad=True)}
        self.classifier = {
            "Wc": Tensor(rng.standard_normal((d, n_classes)) * math.sqrt(2.0 / d), requires_grad=True),
            "bc": Tensor(np.zeros(n_classes), requires_grad=True),
        }

    def parameters(self) -> Dict[str, Tensor]:
        out = {f"v.{k}": p for k, p in self.visual.params.items()}
        for prefix, group in (("t", self.text), ("f", self.fusion), ("c", self.classifier)):
            out.update({f"{prefix}.{k}": p for k, p in group.items()})
        return out

    def state(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            p.data = np.array(state[k], dtype=np.float64)

    def encode_text(self, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        bag = np.zeros((len(tokens), self.vocab_size))
        np.add.at(bag, (np.repeat(np.arange(len(tokens)), tokens.shape[1]), tokens.ravel()), 1.0)
        bag /= tokens.shape[1]
        return T.tanh(T.matmul(T.matmul(Tensor(bag), self.text["E"]), self.text["Wt"]) + self.text["bt"])

    def forward(self, images, tokens, capture: bool = False):
        """Class logits; with ``capture`` also the Grad-CAM feature maps of the visual encoder."""
        x = T.as_tensor(images)
        feats = None
        if self.mode != "text":
            feats = nn.run_layers(self.visual, x, 0, self.cam_layer + 1, "eval", None)
            v = nn.run_layers(self.visual, feats, self.cam_layer + 1, len(self.visual.layers), "eval", None)
        if self.mode != "image":
            t = self.encode_text(tokens)
        if self.mode == "fused":
            z = attention_fusion(v, t, self.fusion["wf"], self.heads)
        else:
            z = v if self.mode == "image" else t
        logits = T.matmul(z, self.classifier["Wc"]) + self.classifier["bc"]
        return (logits, feats) if capture else logits

    __call__ = forward

    def fusion_weights(self, images, tokens) -> np.ndarray:
        with T.no_grad():
            v = nn.logits(self.visual, images, "eval")
            _, alpha = attention_fusion(v, self.encode_text(tokens), self.fusion["wf"], self.heads, True)
        return alpha.data

    def predict(self, ds: PairedDataset, batch: int = 500) -> np.ndarray:
        out = []
        with T.no_grad():
            for s in range(0, len(ds), batch):
                out.append(self(ds.images[s:s + batch], ds.tokens[s:s + batch]).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# attributions and bias penalty
# ---------------------------------------------------------------------------

def _saliency_tensor(model: FusionModel, x: Tensor, tokens, targets, create_graph: bool) -> Tensor:
    z = model(x, tokens)
    targets = np.asarray(targets, dtype=np.int64)
    (g,) = T.grad(z[np.arange(len(targets)), targets].sum(), [x], create_graph=create_graph)
    return T.tabs(g).sum(axis=1)


def saliency_maps(model: FusionModel, images, tokens, targets, create_graph: bool = False) -> Tensor:
    """``|d logit_target / d image|`` per sample, summed over channels, shape ``(N, H, W)``."""
    x = Tensor(np.asarray(images, dtype=np.float64), requires_grad=True)
    return _saliency_tensor(model, x, tokens, targets, create_graph)


def grad_cam_maps(model: FusionModel, images, tokens, targets) -> np.ndarray:
    if model.mode == "text":
        raise ContractError("Grad-CAM needs the visual branch")
    logits, feats = model(np.asarray(images, dtype=np.float64), tokens, capture=True)
    targets = np.asarray(targets, dtype=np.int64)
    (g,) = T.grad(logits[np.arange(len(targets)), targets].sum(), [feats])
    out_shape = np.shape(images)[-2:]
    return np.stack([grad_cam_from(feats.data[i], g.data[i], out_shape) for i in range(len(targets))])


def bias_penalty(attribution, forbidden_mask) -> float:
    """Mean max-normalized attribution inside the mask: ``sum(a * m) / max(1, sum(m))``."""
    values = attribution.values if isinstance(attribution, AttributionMap) else attribution
    a = np.asarray(values, dtype=np.float64)
    m = np.asarray(forbidden_mask, dtype=bool)
    if a.shape != m.shape:
        raise ContractError(f"attribution {a.shape} and mask {m.shape} differ in shape")
    if np.any(a < 0):
        raise ContractError("attributions must be nonnegative")
    top = a.max() if a.size else 0.0
    if top > 0:
        a = a / top
    return float(np.sum(a * m) / max(1, int(m.sum())))


def _penalty_tensor(attr: Tensor, masks: np.ndarray) -> Tensor:
    """Differentiable batch mean of :func:`bias_penalty` over samples with a nonempty mask.

    The per-sample normalizing maximum is held constant.
    """
    n = attr.shape[0]
    flat = T.reshape(attr, (n, -1))
    m = masks.reshape(n, -1).astype(np.float64)
    top = flat.data.max(axis=1)
    ok = top > np.finfo(np.float64).tiny
    scale = np.where(ok, 1.0 / np.where(ok, top, 1.0), 0.0) / np.maximum(1.0, m.sum(axis=1))
    rows = (flat * Tensor(m)).sum(axis=1) * Tensor(scale)
    active = m.any(axis=1)
    return (rows * Tensor(active / active.sum())).sum()


def batch_bias_penalty(model: FusionModel, images, tokens, targets, masks) -> float:
    attr = saliency_maps(model, images, tokens, targets).data
    vals = [bias_penalty(attr[i], masks[i]) for i in range(len(attr)) if np.any(masks[i])]
    return float(np.mean(vals)) if vals else 0.0


def reveal_to_revise_step(model: FusionModel, batch: PairedDataset, lam: float, lr: float) -> FusionModel:
    """One plain gradient step on ``lam * mean bias_penalty`` through the saliency path."""
    if lam == 0.0:
        return model
    if not batch.has_mask.any():
        warnings.warn("no forbidden mask in batch; revision skipped", RuntimeWarning, stacklevel=2)
        return model
    sel = np.flatnonzero(batch.has_mask)
    attr = saliency_maps(model, batch.images[sel], batch.tokens[sel], batch.labels[sel], create_graph=True)
    pen = _penalty_tensor(attr, batch.masks[sel]) * lam
    params = model.parameters()
    grads = T.grad(pen, list(params.values()))
    for p, g in zip(params.values(), grads):
        p.data = p.data - lr * g.data
    return model


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FusionConfig:
    mode: str = "fused"
    d: int = 16
    heads: int = 2
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    lam_bias: float = 0.0
    bias_feedback: bool = False
    revise_steps: int = 10
    revise_lr: float = 0.01
    probe_size: int = 64
    attribution: str = "saliency"
    iou_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.attribution not in ("saliency", "gradcam"):
            raise ContractError(f"attribution must be 'saliency' or 'gradcam', got {self.attribution!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ContractError("epochs, batch_size and lr must be positive")
        if self.lam_bias < 0 or self.revise_lr < 0 or self.revise_steps < 0:
            raise ContractError("lam_bias, revise_lr and revise_steps must be nonnegative")
        if self.d % self.heads:
            raise ContractError(f"d={self.d} is not divisible by heads={self.heads}")

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FusionResult:
    model: FusionModel
    report: fm.MetricsReport
    history: List[dict] = field(default_factory=list)


def _attributions(model: FusionModel, probe: PairedDataset, kind: str) -> np.ndarray:
    if kind == "gradcam" and model.mode != "text":
        return grad_cam_maps(model, probe.images, probe.tokens, probe.labels)
    return saliency_maps(model, probe.images, probe.tokens, probe.labels).data


def class_prototypes(ds: PairedDataset) -> np.ndarray:
    protos = np.zeros((ds.n_classes,) + ds.images.shape[2:])
    for c in range(ds.n_classes):
        sel = ds.labels == c
        if sel.any():
            protos[c] = ds.images[sel, 0].mean(axis=0)
    return protos


def evaluate_fusion(model: FusionModel, test: PairedDataset, probe: Optional[PairedDataset] = None,
                    cfg: Optional[FusionConfig] = None, prototypes=None) -> Dict[str, float]:
    """Accuracy, macro F1 and NMI on ``test``; attribution metrics on ``probe``."""
    cfg = cfg or FusionConfig(mode=model.mode)
    preds = model.predict(test)
    out = {
        "accuracy": fm.accuracy(preds, test.labels),
        "f1": float(np.mean([fm.f1_score(preds, test.labels, c) for c in range(test.n_classes)])),
        "nmi": fm.nmi(preds, test.labels),
    }
    if probe is None or len(probe) == 0:
        return out
    if model.mode == "text":
        out["iou_xai"] = fm.iou_xai(None, probe.foreground[0])
        return out
    attr = _attributions(model, probe, cfg.attribution)
    out["iou_xai"] = float(np.mean([fm.iou_xai(attr[i], probe.foreground[i], cfg.iou_threshold)
                                    for i in range(len(probe))]))
    if prototypes is not None and min(attr.shape[1:]) >= fm.SSIM_WINDOW:
        sims = []
        for i in range(len(probe)):
            a = attr[i] / attr[i].max() if attr[i].max() > 0 else attr[i]
            sims.append(fm.ssim(a, prototypes[probe.labels[i]]))
        out["ssim"] = float(np.mean(sims))
    masked = probe.has_mask
    if masked.any():
        sal = attr if cfg.attribution == "saliency" else \
            saliency_maps(model, probe.images, probe.tokens, probe.labels).data
        out["bias_penalty"] = float(np.mean([bias_penalty(sal[i], probe.masks[i]) for i in np.flatnonzero(masked)]))
    return out


def train_fusion(train: PairedDataset, test: PairedDataset, cfg: Optional[FusionConfig] = None,
                 probe: Optional[PairedDataset] = None, log=None) -> FusionResult:
    """Minibatch Adam on ``CE + lam_bias * penalty``; with ``bias_feedback`` each epoch ends in revision steps.

    Revision steps use attributions computed after that epoch's updates, on
    masked training samples. Attribution metrics are computed on ``probe``
    (defaults to the masked part of ``test``).
    """
    cfg = cfg or FusionConfig()
    if len(train) == 0:
        raise ContractError("cannot train on an empty dataset")
    model = FusionModel(train.images.shape[1:], train.vocab_size, train.n_classes, cfg.d, cfg.heads,
                        cfg.mode, cfg.seed)
    params = model.parameters()
    opt = nn.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    lam = cfg.lam_bias if cfg.bias_feedback and cfg.mode != "text" else 0.0
    masked_idx = np.flatnonzero(train.has_mask)
    if probe is None:
        probe = test.subset(np.flatnonzero(test.has_mask)[:cfg.probe_size])
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            imgs, toks, ys = train.images[idx], train.tokens[idx], train.labels[idx]
            if lam > 0 and train.masks[idx].any():
                x = Tensor(imgs, requires_grad=True)
                loss = nn.ce_loss(model(x, toks), ys)
                attr = _saliency_tensor(model, x, toks, ys, create_graph=True)
                sel = np.flatnonzero(train.masks[idx].reshape(len(idx), -1).any(axis=1))
                loss = loss + _penalty_tensor(attr[sel], train.masks[idx][sel]) * lam
            else:
                loss = nn.ce_loss(model(imgs, toks), ys)
            grads = T.grad(loss, list(params.values()))
            nn.adam_step(opt, params, {k: g.data for k, g in zip(params, grads)})
            total += loss.item() * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "train_loss": total / seen}
        if lam > 0 and cfg.revise_steps and len(masked_idx):
            rev = train.subset(rng.choice(masked_idx, min(cfg.probe_size, len(masked_idx)), replace=False))
            row["penalty_before"] = batch_bias_penalty(model, rev.images, rev.tokens, rev.labels, rev.masks)
            for _ in range(cfg.revise_steps):
                reveal_to_revise_step(model, rev, lam, cfg.revise_lr)
            row["penalty_after"] = batch_bias_penalty(model, rev.images, rev.tokens, rev.labels, rev.masks)
        row["test_accuracy"] = fm.accuracy(model.predict(test), test.labels)
        history.append(row)
        if log is not None:
            log(row)
    metrics = evaluate_fusion(model, test, probe, cfg, class_prototypes(train))
    report = fm.MetricsReport({k: v for k, v in metrics.items() if k != "bias_penalty"},
                              {"model": f"fusion-{cfg.mode}", "seed": cfg.seed})
    if "bias_penalty" in metrics:
        report = report.update(bias_penalty=metrics["bias_penalty"])
    return FusionResult(model, report, history)


def config_dict(cfg: FusionConfig) -> dict:
    return asdict(cfg)
