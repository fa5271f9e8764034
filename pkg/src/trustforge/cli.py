"""Command-line driver: ``trustforge <command> [options]``.

Every command writes into ``--out`` a ``metrics.json`` / ``metrics.csv``
report, its artifacts, and ``manifest.json`` recording the effective
configuration and content hashes of everything written. Exit status is 0 on
success, 1 on runtime failure and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from . import adversarial as adv
from . import data as D
from . import fairmetrics as fm
from . import fusion as fu
from . import gan as G
from . import nn
from . import xai
from .errors import ContractError, TrustforgeError

COMMANDS = ("fetch-data", "train", "attack", "adv-train", "uncertainty", "explain", "gan", "fuse", "report")
IMAGE_DATASETS = ("mnist", "fashion")
_IMAGE_COMMANDS = ("train", "attack", "adv-train", "uncertainty", "explain", "fuse")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS: dict = {
    "dataset": "fashion",
    "model": "cnn",
    "seed": 0,
    "limit": None,
    "test_limit": None,
    "epochs": 5,
    "lr": 1e-3,
    "batch_size": 32,
    "dropout": 0.0,
    "heads": 2,
    "weight_decay": 5e-5,
    "optimizer": "adamw",
    "scheduler": "cosine",
    "patience": 3,
    "val_fraction": 0.1,
    "attack": {"method": "pgd", "eps": 0.1, "alpha": None, "steps": 10, "random_start": True},
    "uncertainty": {"passes": 50, "eps": [0.02, 0.18], "method": "bim", "n": 200},
    "explain": {"method": "gradcam", "index": 0, "target": None, "n_perturb": 1000, "sigma": 0.1,
                "mask_prob": 0.1, "sharp": False, "lam": 0.5, "patch_size": 4},
    "gan": {"lambda_gp": 10.0, "lambda_bias": 0.0, "n_critic": 5, "lr_g": 1e-3, "lr_d": 1e-3, "dz": 8,
            "hidden": 32, "epochs": 10, "steps_per_epoch": 50, "batch_size": 64, "optimizer": "adam",
            "bias": "group_parity", "n_samples": 2000, "n_expl": 0, "group_means": [0.0, 1.5],
            "group_probs": [0.7, 0.3], "dim": 2},
    "fusion": {"mode": "fused", "d": 16, "epochs": 8, "lr": 3e-3, "lam_bias": 1.0, "bias_feedback": False,
               "revise_steps": 10, "revise_lr": 0.01, "probe_size": 64, "attribution": "saliency",
               "train_size": 3000, "test_size": 1000, "image_noise": 0.3, "p_label": 0.7, "planted_class": 0},
}

_CHOICES = {
    "dataset": IMAGE_DATASETS + ("mixture",),
    "model": ("cnn", "dnn", "mlp"),
    "optimizer": ("adam", "adamw"),
    "scheduler": ("cosine", "constant"),
    "attack.method": ("fgsm", "bim", "pgd"),
    "uncertainty.method": ("fgsm", "bim", "pgd"),
    "explain.method": ("saliency", "gradcam", "lime", "perturbation", "hybrid"),
    "gan.optimizer": ("adam", "sgd"),
    "gan.bias": ("group_parity", "mean"),
    "fusion.mode": fu.MODES,
    "fusion.attribution": ("saliency", "gradcam"),
}

_RANGES = {
    "epochs": (1, None), "lr": (0, None), "batch_size": (1, None), "dropout": (0, 1), "heads": (1, None),
    "weight_decay": (0, None), "patience": (1, None), "val_fraction": (0, 1), "limit": (1, None),
    "test_limit": (1, None), "seed": (0, None),
    "attack.eps": (0, 1), "attack.steps": (1, None), "attack.alpha": (0, 1),
    "uncertainty.passes": (2, None), "uncertainty.n": (1, None),
    "explain.index": (0, None), "explain.n_perturb": (2, None), "explain.sigma": (0, None),
    "explain.mask_prob": (0, 1), "explain.lam": (0, 1), "explain.patch_size": (1, None),
    "gan.lambda_gp": (0, None), "gan.lambda_bias": (0, None), "gan.n_critic": (1, None),
    "gan.epochs": (1, None), "gan.n_samples": (2, None), "gan.n_expl": (0, None),
    "fusion.epochs": (1, None), "fusion.train_size": (1, None), "fusion.test_size": (1, None),
    "fusion.image_noise": (0, None), "fusion.p_label": (0, 1), "fusion.lam_bias": (0, None),
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{where}{k}"
        if k not in base:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {key!r} must be an object")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def validate(cfg: dict) -> dict:
    for key, allowed in _CHOICES.items():
        if _get(cfg, key) not in allowed:
            raise UsageError(f"{key} must be one of {list(allowed)}, got {_get(cfg, key)!r}")
    for key, (lo, hi) in _RANGES.items():
        v = _get(cfg, key)
        if v is None:
            continue
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise UsageError(f"{key} must be a finite number, got {v!r}")
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise UsageError(f"{key}={v} outside [{lo}, {'inf' if hi is None else hi}]")
    if cfg.get("command") in _IMAGE_COMMANDS and cfg["dataset"] not in IMAGE_DATASETS:
        raise UsageError(f"{cfg['command']} needs an image dataset, got {cfg['dataset']!r}")
    eps = cfg["uncertainty"]["eps"]
    if not isinstance(eps, list) or not all(isinstance(e, (int, float)) and 0 <= e <= 1 for e in eps):
        raise UsageError("uncertainty.eps must be a list of numbers in [0, 1]")
    return cfg


# (flag, dotted key, type)
_FLAGS = {
    "common": [("--dataset", "dataset", str), ("--seed", "seed", int), ("--limit", "limit", int),
               ("--test-limit", "test_limit", int)],
    "train": [("--model", "model", str), ("--epochs", "epochs", int), ("--lr", "lr", float),
              ("--batch-size", "batch_size", int), ("--dropout", "dropout", float),
              ("--weight-decay", "weight_decay", float), ("--optimizer", "optimizer", str),
              ("--scheduler", "scheduler", str), ("--patience", "patience", int)],
    "attack": [("--method", "attack.method", str), ("--eps", "attack.eps", float),
               ("--alpha", "attack.alpha", float), ("--steps", "attack.steps", int)],
    "uncertainty": [("--passes", "uncertainty.passes", int), ("--n", "uncertainty.n", int),
                    ("--attack-method", "uncertainty.method", str)],
    "explain": [("--method", "explain.method", str), ("--index", "explain.index", int),
                ("--target", "explain.target", int), ("--n-perturb", "explain.n_perturb", int),
                ("--lam", "explain.lam", float)],
    "gan": [("--epochs", "gan.epochs", int), ("--lambda-bias", "gan.lambda_bias", float),
            ("--lambda-gp", "gan.lambda_gp", float), ("--n-critic", "gan.n_critic", int),
            ("--steps-per-epoch", "gan.steps_per_epoch", int), ("--n-expl", "gan.n_expl", int),
            ("--gan-optimizer", "gan.optimizer", str)],
    "fuse": [("--mode", "fusion.mode", str), ("--epochs", "fusion.epochs", int), ("--heads", "heads", int),
             ("--train-size", "fusion.train_size", int), ("--test-size", "fusion.test_size", int)],
}

_COMMAND_FLAGS = {
    "fetch-data": ["common"],
    "train": ["common", "train"],
    "attack": ["common", "attack"],
    "adv-train": ["common", "train", "attack"],
    "uncertainty": ["common", "uncertainty"],
    "explain": ["common", "explain"],
    "gan": ["common", "gan"],
    "fuse": ["common", "fuse"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trustforge", description="Trustworthy deep learning experiments.")
    p.add_argument("--version", action="version", version=f"trustforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd)
        if cmd == "report":
            sp.add_argument("run_dirs", nargs="*", type=Path)
            sp.add_argument("--out", type=Path, required=True)
            continue
        sp.add_argument("--config", type=Path, help="JSON config; flags override its values")
        sp.add_argument("--out", type=Path, required=True)
        if cmd in ("attack", "uncertainty", "explain"):
            sp.add_argument("--model", dest="model_path", type=Path, required=True, help="TFMD checkpoint")
        if cmd == "uncertainty":
            sp.add_argument("--eps", dest="uncertainty.eps", type=float, nargs="+", default=argparse.SUPPRESS)
        if cmd == "fuse":
            sp.add_argument("--bias-feedback", dest="fusion.bias_feedback", action="store_true",
                            default=argparse.SUPPRESS)
        if cmd == "explain":
            sp.add_argument("--sharp", dest="explain.sharp", action="store_true", default=argparse.SUPPRESS)
        seen = set()
        for group in _COMMAND_FLAGS[cmd]:
            for flag, key, typ in _FLAGS[group]:
                if flag in seen:
                    continue
                seen.add(flag)
                sp.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS)
    return p


def effective_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None) is not None:
        try:
            override = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(override, dict):
            raise UsageError("config file must hold a JSON object")
        override.pop("command", None)
        cfg = _merge(cfg, override)
    for key, value in vars(args).items():
        if "." in key or key in DEFAULTS:
            node = cfg
            parts = key.split(".")
            for part in parts[:-1]:
                node = node[part]
            node[parts[-1]] = value
    cfg["command"] = args.command
    return validate(cfg)


# ---------------------------------------------------------------------------
# run directory plumbing
# ---------------------------------------------------------------------------

def git_blob_hash(blob: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


class RunDir:
    """Output directory held under an exclusive lock file while a command runs."""

    LOCK = ".lock"

    def __init__(self, path: Path):
        self.path = Path(path)
        self.files: List[str] = []

    def __enter__(self) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path / self.LOCK, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise TrustforgeError(f"output directory {self.path} is locked by another run") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            (self.path / self.LOCK).unlink()
        except FileNotFoundError:
            pass
        return False

    def p(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.path / name

    def write_text(self, name: str, text: str) -> Path:
        path = self.p(name)
        path.write_text(text, encoding="utf-8", newline="")
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, sort_keys=True, indent=2) + "\n")

    def write_report(self, report: fm.MetricsReport) -> None:
        self.write_text("metrics.json", report.to_json())
        self.write_text("metrics.csv", report.csv_row())

    def write_manifest(self, cfg: dict, report: fm.MetricsReport, extra: Optional[dict] = None) -> Path:
        hashes = {}
        for name in sorted(set(self.files)):
            path = self.path / name
            if path.exists():
                blob = path.read_bytes()
                hashes[name] = {"git_blob": git_blob_hash(blob), "sha256": hashlib.sha256(blob).hexdigest()}
        tree = hashlib.sha256("".join(f"{k}\0{v['sha256']}\n" for k, v in sorted(hashes.items())).encode())
        manifest = {
            "command": cfg["command"],
            "config": cfg,
            "seed": cfg.get("seed"),
            "version": __version__,
            "metrics": report.to_dict()["metrics"],
            "metadata": report.to_dict()["metadata"],
            "files": hashes,
            "content_hash": tree.hexdigest(),
        }
        if extra:
            manifest.update(extra)
        path = self.path / "manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return path


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _limit(ds: D.LabeledDataset, n: Optional[int]) -> D.LabeledDataset:
    return ds if n is None or n >= len(ds) else ds.head(n)


def _image_split(cfg: dict) -> D.SplitPair:
    if cfg["dataset"] not in IMAGE_DATASETS:
        raise UsageError(f"command {cfg['command']} needs an image dataset, got {cfg['dataset']!r}")
    pair = D.load_dataset(cfg["dataset"], seed=cfg["seed"])
    train = _limit(pair.train, cfg["limit"])
    test = _limit(pair.test, cfg["test_limit"] or cfg["limit"])
    return D.SplitPair(train, test, pair.train_idx[:len(train)], pair.test_idx[:len(test)])


def _build_model(cfg: dict) -> nn.Model:
    if cfg["model"] == "cnn":
        return nn.cnn(dropout=cfg["dropout"], seed=cfg["seed"])
    if cfg["model"] == "dnn":
        return nn.dnn(seed=cfg["seed"])
    return nn.mlp([784, 128, 10], dropout=cfg["dropout"], seed=cfg["seed"])


def _train_config(cfg: dict) -> nn.TrainConfig:
    return nn.TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                          weight_decay=cfg["weight_decay"], optimizer=cfg["optimizer"],
                          schedule=cfg["scheduler"], patience=cfg["patience"],
                          val_fraction=cfg["val_fraction"], seed=cfg["seed"])


def _attack_config(sub: dict, seed: int, method: Optional[str] = None, eps: Optional[float] = None):
    return adv.AttackConfig(method or sub["method"], eps=sub["eps"] if eps is None else eps,
                            alpha=sub.get("alpha"), steps=sub.get("steps", 10),
                            random_start=sub.get("random_start", True), seed=seed)


def _history_csv(history: List[dict]) -> str:
    if not history:
        return ""
    cols = list(history[0])
    for row in history[1:]:
        cols += [c for c in row if c not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in history:
        w.writerow([repr(row[c]) if isinstance(row.get(c), float) else row.get(c, "") for c in cols])
    return buf.getvalue()


def _macro_f1(preds, labels, n_classes: int) -> float:
    return float(np.mean([fm.f1_score(preds, labels, c) for c in range(n_classes)]))


def _classifier_metrics(model: nn.Model, ds: D.LabeledDataset) -> Dict[str, float]:
    preds = nn.predict(model, ds.x)
    labels = np.asarray(ds.labels)
    return {"accuracy": fm.accuracy(preds, labels), "f1": _macro_f1(preds, labels, ds.n_classes or 10),
            "nmi": fm.nmi(preds, labels)}


def _meta(cfg: dict, model: str) -> dict:
    return {"dataset": cfg["dataset"], "model": model, "seed": cfg["seed"]}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fetch_data(cfg: dict, run: RunDir, args) -> fm.MetricsReport:
    names = IMAGE_DATASETS if cfg["dataset"] == "mixture" else (cfg["dataset"],)
    found = {}
    for name in names:
        paths = D.fetch(name)
        found[name] = {k: str(v) for k, v in sorted(paths.items())}
        _log(f"{name}: {len(paths)} files cached")
    run.write_json("datasets.json", found)
    return fm.MetricsReport({}, {"dataset": ",".join(names), "model": "none", "seed": cfg["seed"]})


def _train_common(cfg: dict, run: RunDir, model: nn.Model, split: D.SplitPair,
                  attack_cfg: Optional[adv.AttackConfig] = None) -> dict:
    tcfg = _train_config(cfg)
    log = lambda row: _log(json.dumps(row, sort_keys=True))
    if attack_cfg is None:
        result = nn.train_classifier(model, split, tcfg, log=log)
    else:
        result = adv.adversarial_train(model, split, attack_cfg, tcfg, log=log)
    nn.save_model(run.p("model.tfmd"), model, {"model": cfg["model"], "train": cfg}, result.history)
    run.p("model.tfmd.json")
    run.write_text("history.csv", _history_csv(result.history))
    values = _classifier_metrics(model, split.test)
    values["train_err"] = 1.0 - nn.evaluate(model, split.train)
    values["test_err"] = 1.0 - values["accuracy"]
    return values


def cmd_train(cfg: dict, run: RunDir, args) -> fm.MetricsReport:
    split = _image_split(cfg)
    values = _train_common(cfg, run, _build_model(cfg), split)
    return fm.MetricsReport(values, _meta(cfg, cfg["model"]))


def cmd_adv_train(cfg: dict, run: RunDir, args) -> fm.MetricsReport:
    split = _image_split(cfg)
    acfg = _attack_config(cfg["attack"], cfg["seed"])
    model = _build_model(cfg)
    values = _train_common(cfg, run, model, split, attack_cfg=acfg)
    for method in sorted({"fgsm", "bim", acfg.method}):
        values[f"adv_acc_{method}"] = adv.robust_accuracy(model, split.test,
                                                          _attack_config(cfg["attack"], cfg["seed"], method))
    values["adv_err"] = 1.0 - values[f"adv_acc_{acfg.method}"]
    return fm.MetricsReport(values, _meta(cfg, f"{cfg['model']}-adv-{acfg.method}"))


def _load_checkpoint(args) -> nn.Model:
    try:
        return nn.load_model(args.model_path)
    except OSError as exc:
        raise TrustforgeError(f"cannot read checkpoint {args.model_path}: {exc}") from exc


def _checkpoint_model_id(args) -> str:
    try:
        side = nn.load_sidecar(args.model_path)
    except (OSError, json.JSONDecodeError):
        side = {}
    return (side.get("config") or {}).get("model") or Path(args.model_path).stem


def cmd_attack(cfg: dict, run: RunDir, args) -> fm.MetricsReport:
    model = _load_checkpoint(args)
    split = _image_split(cfg)
    acfg = _attack_config(cfg["attack"], cfg["seed"])
    x_adv = adv.attack_dataset(model, split.test, acfg)
    preds = nn.predict(model, x_adv)
    labels = np.asarray(split.test.labels)
    clean = nn.evaluate(model, split.test)
    values = {"accuracy": fm.accuracy(preds, labels), "f1": _macro_f1(preds, labels, split.test.n_classes or 10),
              "clean_accuracy": clean, "test_err": 1.0 - clean, "adv_err": 1.0 - fm.accuracy(preds, labels),
              "train_err": 1.0 - nn.evaluate(model, split.train), "eps": acfg.eps}
    return fm.MetricsReport(values, _meta(cfg, f"{_checkpoint_model_id(args)}/{acfg.method}"))


def cmd_uncertainty(cfg: dict, run: RunDir, args) -> fm.MetricsReport:
    model = _load_checkpoint(args)
    if not model.dropout_rates:
        raise TrustforgeError("the checkpoint has no dropout layer; MC-dropout variance would be zero")
    split = _image_split(cfg)
    sub = cfg["uncertainty"]
    probe = split.test.head(min(sub["n"], len(split.test)))
    rows, values = [], {}
    for eps in sub["eps"]:
        x = adv.attack(model, np.asarray(probe.x, dtype=np.float64), probe.labels,
                       _attack_config(cfg["attack"], cfg["seed"], sub["method"], eps)) if eps > 0 else probe.x
        rep = adv.mc_dropout_predict(model, x, passes=sub["passes"], seed=cfg["seed"])
        tv = rep.total_variance
        rows.append({"eps": float(eps), "mean_variance": float(tv.mean()), "median_variance": float(np.median(tv))})
        values[f"variance_eps_{eps:g}"] = float(tv.mean())
    run.write_text("variance.csv", _history_csv(rows))
    return fm.MetricsReport(values, _meta(cfg, "mc-dropout"))


def cmd_explain(cfg: dict, run: RunDir, args) -> fm.MetricsReport:
    model = _load_checkpoint(args)
    split = _image_split(cfg)
    sub = cfg["explain"]
    i = sub["index"]
    if i >= len(split.test):
        raise TrustforgeError(f"index {i} out of range for a test set of {len(split.test)} samples")
    x = np.asarray(split.test.x[i], dtype=np.float64)
    c = sub["target"] if sub["target"] is not None else int(nn.predict(model, x[None])[0])
    method = sub["method"]
    side = {"method": method, "index": i, "target": c, "label": int(split.test.labels[i])}
    if method == "saliency":
        amap = xai.saliency(model, x, c)
    elif method == "gradcam":
        amap = xai.grad_cam(model, x, c)
    elif method == "perturbation":
        amap = xai.perturbation_map(model, x, c, sub["patch_size"])
        side["patch_size"] = sub["patch_size"]
    elif method == "hybrid":
        amap = xai.hybrid_map(xai.grad_cam(model, x, c), xai.perturbation_map(model, x, c, sub["patch_size"]),
                              sub["lam"])
        side.update(lam=sub["lam"], patch_size=sub["patch_size"])
    else:
        def blackbox(X):
            z = nn.forward(model, np.asarray(X, dtype=np.float64).reshape((-1,) + x.shape), "eval").data
            return z[:, c]
        exp = xai.lime_explain(blackbox, x, n_perturb=sub["n_perturb"], sigma=sub["sigma"],
                               mask_prob=sub["mask_prob"], seed=cfg["seed"], sharp=sub["sharp"])
        phi = np.asarray(exp.phi, dtype=np.float64).reshape(x.shape)
        amap = xai.AttributionMap(np.abs(phi).max(axis=0) if phi.ndim == 3 else np.abs(phi), "lime", c)
        side.update(n_perturb=sub["n_perturb"], sigma=sub["sigma"], mask_prob=sub["mask_prob"],
                    sharp=sub["sharp"], surrogate=exp.to_json())
    name = f"{method}_{i}"
    xai.write_pgm(run.p(f"{name}.pgm"), amap.normalized())
    side["map"] = amap.to_json()
    run.write_json(f"{name}.json", side)
    values = {"iou_xai": fm.iou_xai(amap, fm.foreground_mask(x))}
    return fm.MetricsReport(values, _meta(cfg, method))


def cmd_gan(cfg: dict, run: RunDir, args) -> fm.MetricsReport:
    sub = cfg["gan"]
    gcfg = G.GanConfig.from_dict(dict(sub, seed=cfg["seed"]))
    if cfg["dataset"] == "mixture":
        ds = D.synth_biased_mixture(sub["n_samples"], sub["group_means"], sub["group_probs"],
                                    seed=cfg["seed"], dim=sub["dim"])
    else:
        ds = _image_split(cfg).train
    result = G.train_gan(ds, gcfg, log=lambda row: _log(json.dumps(row, sort_keys=True)))
    G.save_gan(run.p("gan.tfmd"), result.gan, result.history)
    run.p("gan.tfmd.json")
    G.write_history_csv(run.p("history.csv"), result.history)
    last = result.history[-1]
    values = {"delta_bias": last["delta_bias"], "grad_norm": last["grad_norm"], "d_loss": last["d_loss"],
              "g_loss": last["g_loss"], "gp": last["gp"], "r_bias": last["r_bias"]}
    if result.gan.image:
        rng = np.random.default_rng(cfg["seed"])
        for c in range(min(result.gan.n_classes, 10)):
            tile = result.gan.sample(1, c, rng)[0]
            xai.write_pgm(run.p(f"sample_{c}.pgm"), tile.reshape(tile.shape[-2:]))
    if sub["n_expl"]:
        exps = G.explain_generated(result.gan, sub["n_expl"], seed=cfg["seed"])
        run.write_json("explanations.json", [e.to_json() for e in exps])
    return fm.MetricsReport(values, _meta(cfg, f"wgan-gp-bias{sub['lambda_bias']:g}"))


def cmd_fuse(cfg: dict, run: RunDir, args) -> fm.MetricsReport:
    sub = cfg["fusion"]
    if cfg["dataset"] not in IMAGE_DATASETS:
        raise UsageError("fuse needs an image dataset")
    pair = D.load_dataset(cfg["dataset"], seed=cfg["seed"])
    seed = cfg["seed"]
    train = fu.make_paired(pair.train.head(sub["train_size"]), seed=seed, image_noise=sub["image_noise"],
                           p_label=sub["p_label"], planted_class=sub["planted_class"])
    test = fu.make_paired(pair.test.head(sub["test_size"]), seed=seed + 1, image_noise=sub["image_noise"],
                          p_label=sub["p_label"])
    probe = None
    if sub["planted_class"] is not None:
        rest = pair.test.subset(np.arange(sub["test_size"], len(pair.test)))
        sel = np.flatnonzero(np.asarray(rest.labels) == sub["planted_class"])[:sub["probe_size"]]
        probe = fu.make_paired(rest.subset(sel), seed=seed + 2, image_noise=sub["image_noise"],
                               p_label=sub["p_label"], planted_class=sub["planted_class"])
    fcfg = fu.FusionConfig.from_dict({k: v for k, v in sub.items()
                                      if k in fu.FusionConfig.__dataclass_fields__} | {"heads": cfg["heads"],
                                                                                      "seed": seed})
    result = fu.train_fusion(train, test, fcfg, probe, log=lambda row: _log(json.dumps(row, sort_keys=True)))
    run.write_text("history.csv", _history_csv(result.history))
    tag = f"fusion-{fcfg.mode}" + ("+feedback" if fcfg.bias_feedback else "")
    return fm.MetricsReport(result.report.values, _meta(cfg, tag))


HANDLERS = {
    "fetch-data": cmd_fetch_data, "train": cmd_train, "attack": cmd_attack, "adv-train": cmd_adv_train,
    "uncertainty": cmd_uncertainty, "explain": cmd_explain, "gan": cmd_gan, "fuse": cmd_fuse,
}


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

ROBUSTNESS_COLUMNS = ("run", "model", "attack", "train_err", "test_err", "adv_err", "acc")
FUSION_COLUMNS = ("run", "method", "accuracy", "f1", "iou_xai", "ssim", "nmi")


def _cell(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (int, float)) and not isinstance(v, bool) else str(v)


def build_report(run_dirs: List[Path]) -> tuple:
    """Robustness and fusion CSV text plus a list of skipped directories."""
    t4, t3, skipped = [], [], []
    for d in run_dirs:
        mpath = Path(d) / "manifest.json"
        if not mpath.is_file():
            skipped.append(str(d))
            continue
        man = json.loads(mpath.read_text(encoding="utf-8"))
        m, meta, cmd = man.get("metrics", {}), man.get("metadata", {}), man.get("command")
        name = Path(d).name
        if cmd in ("train", "adv-train", "attack"):
            attack = "none" if cmd == "train" else man["config"]["attack"]["method"]
            acc = m.get("accuracy") if cmd != "adv-train" else (1.0 - m["adv_err"] if "adv_err" in m else None)
            t4.append([name, meta.get("model"), attack, m.get("train_err"), m.get("test_err"), m.get("adv_err"), acc])
        elif cmd == "fuse":
            t3.append([name, meta.get("model"), m.get("accuracy"), m.get("f1"), m.get("iou_xai"), m.get("ssim"),
                       m.get("nmi")])
    out = []
    for cols, rows in ((ROBUSTNESS_COLUMNS, t4), (FUSION_COLUMNS, t3)):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_cell(v) for v in row])
        out.append(buf.getvalue())
    return out[0], out[1], skipped


def cmd_report(args) -> int:
    t4, t3, skipped = build_report(list(args.run_dirs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "robustness.csv").write_text(t4, encoding="utf-8", newline="")
    (out / "fusion.csv").write_text(t3, encoding="utf-8", newline="")
    for d in skipped:
        _log(f"warning: {d} has no manifest.json; skipped")
    if skipped:
        _log(f"{len(skipped)} warning(s)")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def run(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = None if args.command == "report" else effective_config(args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return 2
    if cfg is None:
        try:
            return cmd_report(args)
        except OSError as exc:
            _log(f"error: {type(exc).__name__}: {exc}")
            return 1
    try:
        with RunDir(args.out) as rd:
            rd.write_json("config.json", cfg)
            report = HANDLERS[args.command](cfg, rd, args)
            rd.write_report(report)
            rd.write_manifest(cfg, report)
        _log(f"{args.command}: wrote {args.out}")
        return 0
    except UsageError as exc:
        _log(f"usage error: {exc}")
        return 2
    except (TrustforgeError, ContractError, OSError, ValueError) as exc:
        _log(f"error: {type(exc).__name__}: {exc}")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
