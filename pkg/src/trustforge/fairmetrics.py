"""Evaluation metrics: classification, regression, image similarity, attribution overlap and fairness."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError
from .gan import DiscreteDist, delta_bias
from .xai import AttributionMap

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8


def _pair(a, b, what="inputs"):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ContractError(f"{what} differ in shape: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ContractError(f"{what} are empty")
    return a, b


# ---------------------------------------------------------------------------
# classification and regression
# ---------------------------------------------------------------------------

def accuracy(preds, labels) -> float:
    p, t = _pair(np.ravel(preds), np.ravel(labels), "predictions and labels")
    return float(np.mean(p == t))


def f1_score(preds, labels, positive_class=1) -> float:
    """F1 of ``positive_class``; 1.0 when it is neither predicted nor present."""
    p, t = _pair(np.ravel(preds), np.ravel(labels), "predictions and labels")
    pp, tp_mask = p == positive_class, t == positive_class
    tp = int(np.sum(pp & tp_mask))
    fp = int(np.sum(pp & ~tp_mask))
    fn = int(np.sum(~pp & tp_mask))
    if tp == fp == fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def regression_metrics(preds, targets) -> Dict[str, float]:
    p, t = _pair(np.ravel(preds).astype(np.float64), np.ravel(targets).astype(np.float64),
                 "predictions and targets")
    if len(t) < 2:
        raise ContractError("regression metrics need at least two samples")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ContractError("targets have zero variance; r2 is undefined")
    ss_res = float(np.sum((t - p) ** 2))
    return {"r2": 1.0 - ss_res / ss_tot, "rmse": math.sqrt(ss_res / len(t))}


def demographic_parity_gap(preds, groups, positive_class=1) -> float:
    """Largest difference in positive-prediction rate between groups."""
    p, g = _pair(np.ravel(preds), np.ravel(groups), "predictions and groups")
    return delta_bias({k: (p[g == k] == positive_class).astype(np.float64) for k in np.unique(g)})


def group_accuracy_gap(preds, labels, groups) -> float:
    p, t = _pair(np.ravel(preds), np.ravel(labels), "predictions and labels")
    g = np.ravel(groups)
    if len(g) != len(p):
        raise ContractError(f"{len(g)} group labels for {len(p)} predictions")
    return delta_bias({k: (p[g == k] == t[g == k]).astype(np.float64) for k in np.unique(g)})


# ---------------------------------------------------------------------------
# image similarity and clustering agreement
# ---------------------------------------------------------------------------

def _image2d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ContractError(f"expected a single-channel image, got shape {a.shape}")
    return a


def ssim(a, b, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over every ``window x window`` uniform window (stride 1)."""
    a, b = _pair(a, b, "images")
    a, b = _image2d(a), _image2d(b)
    if min(a.shape) < window:
        raise ContractError(f"image {a.shape} is smaller than the {window}x{window} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = ((wa - mu_a[..., None, None]) ** 2).mean(axis=(-2, -1))
    var_b = ((wb - mu_b[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(labels_a, labels_b) -> float:
    """``I(A;B) / sqrt(H(A) H(B))``; two single-cluster labelings give 1."""
    a, b = _pair(np.ravel(labels_a), np.ravel(labels_b), "labelings")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    ha, hb = _entropy(table.sum(1)), _entropy(table.sum(0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    mi = ha + hb - _entropy(table.ravel())
    return float(min(max(mi / math.sqrt(ha * hb), 0.0), 1.0))


# ---------------------------------------------------------------------------
# attribution agreement
# ---------------------------------------------------------------------------

def pixel_accuracy(pred, truth, theta_bin: float = 0.5) -> float:
    if not 0.0 < theta_bin < 1.0:
        raise ContractError(f"theta_bin must lie in (0, 1), got {theta_bin}")
    p, t = _pair(pred, truth, "images")
    return float(np.mean((p >= theta_bin) == (t >= theta_bin)))


def foreground_mask(image, level: float = 0.5) -> np.ndarray:
    return _image2d(image) > level


def iou_xai(attribution, truth_mask, threshold: float = 0.5) -> float:
    """IoU of the thresholded max-normalized attribution against a binary region.

    A missing attribution (``None``) scores 0; two empty regions score 1.
    """
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    if attribution is None:
        return 0.0
    values = attribution.values if isinstance(attribution, AttributionMap) else attribution
    v, m = _pair(np.asarray(values, dtype=np.float64), np.asarray(truth_mask), "attribution and mask")
    v = _image2d(v) if v.ndim > 2 else v
    m = np.asarray(m, dtype=bool).reshape(v.shape)
    top = v.max()
    a = v / top >= threshold if top > 0 else np.zeros(v.shape, dtype=bool)
    union = int(np.sum(a | m))
    if union == 0:
        return 1.0
    return int(np.sum(a & m)) / union


# ---------------------------------------------------------------------------
# optimal transport
# ---------------------------------------------------------------------------

def _numeric(d: DiscreteDist) -> tuple:
    try:
        x = np.asarray(d.support, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ContractError("transport needs a numeric one-dimensional support") from exc
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise ContractError("transport needs a finite one-dimensional support")
    return x, d.probs


def _cdf(x: np.ndarray, w: np.ndarray, grid: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(w[order])])
    return cum[np.searchsorted(x[order], grid, side="right")]


def ot_fairness_penalty(p_pred: DiscreteDist, p_true: DiscreteDist) -> float:
    """One-dimensional Wasserstein-1 distance ``integral |F_p - F_q| dx``."""
    if not isinstance(p_pred, DiscreteDist) or not isinstance(p_true, DiscreteDist):
        raise ContractError("ot_fairness_penalty expects DiscreteDist arguments")
    xp, wp = _numeric(p_pred)
    xq, wq = _numeric(p_true)
    grid = np.union1d(xp, xq)
    cdf_p, cdf_q = _cdf(xp, wp, grid), _cdf(xq, wq, grid)
    return float(np.sum(np.abs(cdf_p - cdf_q)[:-1] * np.diff(grid)))


def empirical(samples) -> DiscreteDist:
    s = np.ravel(np.asarray(samples, dtype=np.float64))
    if s.size == 0:
        raise ContractError("cannot build a distribution from no samples")
    vals, counts = np.unique(s, return_counts=True)
    probs = counts / counts.sum()
    probs[-1] = 1.0 - probs[:-1].sum()
    return DiscreteDist(tuple(vals.tolist()), probs)


def ot_distance(x_pred, x_true) -> float:
    """Sum over features of the 1-D W1 between empirical marginals."""
    a = np.asarray(x_pred, dtype=np.float64)
    b = np.asarray(x_true, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"feature counts differ: {a.shape[1]} vs {b.shape[1]}")
    return float(sum(ot_fairness_penalty(empirical(a[:, j]), empirical(b[:, j])) for j in range(a.shape[1])))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("accuracy", "f1", "r2", "rmse", "ssim", "nmi", "iou_xai", "delta_bias", "ot_distance")
META_COLUMNS = ("dataset", "model", "seed")
_BOUNDS = {"accuracy": (0.0, 1.0), "f1": (0.0, 1.0), "nmi": (0.0, 1.0), "iou_xai": (0.0, 1.0),
           "ssim": (-1.0, 1.0)}


@dataclass
class MetricsReport:
    values: Dict[str, float] = field(default_factory=dict)
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.values.items():
            v = float(v)
            if math.isnan(v):
                raise ContractError(f"metric {k} is NaN")
            lo, hi = _BOUNDS.get(k, (-math.inf, math.inf))
            if not lo - 1e-12 <= v <= hi + 1e-12:
                raise ContractError(f"metric {k}={v} outside [{lo}, {hi}]")
            if k == "r2" and v > 1 + 1e-12:
                raise ContractError(f"r2={v} exceeds 1")
            if k in ("rmse", "delta_bias", "ot_distance") and v < 0:
                raise ContractError(f"metric {k}={v} is negative")
            self.values[k] = v

    def update(self, **values) -> "MetricsReport":
        merged = dict(self.values)
        merged.update(values)
        return MetricsReport(merged, dict(self.metadata))

    def to_dict(self) -> dict:
        return {"metrics": {k: self.values[k] for k in sorted(self.values)},
                "metadata": {k: self.metadata[k] for k in sorted(self.metadata)}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(dict(d.get("metrics", {})), dict(d.get("metadata", {})))

    def columns(self) -> tuple:
        extra = tuple(sorted(k for k in self.values if k not in METRIC_COLUMNS))
        return META_COLUMNS + METRIC_COLUMNS + extra

    def csv_row(self, header: bool = True) -> str:
        cols = self.columns()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(cols)
        row = []
        for c in cols:
            if c in META_COLUMNS:
                row.append("" if self.metadata.get(c) is None else str(self.metadata[c]))
            else:
                row.append(repr(self.values[c]) if c in self.values else "")
        w.writerow(row)
        return buf.getvalue()


def merge_reports(reports: Mapping[str, MetricsReport]) -> str:
    """CSV table with one row per report under a shared header."""
    cols = set()
    for r in reports.values():
        cols.update(r.columns())
    ordered = META_COLUMNS + METRIC_COLUMNS + tuple(sorted(cols - set(META_COLUMNS) - set(METRIC_COLUMNS)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("name",) + ordered)
    for name in sorted(reports):
        r = reports[name]
        row = [name]
        for c in ordered:
            if c in META_COLUMNS:
                row.append("" if r.metadata.get(c) is None else str(r.metadata[c]))
            else:
                row.append(repr(r.values[c]) if c in r.values else "")
        w.writerow(row)
    return buf.getvalue()
