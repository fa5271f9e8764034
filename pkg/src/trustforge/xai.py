"""Attribution maps and surrogate explanations.

Gradient methods (saliency, Grad-CAM) read derivatives off the autodiff
graph; the perturbation map, the local weighted-linear surrogate and the
sparse global surrogate only query the model as a black box.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from . import nn
from . import tensor as T
from .errors import AttributionError, ContractError, ConvergenceError, SingularityError
from .tensor import Tensor


# ---------------------------------------------------------------------------
# attribution maps
# ---------------------------------------------------------------------------

@dataclass
class AttributionMap:
    values: np.ndarray
    source: str
    target: Optional[int] = None

    def normalized(self) -> np.ndarray:
        """Values divided by their maximum (an all-zero map stays zero)."""
        v = np.asarray(self.values, dtype=np.float64)
        top = v.max() if v.size else 0.0
        return v / top if top > 0 else np.zeros_like(v)

    @property
    def shape(self):
        return self.values.shape

    def to_json(self) -> dict:
        return {"source": self.source, "target": self.target, "values": np.asarray(self.values).tolist()}

    def write_pgm(self, path) -> Path:
        return write_pgm(path, self.normalized())


def write_pgm(path, image) -> Path:
    """Binary 8-bit PGM (P5) of a 2-D array with values in [0, 1]."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"PGM needs a 2-D array, got shape {a.shape}")
    px = np.rint(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + px.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ContractError("not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8)[: w * h].reshape(h, w) / 255.0


def _score_fn(model, target):
    """Turn a model (or callable Tensor -> Tensor) into ``x -> scalar score``."""
    if isinstance(model, nn.Model):
        def f(xt):
            z = nn.logits(model, T.reshape(xt, (1,) + xt.shape), "eval")
            return z[0, target] if target is not None else z.sum()
        return f
    if target is None:
        return lambda xt: model(xt).sum()
    return lambda xt: T.reshape(model(xt), (-1,))[target]


def _spatial(g: np.ndarray) -> np.ndarray:
    # channel-first images collapse to H×W by the channel-wise maximum
    if g.ndim == 3:
        return g.max(axis=0)
    return g


def saliency(model, x, target: Optional[int] = None) -> AttributionMap:
    """Absolute input gradient ``|∂y_target/∂x|`` of a pre-head class score.

    ``model`` is a :class:`~trustforge.nn.Model` (the score is the logit of
    ``target``) or a callable mapping a Tensor to a Tensor of scores.
    """
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    y = _score_fn(model, target)(xt)
    if y.size != 1:
        raise ContractError("saliency needs a scalar target score")
    (g,) = T.grad(y, [xt])
    g = g.data
    if not np.all(np.isfinite(g)):
        raise AttributionError("non-finite gradient on the attribution path")
    return AttributionMap(_spatial(np.abs(g)), "saliency", target)


def bilinear_resize(a: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of a 2-D array (edge clamped)."""
    a = np.asarray(a, dtype=np.float64)
    out = a
    for axis, n_out in enumerate(shape):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        a_lo = np.take(out, lo, axis=axis)
        a_hi = np.take(out, hi, axis=axis)
        shp = [1] * out.ndim
        shp[axis] = n_out
        frac = frac.reshape(shp)
        out = a_lo * (1 - frac) + a_hi * frac
    return out


def grad_cam_from(activations: np.ndarray, gradients: np.ndarray, out_shape=None) -> np.ndarray:
    """Grad-CAM from feature maps ``A`` (K×h×w) and ``∂y^c/∂A`` of the same shape.

    Channel weights are spatially averaged gradients; the weighted sum is
    rectified and optionally resized to ``out_shape``.
    """
    A = np.asarray(activations, dtype=np.float64)
    G = np.asarray(gradients, dtype=np.float64)
    if A.ndim != 3 or A.shape != G.shape:
        raise ContractError(f"expected matching K×h×w arrays, got {A.shape} and {G.shape}")
    alpha = G.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, A, axes=1), 0.0)
    if out_shape is not None:
        cam = bilinear_resize(cam, out_shape)
    return cam


def grad_cam(model: nn.Model, x, c: int, layer: Optional[int] = None) -> AttributionMap:
    """Grad-CAM for class ``c`` at ``layers[layer]`` (default: last conv layer)."""
    x = np.asarray(x, dtype=np.float64)
    if layer is None:
        layer = nn.last_conv_index(model)
    with T.enable_grad():
        feats, z = nn.features_and_logits(model, x[None], layer)
        if feats.ndim != 4:
            raise ContractError(f"layer {layer} output {feats.shape} has no spatial extent")
        (g,) = T.grad(z[0, c], [feats])
    if not np.all(np.isfinite(g.data)):
        raise AttributionError("non-finite gradient at the Grad-CAM layer")
    cam = grad_cam_from(feats.data[0], g.data[0], x.shape[-2:])
    return AttributionMap(cam, "grad-cam", c)


def hybrid_map(gc: AttributionMap, pm: AttributionMap, lam: float) -> AttributionMap:
    """``lam * gc + (1 - lam) * pm`` on max-normalized maps."""
    if not 0 <= lam <= 1:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    if gc.shape != pm.shape:
        raise ContractError(f"map shapes differ: {gc.shape} vs {pm.shape}")
    a, b = gc.normalized(), pm.normalized()
    if lam == 1:
        out = a
    elif lam == 0:
        out = b
    else:
        out = lam * a + (1 - lam) * b
    return AttributionMap(out, "hybrid", gc.target)


def perturbation_map(model, x, c: int, patch_size: int = 4, batch: int = 256) -> AttributionMap:
    """Occlusion map: clamped score drop when each patch is zeroed, painted on the patch.

    Patches tile the image with stride ``patch_size``; edge patches may be smaller.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    if patch_size < 1 or patch_size > min(H, W):
        raise ContractError(f"patch size {patch_size} does not fit a {H}×{W} image")
    score = _batch_scores(model, c)
    cells = [(i, j) for i in range(0, H, patch_size) for j in range(0, W, patch_size)]
    occluded = np.repeat(x[None], len(cells), axis=0)
    for k, (i, j) in enumerate(cells):
        occluded[k, ..., i:i + patch_size, j:j + patch_size] = 0.0
    base = score(x[None])[0]
    drops = np.concatenate([score(occluded[s:s + batch]) for s in range(0, len(cells), batch)])
    out = np.zeros((H, W))
    for (i, j), d in zip(cells, drops):
        out[i:i + patch_size, j:j + patch_size] = max(base - d, 0.0)
    return AttributionMap(out, "occlusion", c)


def _batch_scores(model, c):
    if isinstance(model, nn.Model):
        def f(xb):
            with T.no_grad():
                return nn.logits(model, xb, "eval").data[:, c]
        return f
    return lambda xb: np.asarray(model(xb), dtype=np.float64).reshape(len(xb), -1)[:, c]


# ---------------------------------------------------------------------------
# local surrogate
# ---------------------------------------------------------------------------

@dataclass
class SurrogateExplanation:
    intercept: float
    beta: np.ndarray
    phi: np.ndarray
    fidelity: float
    degenerate: bool = False
    dropped: List[int] = field(default_factory=list)
    tau: float = float("nan")

    def to_json(self) -> dict:
        return {
            "intercept": float(self.intercept),
            "beta": [float(b) for b in self.beta],
            "phi": [float(p) for p in self.phi],
            "fidelity": float(self.fidelity),
            "degenerate": bool(self.degenerate),
            "dropped": [int(i) for i in self.dropped],
        }


def kernel_weights(d, tau: float) -> np.ndarray:
    """Similarity ``exp(-d**2 / tau)``."""
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    return np.exp(-np.square(np.asarray(d, dtype=np.float64)) / tau)


def weighted_lstsq(X: np.ndarray, y: np.ndarray, w: np.ndarray, ridge: float = 1e-6) -> tuple:
    """Weighted ridge regression with an unpenalized intercept; returns (b0, beta)."""
    sw = np.sqrt(w)
    design = np.column_stack([np.ones(len(X)), X]) * sw[:, None]
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise SingularityError(
            f"perturbation design has rank {np.linalg.matrix_rank(design)} < {design.shape[1]}; "
            "increase n_perturb or the perturbation scale"
        )
    A = design.T @ design
    A[1:, 1:] += ridge * np.eye(X.shape[1])
    coef = np.linalg.solve(A, design.T @ (y * sw))
    return float(coef[0]), coef[1:]


def weighted_r2(y, yhat, w) -> float:
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    if ss_tot <= 0:
        return 0.0
    return 1.0 - float(np.sum(w * (y - yhat) ** 2)) / ss_tot


def attributions(beta) -> tuple:
    """``phi_j = |beta_j| / sum_k |beta_k|``; uniform with a flag when beta is zero."""
    a = np.abs(np.asarray(beta, dtype=np.float64))
    s = a.sum()
    if s == 0:
        return np.full(len(a), 1.0 / len(a)), True
    return a / s, False


def lime_explain(blackbox: Callable, x0, n_perturb: int = 500, sigma: float = 0.1, mask_prob: float = 0.1,
                 tau: Optional[float] = None, seed: int = 0, ridge: float = 1e-6,
                 sharp: bool = False, n_boot: int = 20, flip_frac: float = 0.25) -> SurrogateExplanation:
    """Kernel-weighted linear surrogate around ``x0``.

    The neighborhood is ``x0`` itself plus ``n_perturb - 1`` points with
    Gaussian noise of scale ``sigma``, after which every feature is zeroed
    independently with probability ``mask_prob``. ``blackbox`` maps an array
    of inputs shaped like ``(n,) + x0.shape`` to ``n`` scores.

    With ``sharp=True`` the regression is refit on ``n_boot`` bootstrap
    resamples and any coefficient whose sign disagrees with the full fit in
    more than ``flip_frac`` of them is set to zero.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.size
    if n_perturb < d + 2:
        raise ContractError(f"n_perturb must be at least dim + 2 = {d + 2}, got {n_perturb}")
    rng = np.random.default_rng(seed)
    flat = x0.ravel()
    Z = flat + sigma * rng.standard_normal((n_perturb, d))
    if mask_prob > 0:
        Z = np.where(rng.random(Z.shape) < mask_prob, 0.0, Z)
    Z[0] = flat
    y = np.asarray(blackbox(Z.reshape((n_perturb,) + x0.shape)), dtype=np.float64).reshape(-1)
    if len(y) != n_perturb or not np.all(np.isfinite(y)):
        raise AttributionError("black box must return one finite score per input")

    dist = np.linalg.norm(Z - flat, axis=1)
    if tau is None:
        med = float(np.median(pdist(Z))) if n_perturb > 1 else 0.0
        tau = 0.25 * med if med > 0 else 1.0
    w = kernel_weights(dist, tau)
    b0, beta = weighted_lstsq(Z, y, w, ridge)

    dropped: List[int] = []
    if sharp:
        signs = np.sign(beta)
        flips = np.zeros(d)
        for _ in range(n_boot):
            idx = rng.integers(0, n_perturb, n_perturb)
            try:
                _, bb = weighted_lstsq(Z[idx], y[idx], w[idx], ridge)
            except SingularityError:
                flips += 1
                continue
            flips += np.sign(bb) != signs
        dropped = [int(j) for j in np.flatnonzero(flips > flip_frac * n_boot)]
        if dropped:
            beta = beta.copy()
            beta[dropped] = 0.0

    yhat = b0 + Z @ beta
    ybar = np.sum(w * y) / np.sum(w)
    flat_response = float(np.sum(w * (y - ybar) ** 2)) <= 1e-24 * max(1.0, ybar * ybar) * np.sum(w)
    if flat_response:
        beta = np.zeros_like(beta)
        phi, degenerate = np.full(d, 1.0 / d), True
        fid = 0.0
    else:
        phi, degenerate = attributions(beta)
        fid = weighted_r2(y, yhat, w)
    return SurrogateExplanation(b0, beta, phi, fid, degenerate, dropped, tau)


# ---------------------------------------------------------------------------
# global sparse surrogate
# ---------------------------------------------------------------------------

@dataclass
class GlobalSurrogate:
    w: np.ndarray
    intercept: float
    fidelity: float
    objective: List[float]
    sweeps: int

    def predict(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=np.float64).reshape(len(X), -1) @ self.w

    def to_json(self) -> dict:
        return {"w": self.w.tolist(), "intercept": self.intercept, "fidelity": self.fidelity,
                "sweeps": self.sweeps, "objective": self.objective[-1]}


def soft_threshold(rho: float, lam: float) -> float:
    return math.copysign(max(abs(rho) - lam, 0.0), rho)


def lasso_objective(X, y, w, b, lam) -> float:
    r = y - b - X @ w
    return float(np.mean(r * r) + lam * np.sum(np.abs(w)))


def _kkt_gap(X, r, w, lam) -> float:
    n = len(r)
    g = (2.0 / n) * (X.T @ r)
    active = w != 0
    viol = np.where(active, np.abs(g - lam * np.sign(w)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max()) if len(viol) else 0.0


def lasso_cd(X, y, lam: float, max_sweeps: int = 10000, tol: float = 1e-12) -> tuple:
    """Coordinate descent for ``mean((y - b - Xw)**2) + lam * ||w||_1``.

    Columns and targets are centred first, which makes the unpenalized
    intercept exact: ``b = mean(y) - mean(X) @ w``. Per coordinate:
    ``rho = (2/n) x_j·r_j`` with the partial residual ``r_j``,
    ``z = (2/n) x_j·x_j`` and ``w_j = S(rho, lam) / z``.
    Returns ``(w, b, objective_history, sweeps)``.
    """
    if lam < 0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    xm, ym = X.mean(axis=0), float(y.mean())
    Xc, yc = X - xm, y - ym
    z = (2.0 / n) * np.sum(Xc * Xc, axis=0)
    w = np.zeros(p)
    r = yc.copy()
    hist = [lasso_objective(Xc, yc, w, 0.0, lam)]
    for sweep in range(1, max_sweeps + 1):
        w_old = w.copy()
        for j in range(p):
            if z[j] <= 1e-300:
                continue
            if w[j] != 0:
                r += Xc[:, j] * w[j]
            rho = (2.0 / n) * float(Xc[:, j] @ r)
            w[j] = soft_threshold(rho, lam) / z[j]
            if w[j] != 0:
                r -= Xc[:, j] * w[j]
        hist.append(lasso_objective(Xc, yc, w, 0.0, lam))
        if np.max(np.abs(w - w_old), initial=0.0) <= tol * (1.0 + np.max(np.abs(w), initial=0.0)):
            return w, ym - float(xm @ w), hist, sweep
    raise ConvergenceError(f"lasso did not converge in {max_sweeps} sweeps", _kkt_gap(Xc, r, w, lam))


def r2(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    ss = float(np.sum((y - y.mean()) ** 2))
    if ss == 0:
        return 0.0
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss


def sparse_global_surrogate(blackbox: Callable, X, lambda_l1: float, max_sweeps: int = 10000,
                            tol: float = 1e-12) -> GlobalSurrogate:
    """L1-regularized linear model of ``blackbox`` over the dataset ``X``.

    Fidelity is the R² between black-box outputs and surrogate predictions.
    """
    X = np.asarray(X, dtype=np.float64)
    Xf = X.reshape(len(X), -1)
    y = np.asarray(blackbox(X), dtype=np.float64).reshape(-1)
    if len(y) != len(X):
        raise ContractError(f"black box returned {len(y)} outputs for {len(X)} inputs")
    w, b, hist, sweeps = lasso_cd(Xf, y, lambda_l1, max_sweeps, tol)
    return GlobalSurrogate(w, b, r2(y, b + Xf @ w), hist, sweeps)


def save_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2))
    return path
