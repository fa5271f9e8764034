"""IDX parsing, dataset download/caching, splits and synthetic generators.

Images are stored as float32 in [0, 1] (pixel / 255) to keep the 60k-image
MNIST training set within a few hundred megabytes; batches are promoted to
float64 when they enter the autodiff graph.
"""

from __future__ import annotations

import gzip
import io
import json
import os
import struct
import tarfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, FormatError, LengthError, StratificationError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
_NDIMS = {IMAGE_MAGIC: 3, LABEL_MAGIC: 1}


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

def parse_idx(data: bytes):
    """Decode an IDX byte stream (optionally gzip-compressed).

    Returns ``(array, kind)`` where ``kind`` is ``"images"`` or ``"labels"``.
    Images come back as float32 in [0, 1]; labels as int64.
    """
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < 4:
        raise LengthError("IDX header truncated", 4, len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in _NDIMS:
        raise FormatError(f"bad IDX magic {magic} (expected 2051 or 2049)")
    ndim = _NDIMS[magic]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise LengthError("IDX header truncated", header, len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(data) != expected:
        raise LengthError("IDX payload size mismatch", expected, len(data))
    raw = np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IMAGE_MAGIC:
        return raw.astype(np.float32) / np.float32(255.0), "images"
    return raw.astype(np.int64), "labels"


def write_idx(array, kind: str) -> bytes:
    """Encode images (values in [0, 1]) or integer labels as IDX bytes."""
    a = np.asarray(array)
    if kind == "images":
        if a.ndim != 3:
            raise ContractError(f"images must be N×H×W, got shape {a.shape}")
        if a.size and (a.min() < 0 or a.max() > 1):
            raise ContractError("image values must lie in [0, 1]")
        payload = np.rint(a.astype(np.float64) * 255.0).astype(np.uint8)
        magic = IMAGE_MAGIC
    elif kind == "labels":
        if a.ndim != 1:
            raise ContractError(f"labels must be 1-D, got shape {a.shape}")
        if a.size and (a.min() < 0 or a.max() > 255):
            raise ContractError("labels must fit in an unsigned byte")
        payload = a.astype(np.uint8)
        magic = LABEL_MAGIC
    else:
        raise ContractError(f"kind must be 'images' or 'labels', got {kind!r}")
    head = struct.pack(f">I{a.ndim}I", magic, *a.shape)
    return head + payload.tobytes()


def load_idx(path):
    return parse_idx(Path(path).read_bytes())


def save_idx(path, array, kind: str, compress: bool = False) -> Path:
    path = Path(path)
    blob = write_idx(array, kind)
    if compress:
        blob = gzip.compress(blob, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledDataset:
    """Images ``N×1×H×W`` (or features ``N×d``) with labels and optional groups.

    For regression data ``labels`` holds real-valued targets and
    ``n_classes`` is ``None``.
    """

    x: np.ndarray
    labels: np.ndarray
    group: Optional[np.ndarray] = None
    n_classes: Optional[int] = None
    n_groups: Optional[int] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.x)
        if len(self.labels) != n:
            raise ContractError(f"{n} samples but {len(self.labels)} labels")
        if self.group is not None and len(self.group) != n:
            raise ContractError(f"{n} samples but {len(self.group)} group entries")
        if self.x.ndim == 4 and n and (self.x.min() < 0 or self.x.max() > 1):
            raise ContractError("image values must lie in [0, 1]")
        if self.n_classes is not None and n:
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ContractError(f"labels must lie in [0, {self.n_classes})")
        if self.group is not None and self.n_groups is not None and n:
            if self.group.min() < 0 or self.group.max() >= self.n_groups:
                raise ContractError(f"groups must lie in [0, {self.n_groups})")
        for arr in (self.x, self.labels, self.group):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return len(self.x)

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.x[idx],
            self.labels[idx],
            None if self.group is None else self.group[idx],
            self.n_classes,
            self.n_groups,
            dict(self.meta),
        )

    def head(self, n: Optional[int]) -> "LabeledDataset":
        """First ``n`` samples (all of them when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return self.subset(np.arange(n))


@dataclass(frozen=True)
class SplitPair:
    train: LabeledDataset
    test: LabeledDataset
    train_idx: np.ndarray
    test_idx: np.ndarray


def from_idx_arrays(images, labels, n_classes: int = 10, **meta) -> LabeledDataset:
    if len(images) != len(labels):
        raise ContractError(f"{len(images)} images but {len(labels)} labels")
    return LabeledDataset(images[:, None, :, :], labels, n_classes=n_classes, meta=meta)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(ds: LabeledDataset, test_fraction: float = 0.2, seed: int = 0) -> SplitPair:
    """Class-stratified train/test split.

    The test set has exactly ``round(test_fraction * N)`` samples. Per-class
    quotas use largest-remainder allocation, so each class is within one
    sample of its exact proportion.
    """
    if not 0 < test_fraction < 1:
        raise ContractError(f"test_fraction must be in (0, 1), got {test_fraction}")
    labels = np.asarray(ds.labels)
    classes, counts = np.unique(labels, return_counts=True)
    for c, k in zip(classes, counts):
        if k < 2:
            raise StratificationError(f"class {c} has {k} sample(s); need at least 2")

    total = _round_half_up(test_fraction * len(labels))
    exact = counts * test_fraction
    quota = np.floor(exact).astype(np.int64)
    rest = total - int(quota.sum())
    # ties in the fractional part go to the smaller class label
    order = np.lexsort((classes, -(exact - quota)))
    quota[order[:rest]] += 1

    rng = np.random.default_rng(seed)
    test_parts, train_parts = [], []
    for c, q in zip(classes, quota):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        test_parts.append(idx[:q])
        train_parts.append(idx[q:])
    test_idx = np.sort(np.concatenate(test_parts))
    train_idx = np.sort(np.concatenate(train_parts))
    return SplitPair(ds.subset(train_idx), ds.subset(test_idx), train_idx, test_idx)


def synth_regression(n: int, x_range=(-5.0, 5.0), noise_sd: float = 0.0, seed: int = 0) -> LabeledDataset:
    """Samples of ``y = 2x + 1 + eps`` with ``x`` uniform on ``x_range``."""
    lo, hi = float(x_range[0]), float(x_range[1])
    if n <= 0:
        raise ContractError(f"n must be positive, got {n}")
    if not hi > lo:
        raise ContractError(f"x_range must satisfy lo < hi, got {x_range}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=n)
    y = 2.0 * x + 1.0 + noise_sd * rng.standard_normal(n)
    return LabeledDataset(x[:, None], y, meta={"kind": "regression", "x_range": [lo, hi]})


def synth_biased_mixture(n: int, group_means, group_probs, seed: int = 0, dim: int = 1) -> LabeledDataset:
    """Gaussian mixture with one unit-variance component per protected group.

    ``group_means`` may be scalars (broadcast over ``dim`` features) or
    vectors of length ``dim``. Labels equal the group index so the data can
    condition a generator directly.
    """
    probs = np.asarray(group_probs, dtype=np.float64)
    means = np.asarray(group_means, dtype=np.float64)
    if means.ndim == 1:
        means = np.repeat(means[:, None], dim, axis=1)
    if len(means) != len(probs):
        raise ContractError(f"{len(means)} group means but {len(probs)} probabilities")
    if abs(probs.sum() - 1.0) > 1e-9 or np.any(probs < 0):
        raise ContractError(f"group probabilities must be nonnegative and sum to 1, got {probs.tolist()}")
    rng = np.random.default_rng(seed)
    g = rng.choice(len(probs), size=n, p=probs)
    x = means[g] + rng.standard_normal((n, means.shape[1]))
    G = len(probs)
    return LabeledDataset(x, g.copy(), g, n_classes=G, n_groups=G, meta={"kind": "mixture"})


# ---------------------------------------------------------------------------
# Download and cache
# ---------------------------------------------------------------------------

_MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", 60000),
    "train_labels": ("train-labels-idx1-ubyte", 60000),
    "test_images": ("t10k-images-idx3-ubyte", 10000),
    "test_labels": ("t10k-labels-idx1-ubyte", 10000),
}

_MIRRORS = {
    "mnist": [
        "https://ossci-datasets.s3.amazonaws.com/mnist/",
        "https://storage.googleapis.com/cvdf-datasets/mnist/",
    ],
    "fashion": [
        "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
        "https://raw.githubusercontent.com/zalandoresearch/fashion-mnist/master/data/fashion/",
    ],
}

# package-registry tarballs carrying the same pixels, used when the canonical
# hosts are unreachable
_TARBALLS = {
    "mnist": "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz",
    "fashion": "https://registry.npmjs.org/fashion-mnist/-/fashion-mnist-1.1.0.tgz",
}

FASHION_POOL = "fashion-pool"


def data_dir(path=None) -> Path:
    """Cache directory: explicit ``path``, else ``$TRUSTFORGE_DATA_DIR``, else ``~/.cache/trustforge``."""
    if path is None:
        path = os.environ.get("TRUSTFORGE_DATA_DIR") or Path.home() / ".cache" / "trustforge"
    return Path(path)


def expected_idx_length(kind: str, n: int, rows: int = 28, cols: int = 28) -> int:
    return 16 + n * rows * cols if kind == "images" else 8 + n


def _verify(blob: bytes, kind: str, n: int) -> bytes:
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    want = expected_idx_length(kind, n)
    if len(blob) != want:
        raise LengthError(f"downloaded {kind} file", want, len(blob))
    return blob


def _get(url: str, timeout: float) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as r:
        return r.read()


def _write_atomic(path: Path, blob: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".part")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _cached(root: Path, name: str) -> dict:
    return {k: root / name / fname for k, (fname, _) in _MNIST_FILES.items()}


def _complete(paths: dict) -> bool:
    return all(p.exists() for p in paths.values())


def _fetch_canonical(name: str, paths: dict, timeout: float) -> bool:
    for base in _MIRRORS[name]:
        try:
            blobs = {}
            for key, (fname, n) in _MNIST_FILES.items():
                kind = "images" if key.endswith("images") else "labels"
                blobs[key] = _verify(_get(base + fname + ".gz", timeout), kind, n)
        except (OSError, FormatError, EOFError):
            continue
        for key, blob in blobs.items():
            _write_atomic(paths[key], blob)
        return True
    return False


def _open_tarball(name: str, timeout: float) -> tarfile.TarFile:
    return tarfile.open(fileobj=io.BytesIO(_get(_TARBALLS[name], timeout)), mode="r:gz")


def _fetch_mnist_tarball(paths: dict, timeout: float) -> None:
    with _open_tarball("mnist", timeout) as tar:
        for key, (fname, n) in _MNIST_FILES.items():
            kind = "images" if key.endswith("images") else "labels"
            blob = tar.extractfile(f"package/data/{fname}").read()
            _write_atomic(paths[key], _verify(blob, kind, n))


def _fetch_fashion_tarball(root: Path, timeout: float) -> dict:
    images, labels = [], []
    with _open_tarball("fashion", timeout) as tar:
        for c in range(10):
            rows = json.load(tar.extractfile(f"package/src/clothes/{c}.json"))["data"]
            # the archive holds a couple of empty placeholder rows
            rows = [r for r in rows if len(r) == 784]
            images.append(np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28))
            labels.append(np.full(len(rows), c, dtype=np.int64))
    # fixed shuffle so that classes are interleaved as in the canonical files
    perm = np.random.default_rng(0).permutation(sum(len(a) for a in labels))
    img = np.concatenate(images)[perm]
    lab = np.concatenate(labels)[perm]
    if len(img) != 70000:
        raise LengthError("fashion pool sample count", 70000, len(img))
    out = root / FASHION_POOL
    out.mkdir(parents=True, exist_ok=True)
    paths = {"images": out / "images-idx3-ubyte", "labels": out / "labels-idx1-ubyte"}
    _write_atomic(paths["images"], write_idx(img / 255.0, "images"))
    _write_atomic(paths["labels"], write_idx(lab, "labels"))
    return paths


def fetch(name: str, root=None, timeout: float = 300.0) -> dict:
    """Ensure ``name`` ("mnist" or "fashion") is cached; return its file paths.

    Canonical gzip mirrors are tried first. If none answers, MNIST falls back
    to a registry tarball with identical IDX files, and Fashion-MNIST to a
    registry tarball of per-class pixel arrays that is rewritten as a single
    70000-sample IDX pool (no canonical train/test division).
    """
    if name not in _MIRRORS:
        raise ContractError(f"unknown dataset {name!r}; choose 'mnist' or 'fashion'")
    root = data_dir(root)
    paths = _cached(root, name)
    if _complete(paths):
        return paths
    if name == "fashion":
        pool = {"images": root / FASHION_POOL / "images-idx3-ubyte",
                "labels": root / FASHION_POOL / "labels-idx1-ubyte"}
        if _complete(pool):
            return pool
    (root / name).mkdir(parents=True, exist_ok=True)
    if _fetch_canonical(name, paths, timeout):
        return paths
    if name == "mnist":
        _fetch_mnist_tarball(paths, timeout)
        return paths
    return _fetch_fashion_tarball(root, timeout)


def load_dataset(name: str, root=None, seed: int = 0, fetch_missing: bool = True) -> SplitPair:
    """Train/test pair for MNIST or Fashion-MNIST.

    Uses the canonical division when the canonical files are cached; the
    Fashion-MNIST pool is divided 80/20 by :func:`stratified_split`.
    """
    root = data_dir(root)
    paths = fetch(name, root) if fetch_missing else _cached(root, name)
    if "train_images" in paths:
        tr_x, _ = load_idx(paths["train_images"])
        tr_y, _ = load_idx(paths["train_labels"])
        te_x, _ = load_idx(paths["test_images"])
        te_y, _ = load_idx(paths["test_labels"])
        train = from_idx_arrays(tr_x, tr_y, dataset=name)
        test = from_idx_arrays(te_x, te_y, dataset=name)
        return SplitPair(train, test, np.arange(len(train)), np.arange(len(test)) + len(train))
    x, _ = load_idx(paths["images"])
    y, _ = load_idx(paths["labels"])
    return stratified_split(from_idx_arrays(x, y, dataset=name), 0.2, seed)


def dataset_available(name: str, root=None) -> bool:
    root = data_dir(root)
    if _complete(_cached(root, name)):
        return True
    return name == "fashion" and (root / FASHION_POOL / "images-idx3-ubyte").exists()


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def group_means(x, group, n_groups: Optional[int] = None) -> np.ndarray:
    """Per-group feature means; rows for empty groups are NaN."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    group = np.asarray(group)
    G = int(group.max()) + 1 if n_groups is None else n_groups
    out = np.full((G, x.shape[1]), np.nan)
    for g in range(G):
        m = group == g
        if m.any():
            out[g] = x[m].mean(axis=0)
    return out


__all__: Sequence[str] = [
    "parse_idx", "write_idx", "load_idx", "save_idx", "LabeledDataset", "SplitPair",
    "stratified_split", "synth_regression", "synth_biased_mixture", "fetch",
    "load_dataset", "data_dir", "dataset_available", "iterate_minibatches", "group_means",
]
