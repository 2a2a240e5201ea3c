"""Analysis tools over the learnt 64-dimensional latent space.

Covers code extraction and distribution statistics, decoder traversals along
single dimensions, a linear PCA baseline over (downsampled) one-hot label
maps, a seeded bagged-tree classifier over code features, and a
finite-difference estimate of the encoder's contractive penalty (squared
Frobenius norm of its Jacobian).
"""

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .models import CODE_DIM, labels_from_logits, one_hot, one_hot_batch
from .phantom import CLASS_COUNT, LabelMap, Volume
from .seeding import rng_for


@dataclass
class CodeMatrix:
    values: np.ndarray  # (n_samples, 64) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"code matrix must be 2-D, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("code matrix contains non-finite entries")

    @property
    def mu(self):
        return self.values.mean(axis=0, dtype=np.float64)

    @property
    def sigma(self):
        return self.values.std(axis=0, dtype=np.float64)

    def __len__(self):
        return len(self.values)


def extract_codes(network, items, batch_size=16):
    """One code row per input item, in order, inference mode.

    `network` is an encoder (items: LabelMap) or predictor (items: Volume).
    """
    rows = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        if network.spec.kind == "encoder":
            x = one_hot_batch([it.data for it in chunk], CLASS_COUNT)
        elif network.spec.kind == "predictor":
            x = E.Tensor(np.stack([it.data for it in chunk])[:, None])
        else:
            raise ValueError(f"cannot extract codes from a {network.spec.kind!r} network")
        rows.append(network.forward(x, training=False).data)
    return CodeMatrix(np.concatenate(rows, axis=0))


# ---------------------------------------------------------------------------
# distribution diagnostics


@dataclass
class DimHistogram:
    dim: int
    counts: np.ndarray
    edges: np.ndarray
    skewness: float
    kurtosis: float  # excess kurtosis
    degenerate: bool
    mode_count: int


def code_histograms(codes, bins=20):
    """Per-dimension histograms with shape statistics.

    Reports a mode count (local maxima of the lightly smoothed histogram) as
    a unimodality diagnostic; nothing is asserted about it.
    """
    if len(codes) < 2:
        raise ValueError("need at least 2 samples for histograms")
    out = []
    for d in range(codes.values.shape[1]):
        col = codes.values[:, d].astype(np.float64)
        lo, hi = float(col.min()), float(col.max())
        degenerate = hi - lo < 1e-12
        if degenerate:
            counts = np.array([len(col)])
            edges = np.array([lo, lo + 1.0])
            skew = kurt = 0.0
            modes = 1
        else:
            counts, edges = np.histogram(col, bins=bins, range=(lo, hi))
            mu = col.mean()
            sd = col.std()
            skew = float(((col - mu) ** 3).mean() / sd**3)
            kurt = float(((col - mu) ** 4).mean() / sd**4 - 3.0)
            smooth = np.convolve(counts, [0.25, 0.5, 0.25], mode="same")
            inner = smooth[1:-1]
            modes = int(
                np.sum((inner > smooth[:-2]) & (inner >= smooth[2:]))
            ) or 1
        out.append(DimHistogram(d, counts, edges, skew, kurt, degenerate, modes))
    return out


def latent_traversal(decoder, codes, dim, steps):
    """Decode the mean code with dimension `dim` swept over mu +- 2 sigma.

    Returns argmax label grids, one per step; the swept code sequence is
    exactly linear and mirror-symmetric around the mean.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    mu = codes.mu.astype(np.float32)
    sigma = float(codes.sigma[dim])
    if sigma <= 0:
        raise ValueError(f"dimension {dim} is degenerate (sigma = 0)")
    if steps == 1:
        offsets = np.array([0.0], dtype=np.float32)
    else:
        half = (steps - 1) / 2.0
        stepsize = 4.0 * sigma / (steps - 1)
        offsets = ((np.arange(steps) - half) * stepsize).astype(np.float32)
    sweep = np.tile(mu, (steps, 1))
    sweep[:, dim] = mu[dim] + offsets
    logits = decoder.forward(E.Tensor(sweep), training=False)
    return [labels_from_logits(E.Tensor(logits.data[i])) for i in range(steps)], sweep


# ---------------------------------------------------------------------------
# PCA baseline


@dataclass
class PcaModel:
    mean: np.ndarray  # (D,)
    axes: np.ndarray  # (k, D), orthonormal rows, k <= 64
    eigenvalues: np.ndarray  # (k,), non-increasing
    downsample: int
    class_count: int


def _downsample_mean(arr, factor):
    if factor == 1:
        return arr
    sp = arr.shape[1:]
    trimmed = arr[
        (slice(None),) + tuple(slice(0, (n // factor) * factor) for n in sp)
    ]
    for axis in range(1, arr.ndim):
        shape = list(trimmed.shape)
        shape[axis] = shape[axis] // factor
        shape.insert(axis + 1, factor)
        trimmed = trimmed.reshape(shape).mean(axis=axis + 1)
    return trimmed


def _flatten_onehot(labelmap, factor, class_count):
    hot = one_hot(labelmap.data, class_count).data
    return _downsample_mean(hot, factor).reshape(-1)


def pca_fit(labelmaps, downsample=2, class_count=CLASS_COUNT):
    """Leading 64 principal axes of flattened, downsampled one-hot maps."""
    if len(labelmaps) < 2:
        raise ValueError("PCA needs at least 2 samples")
    rows = np.stack([_flatten_onehot(lm, downsample, class_count) for lm in labelmaps])
    mean = rows.mean(axis=0)
    centered = (rows - mean).astype(np.float64)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(CODE_DIM, len(svals))
    axes = vt[:k]
    eigenvalues = (svals[:k] ** 2) / (len(rows) - 1)
    return PcaModel(mean, axes, eigenvalues, downsample, class_count)


def pca_project(model, labelmap):
    """Projection onto the principal axes, zero-padded to 64 entries."""
    row = _flatten_onehot(labelmap, model.downsample, model.class_count)
    proj = model.axes @ (row - model.mean)
    out = np.zeros(CODE_DIM)
    out[: len(proj)] = proj
    return out


def pca_reconstruct(model, projection):
    k = model.axes.shape[0]
    return model.mean + projection[:k] @ model.axes


# ---------------------------------------------------------------------------
# bagged decision trees


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    label: int = 0


def _gini_best_split(x, y, n_classes):
    """Best (feature, threshold, score) over all axis-aligned splits."""
    n = len(y)
    best = (None, 0.0, np.inf)
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        ys = y[order]
        onehot = np.eye(n_classes)[ys]
        left_counts = np.cumsum(onehot, axis=0)  # counts after taking i+1 items
        total = left_counts[-1]
        # candidate split between i and i+1 where the value changes
        valid = np.nonzero(xs[:-1] < xs[1:])[0]
        if len(valid) == 0:
            continue
        nl = (valid + 1).astype(np.float64)
        nr = n - nl
        lc = left_counts[valid]
        rc = total - lc
        gini_l = 1.0 - ((lc / nl[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((rc / nr[:, None]) ** 2).sum(axis=1)
        score = (nl * gini_l + nr * gini_r) / n
        j = int(np.argmin(score))
        if score[j] < best[2] - 1e-12:
            thr = 0.5 * (xs[valid[j]] + xs[valid[j] + 1])
            best = (f, float(thr), float(score[j]))
    return best


def _grow_tree(x, y, depth, max_depth, n_classes):
    node = _TreeNode(label=int(np.bincount(y, minlength=n_classes).argmax()))
    if depth >= max_depth or len(np.unique(y)) == 1 or len(y) < 2:
        return node
    feature, threshold, score = _gini_best_split(x, y, n_classes)
    if feature is None:
        return node
    mask = x[:, feature] <= threshold
    if mask.all() or not mask.any():
        return node
    node.feature = feature
    node.threshold = threshold
    node.left = _grow_tree(x[mask], y[mask], depth + 1, max_depth, n_classes)
    node.right = _grow_tree(x[~mask], y[~mask], depth + 1, max_depth, n_classes)
    return node


def _tree_predict(node, x):
    out = np.empty(len(x), dtype=np.int64)
    idx = np.arange(len(x))

    def walk(node, idx):
        if node.feature < 0:
            out[idx] = node.label
            return
        mask = x[idx, node.feature] <= node.threshold
        walk(node.left, idx[mask])
        walk(node.right, idx[~mask])

    walk(node, idx)
    return out


@dataclass
class BaggedTrees:
    trees: list = field(default_factory=list)
    n_classes: int = 2

    def predict(self, x):
        votes = np.stack([_tree_predict(t, x) for t in self.trees])
        counts = np.apply_along_axis(
            lambda col: np.bincount(col, minlength=self.n_classes), 0, votes
        )
        return counts.argmax(axis=0)


def classify_codes(train_codes, train_labels, test_codes, test_labels=None,
                   n_trees=100, max_depth=3, seed=0):
    """Bagged shallow decision trees over code features, majority vote.

    Returns (predicted labels, accuracy or None). Deterministic per seed.
    """
    x_train = np.asarray(train_codes.values if isinstance(train_codes, CodeMatrix)
                         else train_codes, dtype=np.float64)
    y_train = np.asarray(train_labels, dtype=np.int64)
    classes = np.unique(y_train)
    if len(classes) < 2:
        raise ValueError("training labels contain a single class")
    n_classes = int(classes.max()) + 1
    x_test = np.asarray(test_codes.values if isinstance(test_codes, CodeMatrix)
                        else test_codes, dtype=np.float64)
    forest = BaggedTrees(n_classes=n_classes)
    n = len(x_train)
    for t in range(n_trees):
        rng = rng_for(seed, f"tree/{t}")
        idx = rng.integers(0, n, size=n)
        forest.trees.append(
            _grow_tree(x_train[idx], y_train[idx], 0, max_depth, n_classes)
        )
    pred = forest.predict(x_test)
    accuracy = None
    if test_labels is not None:
        accuracy = float((pred == np.asarray(test_labels)).mean())
    return pred, accuracy


# ---------------------------------------------------------------------------
# contractive penalty


def contractive_penalty(encode_fn, x0, probes=256, step=1e-3, seed=0):
    """Estimate ||J||_F^2 of `encode_fn` at x0 by central differences along
    random orthonormalised unit directions, scaled by the input dimension.

    Probe blocks are QR-orthonormalised, so with probes >= input size the
    estimate sums a complete basis and is exact up to finite-difference
    error.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    n = x0.size
    rng = rng_for(seed, "contractive")
    total = 0.0
    done = 0
    while done < probes:
        block = min(n, probes - done)
        raw = rng.standard_normal((n, block))
        q, _ = np.linalg.qr(raw)
        for j in range(block):
            v = q[:, j]
            f_plus = np.asarray(encode_fn(x0 + step * v), dtype=np.float64)
            f_minus = np.asarray(encode_fn(x0 - step * v), dtype=np.float64)
            jv = (f_plus - f_minus) / (2.0 * step)
            total += float((jv**2).sum())
        done += block
    return n * total / done


def encoder_contractive_penalty(encoder, labelmap, probes=256, step=1e-3, seed=0):
    """Contractive penalty of a built encoder at a one-hot label map input."""
    hot = one_hot(labelmap.data, CLASS_COUNT).data
    shape = hot.shape

    def encode_fn(flat):
        x = E.Tensor(flat.reshape((1,) + shape).astype(np.float32))
        return encoder.forward(x, training=False).data.reshape(-1)

    return contractive_penalty(encode_fn, hot.reshape(-1), probes, step, seed)
