"""Linear evaluation of learned features.

A one-vs-rest linear SVM with squared hinge loss, trained by full-batch
gradient descent with Armijo backtracking, scores the fused
discriminator features (or raw pixels, for a baseline) under stratified
k-fold cross-validation. The solver is deterministic: zero
initialization, no sampling, and the backtracking rule guarantees the
objective never increases between epochs.

Accuracies are reported in percent (0-100) throughout, matching the
usual "mean +/- std" table convention.

Feature files ("FEAT"): u32 record count, u32 dimension, then per
record a u32 label followed by the float32 feature vector,
little-endian throughout.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .ioutil import atomic_open
from .model import fuse_features

FEAT_MAGIC = b"FEAT"


@dataclass
class FeatureVector:
    values: np.ndarray
    label: int
    source_id: int


def extract_features(disc, images, batch_size=64, fusion_depth=None):
    """Fused discriminator features for (N, C, H, W) images, inference mode.

    ``fusion_depth`` defaults to the depth the discriminator was built
    with; passing another value re-fuses the same stage activations at
    that depth (the head is ignored). Batches only bound memory:
    inference-mode batch norm uses running statistics, so results do
    not depend on the partitioning.
    """
    images = np.asarray(images)
    depth = disc.cfg.fusion_depth if fusion_depth is None else int(fusion_depth)
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        out = disc.forward(Tensor(images[start : start + batch_size]), training=False)
        if depth == disc.cfg.fusion_depth:
            chunks.append(out.features.data)
        else:
            chunks.append(fuse_features(out.stage_activations, depth).data)
    return np.concatenate(chunks, axis=0)


def as_feature_vectors(features, labels):
    return [
        FeatureVector(values=features[i], label=int(labels[i]), source_id=i)
        for i in range(len(labels))
    ]


def save_features(path, features, labels):
    feats = np.ascontiguousarray(features, dtype="<f4")
    labels = np.asarray(labels)
    if feats.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {feats.shape}")
    if labels.shape != (feats.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {feats.shape[0]} records")
    if labels.size and (labels.min() < 0 or not np.issubdtype(labels.dtype, np.integer)):
        raise ValueError("labels must be non-negative integers")
    n, d = feats.shape
    head = [FEAT_MAGIC, struct.pack("<II", n, d)]
    body = np.empty((n, d + 1), dtype="<u4")
    body[:, 0] = labels.astype("<u4")
    body[:, 1:] = feats.view("<u4")
    with atomic_open(path) as fh:
        fh.write(b"".join(head))
        fh.write(body.tobytes())


def load_features(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FEAT_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    if len(data) < 12:
        raise ValueError(f"{path}: truncated feature file header")
    n, d = struct.unpack("<II", data[4:12])
    need = 12 + n * (4 + 4 * d)
    if len(data) < need:
        raise ValueError(f"{path}: truncated feature file, expected {n} records of dim {d}")
    body = np.frombuffer(data, dtype="<u4", count=n * (d + 1), offset=12).reshape(n, d + 1)
    labels = body[:, 0].astype(np.int64)
    feats = body[:, 1:].copy().view("<f4").astype(np.float32)
    return feats, labels


# ---------------------------------------------------------------------------
# squared-hinge SVM, one-vs-rest
# ---------------------------------------------------------------------------

@dataclass
class SvmModel:
    """Per-class weights/biases; prediction is argmax of w_c . x + b_c."""

    classes: np.ndarray
    weights: np.ndarray  # (K, D)
    biases: np.ndarray  # (K,)
    c_reg: float
    tol: float
    max_epochs: int
    objective_histories: list
    stop_reasons: list
    epochs_run: list

    @property
    def dim(self):
        return self.weights.shape[1]

    def decision(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"features have dim {x.shape[1:]}, model expects {self.dim}")
        return x @ self.weights.T + self.biases


def svm_objective(w, b, x, y, c_reg):
    margin = np.maximum(0.0, 1.0 - y * (x @ w + b))
    return 0.5 * float(w @ w) + c_reg * float(margin @ margin)


def _solve_binary(x, y, c_reg, tol, max_epochs):
    """GD + Armijo backtracking on the smooth squared-hinge objective."""
    w = np.zeros(x.shape[1])
    b = 0.0
    obj = svm_objective(w, b, x, y, c_reg)
    history = [obj]
    step = 1.0 / max(1.0, c_reg * float((x * x).sum(axis=1).mean()))
    stop = "iteration_cap"
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        margin = np.maximum(0.0, 1.0 - y * (x @ w + b))
        gw = w - 2.0 * c_reg * (x.T @ (y * margin))
        gb = -2.0 * c_reg * float(y @ margin)
        gnorm2 = float(gw @ gw) + gb * gb
        if gnorm2 <= 1e-24:
            stop = "gradient_stationary"
            break
        step = min(step * 2.0, 1e6)  # optimistic growth, then backtrack
        while True:
            new_obj = svm_objective(w - step * gw, b - step * gb, x, y, c_reg)
            if new_obj <= obj - 1e-4 * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-20:
                break
        if step < 1e-20:
            stop = "step_underflow"
            break
        w = w - step * gw
        b = b - step * gb
        prev, obj = obj, new_obj
        history.append(obj)
        if prev - obj <= tol * max(1.0, abs(prev)):
            stop = "tolerance"
            break
    return w, float(b), history, stop, epoch


def train_svm(features, labels, c_reg=1.0, tol=1e-8, max_epochs=500):
    """One-vs-rest L2-SVM over integer class labels."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    if c_reg <= 0:
        raise ValueError(f"regularization C must be positive, got {c_reg}")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError(f"need at least 2 classes, got {classes.size}")
    weights = np.zeros((classes.size, x.shape[1]))
    biases = np.zeros(classes.size)
    histories, stops, epochs = [], [], []
    for i, c in enumerate(classes):
        y = np.where(labels == c, 1.0, -1.0)
        w, b, hist, stop, ep = _solve_binary(x, y, c_reg, tol, max_epochs)
        weights[i], biases[i] = w, b
        histories.append(hist)
        stops.append(stop)
        epochs.append(ep)
    return SvmModel(
        classes=classes,
        weights=weights,
        biases=biases,
        c_reg=float(c_reg),
        tol=float(tol),
        max_epochs=int(max_epochs),
        objective_histories=histories,
        stop_reasons=stops,
        epochs_run=epochs,
    )


def predict(model, features):
    """Argmax of per-class decisions; ties go to the lowest class id."""
    scores = model.decision(features)
    return model.classes[np.argmax(scores, axis=1)]


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def stratified_folds(labels, k, seed=0):
    """k folds with per-class counts balanced to within one sample.

    Each class's indices are shuffled by a seed-derived stream and
    dealt into k chunks; fold i tests on chunk i of every class.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    classes = np.unique(labels)
    per_class_chunks = {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ValueError(f"class {c} has only {idx.size} samples, fewer than k={k}")
        rng = np.random.default_rng([int(seed), 20, int(c)])
        per_class_chunks[int(c)] = np.array_split(rng.permutation(idx), k)
    folds = []
    for f in range(k):
        test = np.sort(np.concatenate([per_class_chunks[int(c)][f] for c in classes]))
        mask = np.ones(labels.size, dtype=bool)
        mask[test] = False
        folds.append((np.flatnonzero(mask), test))
    return folds


def per_class_accuracy(classes, fold_confusions):
    """Per-fold diagonal/row-sum accuracies -> {class: {mean, std}} in percent."""
    if not fold_confusions:
        raise ValueError("need at least one fold")
    out = {}
    for i, c in enumerate(classes):
        accs = []
        for cm in fold_confusions:
            row = cm[i].sum()
            if row == 0:
                raise ValueError(f"class {c} has no test samples in some fold")
            accs.append(100.0 * cm[i, i] / row)
        out[int(c)] = {"mean": float(np.mean(accs)), "std": float(np.std(accs))}
    return out


@dataclass
class CvReport:
    classes: np.ndarray
    fold_accuracies: list  # percent
    overall_mean: float  # percent, mean of fold accuracies
    overall_std: float  # percent, population std of fold accuracies
    overall_accuracy: float  # percent, trace/total of the summed confusion
    per_class: dict  # {class: {"mean": %, "std": %}}
    confusion: np.ndarray  # summed over folds; rows = true class
    fold_confusions: list
    fold_predictions: list  # (test_indices, predicted labels) per fold
    c_reg: float = 1.0
    k: int = 5

    def to_dict(self):
        return {
            "k": self.k,
            "c_reg": self.c_reg,
            "classes": [int(c) for c in self.classes],
            "fold_accuracies": [float(a) for a in self.fold_accuracies],
            "overall_mean": float(self.overall_mean),
            "overall_std": float(self.overall_std),
            "overall_accuracy": float(self.overall_accuracy),
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "confusion": self.confusion.tolist(),
        }


def cross_validate(features, labels, k=5, c_reg=1.0, seed=0, tol=1e-8, max_epochs=500,
                   standardize=False):
    """Stratified k-fold CV of the one-vs-rest SVM; accuracies in percent.

    ``standardize`` fits per-dimension mean/std on each training fold
    and applies it to both splits (never fit on test data). The summed
    confusion matrix has rows = true class in ``classes`` order; each
    row sums to that class's total test count.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    index = {int(c): i for i, c in enumerate(classes)}
    fold_confusions = []
    fold_predictions = []
    fold_acc = []
    for train_idx, test_idx in stratified_folds(labels, k, seed=seed):
        xtr, xte = features[train_idx], features[test_idx]
        if standardize:
            mu = xtr.mean(axis=0)
            sd = np.maximum(xtr.std(axis=0), 1e-8)
            xtr = (xtr - mu) / sd
            xte = (xte - mu) / sd
        model = train_svm(xtr, labels[train_idx], c_reg=c_reg, tol=tol, max_epochs=max_epochs)
        pred = predict(model, xte)
        truth = labels[test_idx]
        fold_acc.append(100.0 * float(np.mean(pred == truth)))
        cm = np.zeros((classes.size, classes.size), dtype=np.int64)
        for t, p in zip(truth, pred):
            cm[index[int(t)], index[int(p)]] += 1
        fold_confusions.append(cm)
        fold_predictions.append((test_idx, pred))
    confusion = np.sum(fold_confusions, axis=0)
    return CvReport(
        classes=classes,
        fold_accuracies=fold_acc,
        overall_mean=float(np.mean(fold_acc)),
        overall_std=float(np.std(fold_acc)),
        overall_accuracy=100.0 * float(np.trace(confusion)) / float(confusion.sum()),
        per_class=per_class_accuracy(classes, fold_confusions),
        confusion=confusion,
        fold_confusions=fold_confusions,
        fold_predictions=fold_predictions,
        c_reg=c_reg,
        k=k,
    )
