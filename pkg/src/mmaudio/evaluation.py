"""Transfer learning on frozen embeddings and the benchmark metrics.

Metrics take ``scores`` of shape (n_samples, n_classes) and ``truths`` as a
multi-hot matrix of the same shape (a 1-D integer label vector is accepted
and one-hot encoded).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .engine import (
    AdamState,
    adam_step,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    l2_penalty,
    multilabel_bce,
    sigmoid,
    softmax_cross_entropy,
)
from .exceptions import InvalidInputError, UndefinedMetricError
from .frontend import FrontendConfig, Waveform, build_mel_filterbank, featurize_waveform
from .models import EMBEDDING_WIDTH

BENCHMARKS = ("esc50", "tut2018", "audioset_balanced")
# dropout per benchmark; ESC-50 uses the low end of the 0.3-0.5 range
BENCHMARK_DROPOUT = {"esc50": 0.3, "tut2018": 0.5, "audioset_balanced": 0.5}
TRANSFER_LR = 2e-4
TRANSFER_BATCH = 128
TRANSFER_L2 = 1e-6
ESC50_FOLDS = (1, 2, 3, 4, 5)


def _as_multihot(truths, n_classes):
    truths = np.asarray(truths)
    if truths.ndim == 1:
        out = np.zeros((len(truths), n_classes), dtype=bool)
        out[np.arange(len(truths)), truths.astype(int)] = True
        return out
    if truths.shape[1] != n_classes:
        raise InvalidInputError(f"truths have {truths.shape[1]} classes, scores {n_classes}")
    return truths.astype(bool)


def top_n(scores, truths, n):
    """Fraction of samples with at least one true label among their top-n scores.

    Ranking is by descending score, ties to the lower class id.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    truths = _as_multihot(truths, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind="stable")[:, :n]
    hits = np.take_along_axis(truths, order, axis=1).any(axis=1)
    return float(hits.mean())


def average_precision(scores, truth):
    """Non-interpolated AP for one category.

    Equals the mean, over positives, of the precision among all samples
    scoring at least as high; tied scores therefore share one precision.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise UndefinedMetricError("category has no positives")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    tp = np.cumsum(t)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_end = tp[ends]
    precision = tp_end / (ends + 1)
    new_pos = np.diff(np.r_[0, tp_end])
    return float(np.sum(new_pos * precision) / n_pos)


def mean_average_precision(scores, truths, per_class=False):
    scores = np.asarray(scores, dtype=np.float64)
    truths = _as_multihot(truths, scores.shape[1])
    aps = {}
    for c in range(scores.shape[1]):
        if truths[:, c].any():
            aps[c] = average_precision(scores[:, c], truths[:, c])
    if not aps:
        raise UndefinedMetricError("no category has a positive sample")
    value = float(np.mean(list(aps.values())))
    return (value, aps) if per_class else value


def binary_auc(scores, truth):
    """Mann-Whitney form of the ROC area; tied pairs count one half."""
    truth = np.asarray(truth, dtype=bool)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positives and negatives")
    ranks = rankdata(scores)
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, truths, per_class=False):
    """Macro-averaged ROC AUC over categories having both classes present."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = _as_multihot(truths, scores.shape[1])
    aucs = {}
    for c in range(scores.shape[1]):
        col = truths[:, c]
        if col.any() and not col.all():
            aucs[c] = binary_auc(scores[:, c], col)
    if not aucs:
        raise UndefinedMetricError("no category has both positives and negatives")
    value = float(np.mean(list(aucs.values())))
    return (value, aucs) if per_class else value


@dataclass
class EvalReport:
    top1: float
    top5: float
    map: float
    auc: float
    n_samples: int = 0
    per_class_ap: dict = field(default_factory=dict)
    per_class_auc: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.top1 <= self.top5 + 1e-15):
            raise InvalidInputError("top1 cannot exceed top5")

    def summary(self):
        return {"top1": self.top1, "top5": self.top5, "map": self.map, "auc": self.auc}


def _safe(fn, *args):
    try:
        return fn(*args, per_class=True)
    except UndefinedMetricError:
        return math.nan, {}


def evaluate_scores(scores, truths):
    scores = np.asarray(scores, dtype=np.float64)
    truths = _as_multihot(truths, scores.shape[1])
    mAP, aps = _safe(mean_average_precision, scores, truths)
    auc, aucs = _safe(roc_auc, scores, truths)
    return EvalReport(
        top_n(scores, truths, 1), top_n(scores, truths, min(5, scores.shape[1])), mAP, auc,
        len(scores), {int(k): v for k, v in aps.items()}, {int(k): v for k, v in aucs.items()},
    )


@dataclass
class EmbeddingSequence:
    vectors: np.ndarray  # (n_seconds, 128)
    clip_id: str = ""
    labels: tuple = ()

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != EMBEDDING_WIDTH:
            raise InvalidInputError(f"embeddings must be (n, {EMBEDDING_WIDTH})")


def extract_embeddings(network, clip, config: FrontendConfig | None = None, clip_id="", labels=(),
                       variant=None):
    """Per-second 128-d embeddings of a clip (Waveform or sequence of log-mel arrays)."""
    if variant is not None and network.spec.name != variant:
        raise InvalidInputError(f"network is {network.spec.name!r}, expected {variant!r}")
    if isinstance(clip, Waveform):
        config = config or FrontendConfig()
        fb = build_mel_filterbank(config.n_fft, config.n_mels, config.fmin, config.fmax)
        frames = np.stack([f.values for f in featurize_waveform(clip, config, fb)]) if clip.duration >= 1 else None
    else:
        frames = np.asarray(clip)
    if frames is None or len(frames) == 0:
        raise InvalidInputError("clip must be at least one second long")
    return EmbeddingSequence(network.embed(frames).astype(np.float64), clip_id, tuple(labels))


def concat_embeddings(sequences):
    """Stack fixed-length clips into (n_clips, n_seconds * 128)."""
    lengths = {len(s.vectors) for s in sequences}
    if len(lengths) != 1:
        raise InvalidInputError(f"ragged clip lengths {sorted(lengths)}; all clips must have equal length")
    return np.stack([s.vectors.reshape(-1) for s in sequences])


class TransferClassifier(ClassifierMixin, BaseEstimator):
    """Single dense layer over concatenated clip embeddings.

    Single-label targets (1-D ``y``) use softmax cross-entropy; multi-hot
    targets (2-D ``y``) use per-class sigmoid cross-entropy. Trained with
    Adam; dropout acts on the input features.

    Parameters
    ----------
    lr : float, default=2e-4
    batch_size : int, default=128
    l2 : float, default=1e-6
        Weight decay on the dense kernel.
    dropout : float, default=0.5
    epochs : int, default=100
    random_state : int, default=0
    """

    def __init__(self, lr=TRANSFER_LR, batch_size=TRANSFER_BATCH, l2=TRANSFER_L2, dropout=0.5, epochs=100,
                 random_state=0):
        self.lr = lr
        self.batch_size = batch_size
        self.l2 = l2
        self.dropout = dropout
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        self.multilabel_ = y.ndim == 2
        if self.multilabel_:
            self.classes_ = np.arange(y.shape[1])
            targets = y.astype(np.float64)
        else:
            self.classes_, targets = np.unique(y, return_inverse=True)
        if len(y) != len(X):
            raise InvalidInputError("X and y differ in length")
        n_out = len(self.classes_)
        rng = np.random.default_rng(self.random_state)
        limit = math.sqrt(6.0 / X.shape[1])
        self.params_ = {
            "kernel": rng.uniform(-limit, limit, size=(X.shape[1], n_out)),
            "bias": np.zeros(n_out),
        }
        adam = AdamState.for_params(self.params_, lr=self.lr)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            losses = []
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                xb, mask = dropout_forward(X[idx], self.dropout, "train", rng)
                logits, cache = dense_forward(xb, self.params_["kernel"], self.params_["bias"])
                if self.multilabel_:
                    loss, grad = multilabel_bce(logits, targets[idx])
                else:
                    loss, grad = softmax_cross_entropy(logits, targets[idx])
                _, gw, gb = dense_backward(grad, cache)
                _, reg = l2_penalty(self.params_, self.l2, ["kernel"])
                adam_step(self.params_, {"kernel": gw + reg["kernel"], "bias": gb}, adam)
                losses.append(loss)
            self.loss_curve_.append(float(np.mean(losses)))
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def n_weights(self):
        check_is_fitted(self, "params_")
        return self.params_["kernel"].size + self.params_["bias"].size

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return dense_forward(X, self.params_["kernel"], self.params_["bias"])[0]

    def predict_proba(self, X):
        z = self.decision_function(X)
        if self.multilabel_:
            return sigmoid(z)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        if self.multilabel_:
            return (z >= 0).astype(int)
        return self.classes_[np.argmax(z, axis=1)]


@dataclass
class EmbeddingDataset:
    """Clip-level features for a benchmark.

    ``X`` is (n_clips, n_seconds * 128); ``y`` is a 1-D class index vector
    or a 2-D multi-hot matrix; ``tags`` holds a fold number (esc50) or a
    split name per clip.
    """

    X: np.ndarray
    y: np.ndarray
    tags: np.ndarray
    clip_ids: tuple = ()
    class_names: tuple = ()

    def save(self, path):
        np.savez(path, X=self.X, y=self.y, tags=np.asarray(self.tags).astype(str),
                 clip_ids=np.asarray(self.clip_ids, dtype=str), class_names=np.asarray(self.class_names, dtype=str))

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["X"], z["y"], z["tags"], tuple(z["clip_ids"]), tuple(z["class_names"]))


@dataclass
class ProtocolReport:
    benchmark: str
    mean: EvalReport
    runs: list  # (held-out tag, EvalReport)

    def to_dict(self):
        return {
            "format_version": 1,
            "benchmark": self.benchmark,
            "mean": self.mean.summary(),
            "runs": [{"heldout": str(tag), **rep.summary(), "n_samples": rep.n_samples} for tag, rep in self.runs],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_text(self):
        lines = [f"benchmark: {self.benchmark}", f"{'run':<12}{'top1':>9}{'top5':>9}{'mAP':>9}{'AUC':>9}{'n':>7}"]
        for tag, r in self.runs:
            lines.append(f"{str(tag):<12}{r.top1:>9.4f}{r.top5:>9.4f}{r.map:>9.4f}{r.auc:>9.4f}{r.n_samples:>7}")
        m = self.mean
        lines.append(f"{'mean':<12}{m.top1:>9.4f}{m.top5:>9.4f}{m.map:>9.4f}{m.auc:>9.4f}")
        return "\n".join(lines) + "\n"


def _mean_report(reports):
    keys = ("top1", "top5", "map", "auc")
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return EvalReport(n_samples=sum(r.n_samples for r in reports), **vals)


def _splits(benchmark, tags):
    tags = np.asarray(tags).astype(str)
    if benchmark == "esc50":
        folds = [str(f) for f in ESC50_FOLDS]
        missing = [f for f in folds if f not in set(tags)]
        if missing:
            raise InvalidInputError(f"esc50 protocol needs folds 1-5; missing {missing}")
        return [(int(f), tags != f, tags == f) for f in folds]
    if benchmark == "tut2018":
        train, test = tags == "train", tags == "eval"
    elif benchmark == "audioset_balanced":
        train, test = tags == "balanced_train", tags == "eval"
    else:
        raise InvalidInputError(f"unknown benchmark {benchmark!r}; expected one of {BENCHMARKS}")
    if not train.any() or not test.any():
        raise InvalidInputError(f"{benchmark}: missing split assignments")
    return [("eval", train, test)]


def run_protocol(benchmark, data: EmbeddingDataset, head_params=None):
    """Train/evaluate transfer heads under a benchmark's fold protocol.

    esc50: five leave-one-fold-out runs, reported individually and averaged.
    tut2018: train on ``train``, evaluate on ``eval``. audioset_balanced:
    train on ``balanced_train`` only, evaluate on ``eval``.
    """
    params = {"dropout": BENCHMARK_DROPOUT.get(benchmark, 0.5)}
    params.update(head_params or {})
    runs = []
    n_classes = data.y.shape[1] if data.y.ndim == 2 else int(data.y.max()) + 1
    for tag, train, test in _splits(benchmark, data.tags):
        clf = TransferClassifier(**params).fit(data.X[train], data.y[train])
        scores = np.zeros((int(test.sum()), n_classes))
        # columns follow the global class ids, even if a class is absent from training
        scores[:] = -np.inf if not clf.multilabel_ else 0.0
        scores[:, clf.classes_] = clf.decision_function(data.X[test])
        runs.append((tag, evaluate_scores(np.nan_to_num(scores, neginf=-1e300), data.y[test])))
    return ProtocolReport(benchmark, _mean_report([r for _, r in runs]), runs)


def make_separable_benchmark(n_classes=50, per_class=40, n_seconds=5, folds=ESC50_FOLDS, seed=0, noise=0.05,
                             multilabel=False):
    """Synthetic embedding set whose classes are linearly separable.

    Each class owns a random unit direction in the concatenated embedding
    space; clips are that direction scaled to norm ``n_seconds`` plus
    isotropic noise. Fold tags cycle through ``folds`` within each class.
    """
    rng = np.random.default_rng(seed)
    dim = n_seconds * EMBEDDING_WIDTH
    centers = rng.standard_normal((n_classes, dim))
    centers *= n_seconds / np.linalg.norm(centers, axis=1, keepdims=True)
    X, y, tags = [], [], []
    for c in range(n_classes):
        for k in range(per_class):
            X.append(centers[c] + noise * rng.standard_normal(dim))
            y.append(c)
            tags.append(folds[k % len(folds)])
    X, y, tags = np.array(X), np.array(y), np.array(tags)
    if multilabel:
        y = np.eye(n_classes, dtype=int)[y]
    return EmbeddingDataset(X, y, tags.astype(str), tuple(f"clip{i:05d}" for i in range(len(X))),
                            tuple(f"class{c:02d}" for c in range(n_classes)))
