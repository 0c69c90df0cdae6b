"""Training harness: augmentation, epoch loop, learning-rate schedule,
checkpointing and validation monitoring.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .annotate import N_FOLDS, VideoAnnotation
from .engine import AdamState, adam_step, l2_penalty, load_checkpoint, lr_at_epoch, multilabel_bce, save_checkpoint
from .exceptions import InvalidConfigError, InvalidInputError, NonFiniteError
from .frontend import LogMelFrame
from .models import N_CLASSES, Network, build_variant

logger = logging.getLogger(__name__)

PAPER_BATCH_SIZE = 1024
PAPER_BATCH_SIZE_MOBILENET = 2048
VISUAL_SUBSAMPLE = 5
METRIC_COLUMNS = ("epoch", "lr", "train_loss", "val_top1", "val_map")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.9
    batch_size: int = 32
    l2: float = 1.0
    epochs: int = 1
    seed: int = 0
    val_fraction: float = 1 / 15

    def __post_init__(self):
        if self.lr0 <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfigError("lr0, batch_size and epochs must be positive")
        if not 0 < self.decay <= 1:
            raise InvalidConfigError("decay must lie in (0, 1]")
        if self.l2 < 0:
            raise InvalidConfigError("l2 must be non-negative")
        if not 0 <= self.val_fraction < 1:
            raise InvalidConfigError("val_fraction must lie in [0, 1)")

    def lr(self, epoch):
        return lr_at_epoch(self.lr0, self.decay, epoch)


@dataclass
class TrainingExample:
    spectrogram: np.ndarray  # (100, 64)
    target: np.ndarray  # multi-hot over the output vocabulary
    uuid: str = ""
    offset: float = 0.0


class SkipRecord(Exception):
    """The record cannot produce a training example (e.g. shorter than 1 s)."""


class LabelIndex:
    """Maps joint-vocabulary label ids onto output columns of the network head."""

    def __init__(self, label_ids, n_outputs=N_CLASSES):
        ids = sorted(set(int(i) for i in label_ids))
        if len(ids) > n_outputs:
            raise InvalidConfigError(f"{len(ids)} distinct labels exceed the {n_outputs}-unit head")
        self.ids = ids
        self.n_outputs = n_outputs
        self._column = {lab: col for col, lab in enumerate(ids)}

    @classmethod
    def from_annotations(cls, annotations, n_outputs=N_CLASSES):
        ids = set()
        for ann in annotations:
            ids.update(ann.visual_labels)
            ids.update(ann.audio_labels)
        return cls(ids, n_outputs)

    def encode(self, label_ids):
        target = np.zeros(self.n_outputs, dtype=np.float32)
        for lab in label_ids:
            target[self._column[int(lab)]] = 1.0
        return target


def _frames_array(frames):
    if len(frames) and isinstance(frames[0], LogMelFrame):
        return np.stack([f.values for f in frames])
    return np.asarray(frames)


def augment(annotation: VideoAnnotation, frames, rng, label_index: LabelIndex):
    """One training example: a uniformly chosen 1 s segment labelled with
    5 random visual labels plus every audio label of its video."""
    frames = _frames_array(frames)
    if len(frames) < 1:
        raise SkipRecord(f"{annotation.uuid}: shorter than one second")
    if len(annotation.visual_labels) < VISUAL_SUBSAMPLE:
        raise InvalidInputError(f"{annotation.uuid}: needs at least {VISUAL_SUBSAMPLE} visual labels")
    seg = int(rng.integers(len(frames)))
    visual = rng.choice(np.asarray(annotation.visual_labels), VISUAL_SUBSAMPLE, replace=False)
    labels = [int(v) for v in visual] + list(annotation.audio_labels)
    return TrainingExample(frames[seg], label_index.encode(labels), annotation.uuid, float(seg))


class ArrayDataset:
    """Fixed spectrogram/target pairs (no augmentation)."""

    def __init__(self, X, Y):
        self.X = np.asarray(X)
        self.Y = np.asarray(Y, dtype=np.float32)
        if len(self.X) != len(self.Y):
            raise InvalidInputError("X and Y differ in length")

    def __len__(self):
        return len(self.X)

    def example(self, index, rng):
        return TrainingExample(self.X[index], self.Y[index])


class VideoDataset:
    """Annotated videos with their per-second log-mel frames; augments on every draw."""

    def __init__(self, annotations, frames, label_index: LabelIndex):
        self.annotations = list(annotations)
        self.frames = [_frames_array(f) for f in frames]
        self.label_index = label_index
        if len(self.annotations) != len(self.frames):
            raise InvalidInputError("annotations and frames differ in length")

    def __len__(self):
        return len(self.annotations)

    def example(self, index, rng):
        return augment(self.annotations[index], self.frames[index], rng, self.label_index)

    def validation_arrays(self):
        """First segment of each video, labelled with its full label set."""
        X = np.stack([f[0] for f in self.frames])
        Y = np.stack([self.label_index.encode(a.visual_labels + a.audio_labels) for a in self.annotations])
        return X, Y


def split_by_fold(annotations, val_fraction):
    """Validation = folds below ``round(4096 * val_fraction)``."""
    cut = int(round(N_FOLDS * val_fraction))
    train = [i for i, a in enumerate(annotations) if a.fold >= cut]
    val = [i for i, a in enumerate(annotations) if a.fold < cut]
    return train, val


def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng([seed, epoch, stream])


@dataclass
class TrainingHistory:
    rows: list = field(default_factory=list)  # dicts keyed by METRIC_COLUMNS
    step_losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    best_checkpoint: str | None = None
    visited: list = field(default_factory=list)  # per-epoch index order

    def metric_log(self):
        return "".join(format_metric_row(r) + "\n" for r in self.rows)


def format_metric_row(row):
    return "\t".join([str(row["epoch"]), repr(row["lr"]), repr(row["train_loss"]),
                      repr(row["val_top1"]), repr(row["val_map"])])


def evaluate_network(network: Network, X, Y, batch_size=64):
    """Top-1 and mAP over a validation set, always in infer mode."""
    from .evaluation import mean_average_precision, top_n
    from .exceptions import UndefinedMetricError

    if len(X) == 0:
        return math.nan, math.nan
    scores = np.concatenate([network.forward(X[i:i + batch_size], mode="infer")
                             for i in range(0, len(X), batch_size)])
    top1 = top_n(scores, Y, 1)
    try:
        mAP = mean_average_precision(scores, Y)
    except UndefinedMetricError:
        mAP = math.nan
    return top1, mAP


def training_step(network: Network, adam: AdamState, X, Y, lr, l2, rng=None):
    """Forward, loss (mean sigmoid cross-entropy + l2 * sum w^2), backward, Adam.

    Returns the data term of the loss measured before the update.
    """
    buffers = dict(network.buffers)
    logits = network.forward(X, mode="train", rng=rng, check_finite=False)
    loss, grad = multilabel_bce(logits, Y)
    if not math.isfinite(loss):
        # rerun with per-layer checks to name the first offending layer
        network.buffers = buffers
        network.forward(X, mode="train", rng=rng, check_finite=True)
        raise NonFiniteError("non-finite loss", layer="loss")
    grads = network.backward(grad.astype(network.dtype))
    if l2:
        _, reg = l2_penalty(network.params, l2, network.weight_names)
        for name, g in reg.items():
            grads[name] = grads[name] + g
    adam_step(network.params, grads, adam, lr=lr)
    return loss


def run_training(network: Network, dataset, config: TrainConfig, out_dir=None, val=None,
                 adam: AdamState | None = None, start_epoch=0, meta=None, max_steps=None,
                 stop_loss=None):
    """Epoch loop over ``dataset`` (anything with ``__len__`` and ``example(i, rng)``).

    Each epoch shuffles the examples with a generator derived from
    ``(seed, epoch)``, so resuming from an epoch checkpoint replays exactly
    the batches an uninterrupted run would have seen. ``val`` is an optional
    ``(X, Y)`` pair scored in infer mode after each epoch.
    """
    adam = adam or AdamState.for_params(network.params, lr=config.lr0)
    history = TrainingHistory()
    best_map = -math.inf
    n = len(dataset)
    if n == 0:
        raise InvalidInputError("empty training set")
    steps = 0
    meta = dict(meta or {})
    meta["train_config"] = asdict(config)
    for epoch in range(start_epoch, config.epochs):
        lr = config.lr(epoch)
        adam.lr = lr
        order_rng = _epoch_rng(config.seed, epoch, 0)
        aug_rng = _epoch_rng(config.seed, epoch, 1)
        drop_rng = _epoch_rng(config.seed, epoch, 2)
        order = order_rng.permutation(n)
        history.visited.append(order.tolist())
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = [dataset.example(int(i), aug_rng) for i in order[start:start + config.batch_size]]
            X = np.stack([ex.spectrogram for ex in batch])
            Y = np.stack([ex.target for ex in batch])
            try:
                loss = training_step(network, adam, X, Y, lr, config.l2, drop_rng)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} batch {b}: {exc} (layer {exc.layer})",
                                     layer=exc.layer, batch=b) from exc
            losses.append(loss)
            history.step_losses.append(loss)
            steps += 1
            if (max_steps is not None and steps >= max_steps) or (stop_loss is not None and loss < stop_loss):
                break
        top1, mAP = evaluate_network(network, *val) if val is not None else (math.nan, math.nan)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_top1": top1, "val_map": mAP}
        history.rows.append(row)
        logger.info(format_metric_row(row))
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, f"epoch_{epoch:04d}.ckpt")
            save_checkpoint(path, network.params, network.buffers, adam, epoch + 1, meta)
            history.checkpoints.append(path)
            with open(os.path.join(out_dir, "metrics.tsv"), "a", encoding="utf-8") as fh:
                fh.write(format_metric_row(row) + "\n")
            if not math.isnan(mAP) and mAP > best_map:
                best_map = mAP
                history.best_checkpoint = os.path.join(out_dir, "best.ckpt")
                save_checkpoint(history.best_checkpoint, network.params, network.buffers, adam, epoch + 1, meta)
        if (max_steps is not None and steps >= max_steps) or (stop_loss is not None and losses[-1] < stop_loss):
            break
    return history


def network_meta(spec):
    return {"variant": spec.name, "width_divisor": spec.width_divisor, "n_classes": spec.n_classes}


def load_network(path, variant=None):
    """Rebuild a Network (and its Adam state / epoch) from a checkpoint."""
    ckpt = load_checkpoint(path)
    meta = ckpt["meta"]
    if variant is not None and meta.get("variant") != variant:
        raise InvalidConfigError(f"checkpoint holds {meta.get('variant')!r}, expected {variant!r}")
    spec = build_variant(meta["variant"], n_classes=meta["n_classes"], width_divisor=meta["width_divisor"])
    dtype = next(iter(ckpt["params"].values())).dtype
    net = Network(spec, dtype=dtype, params=ckpt["params"], buffers=ckpt["buffers"])
    return net, ckpt["adam"], ckpt["epoch"], meta


class VGGishEstimator(TransformerMixin, BaseEstimator):
    """Scikit-learn style wrapper around a VGGish-family network.

    ``fit(X, Y)`` trains on spectrograms ``X`` (n, 100, 64) with multi-hot
    targets ``Y`` (n, n_classes); ``predict_proba`` returns sigmoid outputs and
    ``transform`` returns the 128-d embeddings.

    Parameters
    ----------
    variant : {"vggish_base", "vggish_bn", "vggish_fullconv"}
    width_divisor : int
        Divides the trunk and 4096-wide layers; 1 is the full network.
    lr, decay, l2, batch_size, epochs, random_state
        Optimisation settings; ``lr`` decays by ``decay`` after every epoch.
    """

    def __init__(self, variant="vggish_fullconv", width_divisor=1, lr=1e-4, decay=0.9, l2=1.0,
                 batch_size=32, epochs=1, random_state=0, dtype="float32"):
        self.variant = variant
        self.width_divisor = width_divisor
        self.lr = lr
        self.decay = decay
        self.l2 = l2
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.dtype = dtype

    def fit(self, X, Y):
        X = np.asarray(X, dtype=self.dtype)
        Y = np.asarray(Y, dtype=np.float32)
        if X.ndim != 3 or X.shape[1:] != (100, 64):
            raise InvalidInputError(f"X must be (n, 100, 64), got {X.shape}")
        if Y.ndim != 2 or len(Y) != len(X):
            raise InvalidInputError("Y must be a (n, n_classes) multi-hot matrix")
        spec = build_variant(self.variant, n_classes=Y.shape[1], width_divisor=self.width_divisor)
        self.network_ = Network(spec, seed=self.random_state, dtype=self.dtype)
        config = TrainConfig(lr0=self.lr, decay=self.decay, batch_size=self.batch_size, l2=self.l2,
                             epochs=self.epochs, seed=self.random_state)
        self.history_ = run_training(self.network_, ArrayDataset(X, Y), config)
        self.n_classes_ = Y.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_proba(np.asarray(X, dtype=self.dtype))

    def predict(self, X, threshold=0.5):
        return (self.predict_proba(X) >= threshold).astype(int)

    def transform(self, X):
        check_is_fitted(self, "network_")
        return self.network_.embed(np.asarray(X, dtype=self.dtype))
