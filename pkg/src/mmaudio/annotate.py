"""Machine annotation of short videos.

Frame-level visual predictions (3 frames per second) and per-second audio
predictions are averaged per video. The visual label set is the top 10 of
the averaged vector; the audio label set is the top 5 filtered by a fixed
threshold, with the argmax kept when nothing passes. Videos are assigned to
one of 4,096 folds by hashing their UUID.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Protocol

import numpy as np

from .exceptions import DataIntegrityError, InvalidConfigError, InvalidInputError

logger = logging.getLogger(__name__)

N_VISUAL = 11166
N_AUDIO = 527
N_FOLDS = 4096
N_VISUAL_LABELS = 10
MAX_AUDIO_LABELS = 5
FRAMES_PER_SECOND = 3
DEFAULT_THRESHOLD = 0.1
MANIFEST_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_UUID_RE = re.compile(r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple
    modalities: tuple  # "visual" / "audio" per id

    def __post_init__(self):
        if len(self.names) != len(self.modalities):
            raise DataIntegrityError("names and modalities differ in length")
        if any(m not in ("visual", "audio") for m in self.modalities):
            raise DataIntegrityError("modality must be 'visual' or 'audio'")

    @classmethod
    def standard(cls):
        names = [f"visual_{i:05d}" for i in range(N_VISUAL)] + [f"audio_{i:03d}" for i in range(N_AUDIO)]
        return cls(tuple(names), ("visual",) * N_VISUAL + ("audio",) * N_AUDIO)

    def __len__(self):
        return len(self.names)

    @property
    def visual_ids(self):
        return [i for i, m in enumerate(self.modalities) if m == "visual"]

    @property
    def audio_ids(self):
        return [i for i, m in enumerate(self.modalities) if m == "audio"]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("id\tmodality\tname\n")
            for i, (name, mod) in enumerate(zip(self.names, self.modalities)):
                fh.write(f"{i}\t{mod}\t{name}\n")

    @classmethod
    def load(cls, path):
        names, mods = [], []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if header != ["id", "modality", "name"]:
                raise DataIntegrityError(f"{path}: bad vocabulary header {header}")
            for lineno, line in enumerate(fh, start=2):
                idx, mod, name = line.rstrip("\n").split("\t")
                if int(idx) != len(names):
                    raise DataIntegrityError(f"{path}:{lineno}: ids must be dense and ordered")
                names.append(name)
                mods.append(mod)
        return cls(tuple(names), tuple(mods))


@dataclass(frozen=True)
class VideoRecord:
    uuid: str
    duration: float
    media: str = ""

    @property
    def n_frames(self):
        return int(round(self.duration * FRAMES_PER_SECOND))

    @property
    def n_segments(self):
        return int(math.floor(self.duration))


@dataclass(frozen=True)
class VideoAnnotation:
    uuid: str
    visual_labels: tuple
    audio_labels: tuple
    fold: int

    def check(self, vocab: LabelVocabulary | None = None):
        if len(self.visual_labels) != N_VISUAL_LABELS:
            raise DataIntegrityError(f"{self.uuid}: expected {N_VISUAL_LABELS} visual labels")
        if not 1 <= len(self.audio_labels) <= MAX_AUDIO_LABELS:
            raise DataIntegrityError(f"{self.uuid}: expected 1-{MAX_AUDIO_LABELS} audio labels")
        ids = list(self.visual_labels) + list(self.audio_labels)
        if len(set(ids)) != len(ids):
            raise DataIntegrityError(f"{self.uuid}: duplicate label ids")
        if not 0 <= self.fold < N_FOLDS:
            raise DataIntegrityError(f"{self.uuid}: fold out of range")
        if vocab is not None:
            for i in self.visual_labels:
                if vocab.modalities[i] != "visual":
                    raise DataIntegrityError(f"{self.uuid}: id {i} is not a visual label")
            for i in self.audio_labels:
                if vocab.modalities[i] != "audio":
                    raise DataIntegrityError(f"{self.uuid}: id {i} is not an audio label")
        return self

    def to_json(self):
        doc = {
            "format_version": MANIFEST_VERSION,
            "uuid": self.uuid,
            "fold": self.fold,
            "visual_labels": list(self.visual_labels),
            "audio_labels": list(self.audio_labels),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, line):
        doc = json.loads(line)
        if doc.get("format_version") != MANIFEST_VERSION:
            raise DataIntegrityError(f"unsupported manifest version {doc.get('format_version')}")
        return cls(doc["uuid"], tuple(doc["visual_labels"]), tuple(doc["audio_labels"]), int(doc["fold"]))


def _as_preds(preds):
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[0] < 1:
        raise InvalidInputError("predictions must be a non-empty (n, vocab) array")
    return preds


def _top_means(preds, k):
    """The ``k`` best (id, mean) pairs, best first, ties to the lower id.

    Means are correctly rounded (``math.fsum``), so they do not depend on row
    order. A fast sorted-column sum screens candidates; only ids that could
    reach the top ``k`` within its error bound are summed exactly.
    """
    n = preds.shape[0]
    approx = np.sort(preds, axis=0).sum(axis=0) / n
    k = min(k, approx.shape[0])
    kth = np.partition(approx, -k)[-k]
    tol = 4 * n * np.finfo(np.float64).eps * float(np.max(np.abs(preds))) + 1e-300
    cand = np.flatnonzero(approx >= kth - 2 * tol)
    exact = sorted((-(math.fsum(preds[:, j]) / n), int(j)) for j in cand)
    return [(j, -m) for m, j in exact[:k]]


def aggregate_visual(frame_preds, k=N_VISUAL_LABELS):
    """Indices of the ``k`` highest frame-averaged probabilities, best first."""
    preds = _as_preds(frame_preds)
    if preds.shape[1] < k:
        raise InvalidConfigError(f"visual vocabulary of {preds.shape[1]} is smaller than {k}")
    return tuple(j for j, _ in _top_means(preds, k))


def aggregate_audio(segment_preds, threshold=DEFAULT_THRESHOLD, k=MAX_AUDIO_LABELS):
    top = _top_means(_as_preds(segment_preds), k)
    kept = tuple(j for j, m in top if m >= threshold)
    return kept or (top[0][0],)


def _canonical_uuid(uuid):
    text = str(uuid).strip().lower()
    if not _UUID_RE.match(text):
        raise InvalidInputError(f"malformed UUID {uuid!r}")
    return text


def fnv1a_64(data: bytes):
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def shard(uuid, n_folds=N_FOLDS):
    """Fold index: 64-bit FNV-1a of the lowercase canonical UUID string, mod ``n_folds``."""
    return fnv1a_64(_canonical_uuid(uuid).encode("ascii")) % n_folds


def shard_many(uuids, n_folds=N_FOLDS):
    """Vectorized ``shard`` for large batches of canonical UUID strings."""
    text = [_canonical_uuid(u) for u in uuids]
    codes = np.frombuffer("".join(text).encode("ascii"), dtype=np.uint8).reshape(len(text), 36)
    return shard_codes(codes, n_folds)


def shard_codes(codes, n_folds=N_FOLDS):
    """Folds for an (n, 36) uint8 array of lowercase canonical UUID characters."""
    codes = np.asarray(codes, dtype=np.uint8)
    h = np.full(codes.shape[0], _FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(_FNV_PRIME)
    with np.errstate(over="ignore"):
        for col in range(codes.shape[1]):
            h = (h ^ codes[:, col].astype(np.uint64)) * prime
    return (h % np.uint64(n_folds)).astype(np.int64)


@dataclass
class VocabStats:
    counts: np.ndarray
    log2_counts: list  # None where the count is zero
    utilization: float
    vocab_size: int

    def report(self, vocab: LabelVocabulary | None = None):
        used = int(np.count_nonzero(self.counts))
        lines = [
            f"vocabulary size: {self.vocab_size}",
            f"used labels: {used}",
            f"utilization: {self.utilization:.2%}",
        ]
        if vocab is not None:
            for mod in ("visual", "audio"):
                ids = np.array([i for i, m in enumerate(vocab.modalities) if m == mod], dtype=int)
                if len(ids):
                    c = self.counts[ids]
                    lines.append(f"{mod}: {np.count_nonzero(c)}/{len(ids)} used, {int(c.sum())} assignments")
        lines.append("")
        lines.append("id\tcount\tlog2")
        for i, (c, l2) in enumerate(zip(self.counts, self.log2_counts)):
            if c:
                lines.append(f"{i}\t{int(c)}\t{l2:.4f}")
        return "\n".join(lines) + "\n"


def vocab_stats(annotations: Iterable[VideoAnnotation], vocab: LabelVocabulary):
    counts = np.zeros(len(vocab), dtype=np.int64)
    for ann in annotations:
        for i in tuple(ann.visual_labels) + tuple(ann.audio_labels):
            if not 0 <= i < len(vocab):
                raise DataIntegrityError(f"{ann.uuid}: unknown label id {i}")
            counts[i] += 1
    log2 = [math.log2(c) if c else None for c in counts]
    used = int(np.count_nonzero(counts))
    return VocabStats(counts, log2, used / len(vocab) if len(vocab) else 0.0, len(vocab))


class Predictor(Protocol):
    """Anything producing per-frame visual and per-second audio probabilities."""

    def predict_visual(self, record: VideoRecord) -> np.ndarray: ...

    def predict_audio(self, record: VideoRecord) -> np.ndarray: ...


class SyntheticPredictor:
    """Seeded stand-in for the visual and audio teacher networks.

    Each video gets 10 planted visual classes drawn from a Zipf-like
    popularity law and 1-5 planted audio classes; planted classes score well
    above the background so the aggregation recovers them. Outputs depend only
    on ``(seed, uuid)``, never on call order.
    """

    def __init__(self, seed=0, n_visual=N_VISUAL, n_audio=N_AUDIO, zipf_exponent=1.1, threshold=DEFAULT_THRESHOLD):
        self.seed = seed
        self.n_visual = n_visual
        self.n_audio = n_audio
        self.zipf_exponent = zipf_exponent
        self.threshold = threshold
        ranks = np.arange(1, n_visual + 1, dtype=np.float64)
        self._visual_p = ranks ** -zipf_exponent / np.sum(ranks ** -zipf_exponent)
        ranks = np.arange(1, n_audio + 1, dtype=np.float64)
        self._audio_p = ranks ** -zipf_exponent / np.sum(ranks ** -zipf_exponent)

    def _rng(self, record, stream):
        key = int(_canonical_uuid(record.uuid).replace("-", ""), 16)
        return np.random.default_rng([self.seed, stream, key & _MASK64, key >> 64])

    def planted(self, record: VideoRecord):
        rng = self._rng(record, 0)
        visual = rng.choice(self.n_visual, N_VISUAL_LABELS, replace=False, p=self._visual_p)
        n_audio = int(rng.integers(1, MAX_AUDIO_LABELS + 1))
        audio = rng.choice(self.n_audio, n_audio, replace=False, p=self._audio_p)
        return tuple(int(i) for i in visual), tuple(int(i) for i in audio)

    def predict_visual(self, record):
        if record.n_frames < 1:
            raise InvalidInputError(f"{record.uuid}: no frames to predict")
        visual, _ = self.planted(record)
        rng = self._rng(record, 1)
        preds = rng.uniform(0.0, 0.05, size=(record.n_frames, self.n_visual))
        preds[:, list(visual)] = rng.uniform(0.5, 1.0, size=(record.n_frames, len(visual)))
        return preds

    def predict_audio(self, record):
        if record.n_segments < 1:
            raise InvalidInputError(f"{record.uuid}: shorter than one second")
        _, audio = self.planted(record)
        rng = self._rng(record, 2)
        preds = rng.uniform(0.0, 0.5 * self.threshold, size=(record.n_segments, self.n_audio))
        preds[:, list(audio)] = rng.uniform(2 * self.threshold, 1.0, size=(record.n_segments, len(audio)))
        return preds


def annotate_record(record: VideoRecord, predictor: Predictor, threshold=DEFAULT_THRESHOLD, n_visual=N_VISUAL):
    visual = aggregate_visual(predictor.predict_visual(record))
    audio = aggregate_audio(predictor.predict_audio(record), threshold)
    return VideoAnnotation(
        _canonical_uuid(record.uuid),
        visual,
        tuple(n_visual + i for i in audio),
        shard(record.uuid),
    ).check()


def annotate_corpus(records: Iterable[VideoRecord], predictor: Predictor, threshold=DEFAULT_THRESHOLD,
                    failures: list | None = None, n_visual=N_VISUAL) -> Iterator[VideoAnnotation]:
    """Annotate records in order, skipping (and collecting) per-record failures.

    Audio ids are offset by ``n_visual`` so they index the joint vocabulary.
    """
    failed = [] if failures is None else failures
    for record in records:
        try:
            yield annotate_record(record, predictor, threshold, n_visual)
        except Exception as exc:  # noqa: BLE001 - per-record isolation
            failed.append((record.uuid, repr(exc)))
            logger.debug("annotation failed for %s: %r", record.uuid, exc)
    if failed:
        logger.warning("%d record(s) failed annotation; first: %s", len(failed), failed[0])


def read_records(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            doc = json.loads(line)
            try:
                records.append(VideoRecord(doc["uuid"], float(doc["duration"]), doc.get("media", "")))
            except KeyError as exc:
                raise DataIntegrityError(f"{path}:{lineno}: missing field {exc}") from None
    return records


def write_records(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"format_version": MANIFEST_VERSION, "uuid": r.uuid,
                                 "media": r.media, "duration": r.duration}) + "\n")


def read_annotations(path):
    with open(path, encoding="utf-8") as fh:
        return [VideoAnnotation.from_json(line) for line in fh if line.strip()]


def write_annotations(path, annotations):
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(ann.to_json() + "\n")


def synthetic_records(n, seed=0, min_duration=3.0, max_duration=5.0):
    """Random video records with 3-5 s durations and random UUIDs."""
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        raw = rng.integers(0, 256, size=16, dtype=np.uint8)
        raw[6] = (raw[6] & 0x0F) | 0x40
        raw[8] = (raw[8] & 0x3F) | 0x80
        h = raw.tobytes().hex()
        uid = f"{h[:8]}-{h[8:12]}-{h[12:16]}-{h[16:20]}-{h[20:]}"
        duration = float(rng.integers(int(min_duration), int(max_duration) + 1))
        records.append(VideoRecord(uid, duration, f"{uid}.wav"))
    return records
