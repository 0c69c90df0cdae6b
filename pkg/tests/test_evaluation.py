import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmaudio.evaluation import (
    BENCHMARK_DROPOUT,
    EmbeddingDataset,
    EmbeddingSequence,
    TransferClassifier,
    average_precision,
    binary_auc,
    concat_embeddings,
    evaluate_scores,
    extract_embeddings,
    make_separable_benchmark,
    mean_average_precision,
    roc_auc,
    run_protocol,
    top_n,
)
from mmaudio.exceptions import InvalidInputError, UndefinedMetricError
from mmaudio.frontend import Waveform
from mmaudio.models import Network, build_variant

SEEDS = range(100)


# ---- brute-force oracles -------------------------------------------------

def oracle_top_n(scores, truths, n):
    hits = 0
    for s, t in zip(scores.tolist(), truths.tolist()):
        ranked = [j for _, j in sorted((-v, j) for j, v in enumerate(s))][:n]
        hits += any(t[j] for j in ranked)
    return hits / len(scores)


def oracle_ap(s, t):
    """Mean over positives of precision among all items scoring at least as high."""
    precisions = []
    for i in range(len(s)):
        if t[i]:
            above = [j for j in range(len(s)) if s[j] >= s[i]]
            precisions.append(sum(t[j] for j in above) / len(above))
    return sum(precisions) / len(precisions)


def oracle_auc_trapezoid(s, t):
    """Integrate the ROC polyline swept over every distinct threshold."""
    pos = sum(t)
    neg = len(t) - pos
    points = [(0.0, 0.0)]
    for thr in sorted(set(s), reverse=True):
        tp = sum(1 for v, y in zip(s, t) if v >= thr and y)
        fp = sum(1 for v, y in zip(s, t) if v >= thr and not y)
        points.append((fp / neg, tp / pos))
    return sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(points, points[1:]))


def oracle_auc_pairs(s, t):
    pairs = [(a, b) for a, ya in zip(s, t) if ya for b, yb in zip(s, t) if not yb]
    return sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in pairs) / len(pairs)


def toy(seed, n=5, m=6, ties=False):
    rng = np.random.default_rng(seed)
    scores = rng.random((n, m))
    if ties:
        scores = np.round(scores * 4) / 4
    truths = rng.random((n, m)) < 0.4
    truths[rng.integers(0, n), rng.integers(0, m)] = True
    return scores, truths


# ---- top-n ---------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_top_n_matches_oracle(seed):
    scores, truths = toy(seed, n=7, m=6, ties=seed % 2 == 0)
    for n in (1, 2, 5):
        assert abs(top_n(scores, truths, n) - oracle_top_n(scores, truths, n)) <= 1e-12


def test_top_n_examples():
    scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.7, 0.1], [0.5, 0.4, 0.1]])
    assert top_n(scores, np.array([0, 1, 1]), 1) == pytest.approx(2 / 3, abs=1e-15)
    assert top_n(scores, np.array([0, 1, 2]), 3) == 1.0
    multi = np.array([[0, 1, 1], [0, 0, 1], [0, 1, 0]], bool)
    # the first sample's second label is ranked 2nd; "any" label counts
    assert top_n(scores, multi, 2) == pytest.approx(2 / 3)


def test_top_n_tie_goes_to_lower_id():
    assert top_n(np.array([[0.5, 0.5]]), np.array([1]), 1) == 0.0
    assert top_n(np.array([[0.5, 0.5]]), np.array([0]), 1) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_top_n_monotone_in_n(seed):
    scores, truths = toy(seed, n=6, m=8)
    values = [top_n(scores, truths, n) for n in range(1, 9)]
    assert values == sorted(values) and values[-1] == pytest.approx(np.mean(truths.any(axis=1)))


# ---- mAP -----------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_map_matches_oracle(seed):
    scores, truths = toy(seed, ties=seed % 2 == 0)
    cols = [c for c in range(6) if truths[:, c].any()]
    expected = np.mean([oracle_ap(scores[:, c].tolist(), truths[:, c].tolist()) for c in cols])
    assert abs(mean_average_precision(scores, truths) - expected) <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_ap_agrees_with_sklearn(seed):
    from sklearn.metrics import average_precision_score

    scores, truths = toy(seed, n=12, m=1, ties=True)
    assert abs(average_precision(scores[:, 0], truths[:, 0]) - average_precision_score(truths[:, 0], scores[:, 0])) <= 1e-12


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)
    assert average_precision([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == pytest.approx(0.8333, abs=1e-4)
    s = np.random.default_rng(0).random((10, 4))
    assert mean_average_precision(s, s >= np.sort(s, axis=0)[-3]) == 1.0


def test_map_undefined_and_exclusion():
    with pytest.raises(UndefinedMetricError):
        mean_average_precision(np.ones((3, 2)), np.zeros((3, 2)))
    s = np.array([[0.9, 0.1], [0.1, 0.2]])
    value, per_class = mean_average_precision(s, np.array([[1, 0], [0, 0]]), per_class=True)
    assert value == 1.0 and list(per_class) == [0]


# ---- AUC -----------------------------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_auc_matches_trapezoid_and_pair_oracles(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(8)
    if seed % 2 == 0:
        s = np.round(s * 3) / 3
    t = np.zeros(8, bool)
    t[rng.choice(8, rng.integers(1, 8), replace=False)] = True
    value = binary_auc(s, t)
    assert abs(value - oracle_auc_trapezoid(s.tolist(), t.tolist())) <= 1e-12
    assert abs(value - oracle_auc_pairs(s.tolist(), t.tolist())) <= 1e-12


@pytest.mark.parametrize("seed", SEEDS)
def test_macro_auc_matches_oracle(seed):
    scores, truths = toy(seed, n=7, ties=seed % 3 == 0)
    cols = [c for c in range(6) if truths[:, c].any() and not truths[:, c].all()]
    if not cols:
        with pytest.raises(UndefinedMetricError):
            roc_auc(scores, truths)
        return
    expected = np.mean([oracle_auc_pairs(scores[:, c].tolist(), truths[:, c].tolist()) for c in cols])
    assert abs(roc_auc(scores, truths) - expected) <= 1e-12


def test_auc_examples():
    assert binary_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert binary_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc(np.ones((2, 1)), np.ones((2, 1)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_metric_invariances(seed):
    scores, truths = toy(seed, n=9, m=5)
    if not all(truths[:, c].any() and not truths[:, c].all() for c in range(5)):
        return
    perm = np.random.default_rng(seed).permutation(9)
    base = (mean_average_precision(scores, truths), roc_auc(scores, truths), top_n(scores, truths, 2))
    for transformed in (np.exp(3 * scores) - 7, scores ** 3):
        assert mean_average_precision(transformed, truths) == pytest.approx(base[0], abs=1e-12)
        assert roc_auc(transformed, truths) == pytest.approx(base[1], abs=1e-12)
    permuted = (mean_average_precision(scores[perm], truths[perm]), roc_auc(scores[perm], truths[perm]),
                top_n(scores[perm], truths[perm], 2))
    assert permuted == pytest.approx(base, abs=1e-12)


def test_report_invariant():
    scores, truths = toy(3, n=20, m=8)
    rep = evaluate_scores(scores, truths)
    assert 0 <= rep.top1 <= rep.top5 <= 1


# ---- embeddings and head -------------------------------------------------

@pytest.fixture(scope="module")
def tiny_net():
    return Network(build_variant("vggish_fullconv", n_classes=10, width_divisor=16), seed=0)


def test_extract_embeddings(tiny_net):
    clip = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, 5 * 16000 + 3000), 16000)
    a = extract_embeddings(tiny_net, clip)
    b = extract_embeddings(tiny_net, clip)
    assert a.vectors.shape == (5, 128)
    assert np.array_equal(a.vectors, b.vectors)
    silent = extract_embeddings(tiny_net, Waveform(np.zeros(3 * 16000), 16000)).vectors
    assert np.all(silent == silent[0])
    with pytest.raises(InvalidInputError):
        extract_embeddings(tiny_net, Waveform(np.zeros(8000), 16000))
    with pytest.raises(InvalidInputError):
        extract_embeddings(tiny_net, clip, variant="vggish_base")


def test_concat_rejects_ragged():
    seqs = [EmbeddingSequence(np.zeros((5, 128))), EmbeddingSequence(np.zeros((4, 128)))]
    with pytest.raises(InvalidInputError):
        concat_embeddings(seqs)
    assert concat_embeddings(seqs[:1]).shape == (1, 640)


def test_head_weight_count_and_separable_fit():
    data = make_separable_benchmark(n_classes=50, per_class=4, seed=1)
    clf = TransferClassifier(dropout=0.3, epochs=60, random_state=0).fit(data.X, data.y)
    assert data.X.shape[1] == 640
    assert clf.n_weights == 640 * 50 + 50 == 32_050
    assert clf.score(data.X, data.y) == 1.0
    assert clf.get_params()["lr"] == 2e-4 and clf.get_params()["batch_size"] == 128


def test_multilabel_head():
    data = make_separable_benchmark(n_classes=6, per_class=10, n_seconds=2, multilabel=True, seed=2)
    clf = TransferClassifier(epochs=200, dropout=0.0).fit(data.X, data.y)
    assert np.array_equal(clf.predict(data.X), data.y)


def test_benchmark_dropout_settings():
    assert BENCHMARK_DROPOUT == {"esc50": 0.3, "tut2018": 0.5, "audioset_balanced": 0.5}


def test_embedding_dataset_roundtrip(tmp_path):
    data = make_separable_benchmark(n_classes=3, per_class=5, n_seconds=1)
    data.save(tmp_path / "d.npz")
    got = EmbeddingDataset.load(tmp_path / "d.npz")
    assert np.array_equal(got.X, data.X) and got.class_names == data.class_names
    assert list(got.tags) == list(data.tags)


# ---- protocols -----------------------------------------------------------

def test_esc50_runs_five_folds_and_reaches_one():
    data = make_separable_benchmark(n_classes=50, per_class=40, n_seconds=5, seed=0)
    report = run_protocol("esc50", data, {"epochs": 30})
    assert [tag for tag, _ in report.runs] == [1, 2, 3, 4, 5]
    assert [r.n_samples for _, r in report.runs] == [400] * 5
    assert report.mean.top1 == 1.0
    assert report.mean.top1 == np.mean([r.top1 for _, r in report.runs])
    again = run_protocol("esc50", data, {"epochs": 30})
    assert again.to_json() == report.to_json()


def test_split_protocols():
    data = make_separable_benchmark(n_classes=4, per_class=10, n_seconds=2, folds=("train", "eval"), seed=3)
    rep = run_protocol("tut2018", data, {"epochs": 40})
    assert [t for t, _ in rep.runs] == ["eval"] and rep.runs[0][1].n_samples == 20
    ml = make_separable_benchmark(n_classes=4, per_class=10, n_seconds=2, folds=("balanced_train", "eval"),
                                  multilabel=True, seed=4)
    rep = run_protocol("audioset_balanced", ml, {"epochs": 400})
    assert rep.mean.map == pytest.approx(1.0)


def test_protocol_requires_assignments():
    data = make_separable_benchmark(n_classes=3, per_class=4, n_seconds=1, folds=(1, 2, 3, 4))
    with pytest.raises(InvalidInputError):
        run_protocol("esc50", data)
    with pytest.raises(InvalidInputError):
        run_protocol("tut2018", data)
