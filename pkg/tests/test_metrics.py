import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cycletrain.errors import ConfigError, DataError
from cycletrain.metrics import EvalReport, accuracy, confusion, evaluate
from cycletrain.nn import Dense, Network, softmax_cross_entropy


def brute_force(preds, targets, k):
    hits = 0
    table = [[0] * k for _ in range(k)]
    for p, t in zip(preds, targets):
        hits += 1 if p == t else 0
        table[t][p] += 1
    return hits / len(preds), table


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0], [1]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 0, 0]) == 0.5


def test_accuracy_errors():
    with pytest.raises(ConfigError):
        accuracy([1, 2], [1])
    with pytest.raises(ConfigError):
        accuracy([], [])


def test_confusion_examples():
    np.testing.assert_array_equal(confusion([0, 1, 2], [0, 1, 2], 3), np.eye(3, dtype=int))
    c = confusion([0, 0], [1, 1], 2)
    assert c[1, 0] == 2 and c.sum() == 2
    with pytest.raises(DataError, match="position 1"):
        confusion([0, 2], [0, 0], 2)


def test_thousand_seeded_pairs_match_brute_force():
    rng = np.random.default_rng(2024)
    k = 84
    preds = rng.integers(0, k, 1000)
    targets = np.where(rng.random(1000) < 0.4, preds, rng.integers(0, k, 1000))
    acc, table = brute_force(preds.tolist(), targets.tolist(), k)
    assert accuracy(preds, targets) == acc
    np.testing.assert_array_equal(confusion(preds, targets, k), np.array(table))


@given(st.integers(2, 12).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=200))))
def test_trace_over_n_is_accuracy(case):
    k, pairs = case
    p, t = map(np.array, zip(*pairs))
    c = confusion(p, t, k)
    assert c.sum() == len(pairs)
    assert np.trace(c) / len(pairs) == accuracy(p, t)
    assert 0.0 <= accuracy(p, t) <= 1.0


def test_uniform_logits_loss_for_84_classes():
    loss, _ = softmax_cross_entropy(np.zeros((3, 84), np.float32), [0, 41, 83])
    assert abs(loss - math.log(84)) < 1e-5


def test_evaluate_and_exports():
    net = Network([[Dense(2, 3, bias=False)]]).astype(np.float64)
    net.parameters()[0].data = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    x = np.array([[2.0, 0.0], [0.0, 2.0], [-1.0, -1.0], [1.0, 1.0]])
    y = np.array([0, 1, 2, 2])
    # last row ties classes 0 and 1: argmax picks the smaller index
    rep = evaluate(net, [(x[:2], y[:2]), (x[2:], y[2:])], 3)
    np.testing.assert_array_equal(rep.predictions, [0, 1, 2, 0])
    assert rep.accuracy == 0.75 and rep.n == 4
    assert net.mode == "train"
    doc = json.loads(rep.to_json(["a", "b", "c"]))
    assert doc["accuracy"] == 0.75 and doc["correct"] == 3
    rows = list(csv.reader(io.StringIO(rep.confusion_csv(["a", "b", "c"]))))
    assert rows[0] == ["true\\pred", "a", "b", "c"]
    assert rows[3] == ["c", "1", "0", "1"]
    full_loss, _ = softmax_cross_entropy(net.forward(x, record=False), y)
    assert rep.mean_loss == pytest.approx(full_loss, rel=1e-12)


def test_evaluate_empty():
    net = Network([[Dense(2, 3)]])
    with pytest.raises(DataError):
        evaluate(net, [], 3)
