from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .nn.loss import softmax_cross_entropy


def accuracy(predictions, targets) -> float:
    """Fraction of positions where prediction equals target."""
    p = np.asarray(predictions)
    t = np.asarray(targets)
    if p.shape != t.shape or p.ndim != 1:
        raise ConfigError(f"predictions {p.shape} and targets {t.shape} must be equal-length vectors")
    if p.size == 0:
        raise ConfigError("accuracy of an empty set is undefined")
    return int((p == t).sum()) / p.size


def confusion(predictions, targets, num_classes: int) -> np.ndarray:
    """K x K counts; rows are true classes, columns predicted classes."""
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(targets, dtype=np.int64)
    if p.shape != t.shape:
        raise ConfigError(f"predictions {p.shape} and targets {t.shape} differ in shape")
    bad = (p < 0) | (p >= num_classes) | (t < 0) | (t >= num_classes)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"class index out of range [0, {num_classes}) at position {i}: "
                        f"prediction {p[i]}, target {t[i]}")
    counts = np.zeros((num_classes, num_classes), np.int64)
    np.add.at(counts, (t, p), 1)
    return counts


@dataclass
class EvalReport:
    predictions: np.ndarray
    targets: np.ndarray
    accuracy: float
    mean_loss: float
    confusion: np.ndarray

    @property
    def n(self) -> int:
        return int(self.targets.size)

    def to_json(self, classes=None) -> str:
        doc = {"n": self.n, "accuracy": self.accuracy, "mean_loss": self.mean_loss,
               "correct": int(np.trace(self.confusion))}
        if classes is not None:
            doc["classes"] = list(classes)
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def confusion_csv(self, classes=None) -> str:
        k = self.confusion.shape[0]
        names = list(classes) if classes is not None else [str(i) for i in range(k)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, self.confusion):
            w.writerow([name, *row.tolist()])
        return buf.getvalue()


def evaluate(net, batches, num_classes: int) -> EvalReport:
    """Run ``net`` in eval mode over ``(x, y)`` batches; loss is the per-sample mean."""
    preds, targets = [], []
    total, n = 0.0, 0
    mode = net.mode
    net.eval()
    try:
        for x, y in batches:
            logits = net.forward(x, record=False)
            loss, _ = softmax_cross_entropy(logits, y)
            total += loss * len(y)
            n += len(y)
            preds.append(np.argmax(logits, axis=1))
            targets.append(np.asarray(y))
    finally:
        net.mode = mode
    if n == 0:
        raise DataError("nothing to evaluate: empty split")
    p = np.concatenate(preds)
    t = np.concatenate(targets)
    return EvalReport(p, t, accuracy(p, t), total / n, confusion(p, t, num_classes))
