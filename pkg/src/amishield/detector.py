"""Traffic classification over rendered images.

Feature vectors are color-class histograms: five global fractions plus
five fractions for each cell of a quadrant grid. Two desk-scale models
are provided, k-nearest-neighbour and a single-hidden-layer MLP
(tanh hidden, sigmoid output, logit-space cross-entropy, plain SGD),
both seeded and reproducible. Models support incremental updates and
persist as self-describing JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .bytevis import PALETTE, VisImage

MODEL_FORMAT_VERSION = 1

NORMAL = "normal"
MALWARE = "malware"


class DetectorError(Exception):
    pass


class BadQuadrantSplit(DetectorError):
    """Quadrant grid does not evenly divide the image."""


class DegenerateDataset(DetectorError):
    """Training data contains a single class."""


class EmptyDataset(DetectorError):
    pass


class NonFiniteLoss(DetectorError):
    """Training diverged to a non-finite loss."""


@dataclass
class Hyper:
    kind: str = "mlp"  # mlp | knn
    hidden: int = 32
    lr: float = 0.3
    epochs: int = 40
    batch: int = 16
    update_epochs: int = 10
    k: int = 3
    seed: int = 0
    threshold: float = 0.5
    quadrants: int = 4
    buffer_cap: int = 10_000


@dataclass(frozen=True)
class Verdict:
    label: str
    score: float  # probability the sample is malware


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    false_positive_rate: float
    false_negative_rate: float
    n: int


def featurize(image: VisImage, quadrants: int = 4) -> np.ndarray:
    """Class-fraction features: 5 global + 5 per quadrant cell."""
    g = math.isqrt(quadrants)
    if g * g != quadrants or quadrants < 1:
        raise BadQuadrantSplit(f"quadrant count {quadrants} is not a square")
    if image.side % g:
        raise BadQuadrantSplit(f"side {image.side} not divisible by grid {g}")

    flat = image.pixels.reshape(-1, 3).astype(np.int64)
    dists = ((flat[:, None, :] - PALETTE[None, :, :].astype(np.int64)) ** 2).sum(axis=2)
    classes = dists.argmin(axis=1).reshape(image.side, image.side)

    def fractions(region):
        counts = np.bincount(region.ravel(), minlength=len(PALETTE))
        return counts / region.size

    parts = [fractions(classes)]
    step = image.side // g
    for qy in range(g):
        for qx in range(g):
            parts.append(
                fractions(classes[qy * step : (qy + 1) * step, qx * step : (qx + 1) * step])
            )
    return np.concatenate(parts)


def feature_length(quadrants: int = 4) -> int:
    return 5 * (1 + quadrants)


# --- MLP internals -------------------------------------------------------
#
# Parameters are kept as one flat vector so the loss/gradient pair can be
# checked against finite differences directly.


def mlp_param_count(d: int, h: int) -> int:
    return d * h + h + h + 1


def mlp_init(d: int, h: int, rng: np.random.Generator) -> np.ndarray:
    w1 = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, h))
    w2 = rng.normal(0.0, 1.0 / math.sqrt(h), size=h)
    theta = np.concatenate([w1.ravel(), np.zeros(h), w2, np.zeros(1)])
    return theta


def _unpack(theta: np.ndarray, d: int, h: int):
    w1 = theta[: d * h].reshape(d, h)
    b1 = theta[d * h : d * h + h]
    w2 = theta[d * h + h : d * h + 2 * h]
    b2 = theta[-1]
    return w1, b1, w2, b2


def mlp_forward(theta: np.ndarray, X: np.ndarray, d: int, h: int) -> np.ndarray:
    """Malware probability for each row of X."""
    w1, b1, w2, b2 = _unpack(theta, d, h)
    a1 = np.tanh(X @ w1 + b1)
    z2 = a1 @ w2 + b2
    return 1.0 / (1.0 + np.exp(-z2))


def mlp_loss_and_grad(theta, X, y, d, h):
    """Mean cross-entropy (in logit space) and its exact gradient."""
    n = X.shape[0]
    w1, b1, w2, b2 = _unpack(theta, d, h)
    a1 = np.tanh(X @ w1 + b1)
    z2 = a1 @ w2 + b2
    # softplus(z) - y*z == -log sigmoid(z)*y - log(1-sigmoid(z))*(1-y)
    loss = float(np.mean(np.logaddexp(0.0, z2) - y * z2))
    p = 1.0 / (1.0 + np.exp(-z2))
    dz2 = (p - y) / n
    gw2 = a1.T @ dz2
    gb2 = dz2.sum()
    da1 = np.outer(dz2, w2)
    dz1 = da1 * (1.0 - a1**2)
    gw1 = X.T @ dz1
    gb1 = dz1.sum(axis=0)
    grad = np.concatenate([gw1.ravel(), gb1, gw2, [gb2]])
    return loss, grad


@dataclass
class Model:
    """A trained detector: either exemplars (knn) or MLP weights."""

    kind: str
    hyper: Hyper
    dim: int
    theta: np.ndarray | None = None
    exemplars: np.ndarray | None = None
    exemplar_labels: np.ndarray | None = None
    buffer_X: np.ndarray | None = None
    buffer_y: np.ndarray | None = None
    training_log: list[float] = field(default_factory=list)
    step: int = 0  # bumps per train/update, keeps rng streams distinct


def _as_arrays(features, labels):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D array of vectors")
    if isinstance(labels, np.ndarray) and labels.dtype != object:
        y = labels.astype(np.float64)
    else:
        y = np.array(
            [1.0 if l in (1, 1.0, MALWARE, True) else 0.0 for l in labels],
            dtype=np.float64,
        )
    if len(y) != X.shape[0]:
        raise ValueError("feature/label count mismatch")
    return X, y


def _sgd(model: Model, X, y, epochs: int) -> None:
    hy = model.hyper
    rng = np.random.default_rng((hy.seed, model.step))
    model.step += 1
    d, h = model.dim, hy.hidden
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), hy.batch):
            sel = order[start : start + hy.batch]
            _, grad = mlp_loss_and_grad(model.theta, X[sel], y[sel], d, h)
            model.theta -= hy.lr * grad
        epoch_loss, _ = mlp_loss_and_grad(model.theta, X, y, d, h)
        if not math.isfinite(epoch_loss):
            raise NonFiniteLoss(f"loss became {epoch_loss}")
        model.training_log.append(epoch_loss)


def train(features, labels, hyper: Hyper | None = None) -> Model:
    """Fit a model from labeled feature vectors.

    Raises DegenerateDataset unless both classes are present.
    """
    hy = hyper or Hyper()
    X, y = _as_arrays(features, labels)
    if len(set(y.tolist())) < 2:
        raise DegenerateDataset("training data holds a single class")

    model = Model(kind=hy.kind, hyper=hy, dim=X.shape[1])
    if hy.kind == "knn":
        if len(y) < hy.k:
            raise ValueError(f"need at least k={hy.k} exemplars, got {len(y)}")
        model.exemplars = X.copy()
        model.exemplar_labels = y.copy()
        return model
    if hy.kind != "mlp":
        raise ValueError(f"unknown model kind {hy.kind!r}")

    rng = np.random.default_rng((hy.seed, model.step))
    model.step += 1
    model.theta = mlp_init(X.shape[1], hy.hidden, rng)
    model.buffer_X = X.copy()
    model.buffer_y = y.copy()
    first, _ = mlp_loss_and_grad(model.theta, X, y, X.shape[1], hy.hidden)
    _sgd(model, X, y, hy.epochs)
    if model.training_log and model.training_log[-1] > first:
        # SGD regressed past its start; one more pass normally settles it.
        _sgd(model, X, y, hy.epochs)
    return model


def predict_scores(model: Model, features) -> np.ndarray:
    """Malware probability for each feature vector."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if model.kind == "mlp":
        return mlp_forward(model.theta, X, model.dim, model.hyper.hidden)
    k = min(model.hyper.k, len(model.exemplar_labels))
    d2 = ((X[:, None, :] - model.exemplars[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return model.exemplar_labels[nearest].mean(axis=1)


def classify(model: Model, image: VisImage) -> Verdict:
    """Verdict for one rendered image."""
    score = float(predict_scores(model, featurize(image, model.hyper.quadrants))[0])
    label = MALWARE if score >= model.hyper.threshold else NORMAL
    return Verdict(label, score)


def update(model: Model, features, labels) -> Model:
    """Fold new labeled samples into the model in place.

    knn appends exemplars (exact duplicates dropped); mlp runs extra SGD
    epochs over a FIFO-capped union buffer.
    """
    X, y = _as_arrays(features, labels) if len(labels) else (None, None)
    if X is None or len(y) == 0:
        return model
    if model.kind == "knn":
        seen = {
            (model.exemplars[i].tobytes(), model.exemplar_labels[i])
            for i in range(len(model.exemplar_labels))
        }
        keep = []
        for i in range(len(y)):
            key = (X[i].tobytes(), y[i])
            if key not in seen:
                seen.add(key)
                keep.append(i)
        if keep:
            model.exemplars = np.vstack([model.exemplars, X[keep]])
            model.exemplar_labels = np.concatenate([model.exemplar_labels, y[keep]])
        return model

    model.buffer_X = np.vstack([model.buffer_X, X])[-model.hyper.buffer_cap :]
    model.buffer_y = np.concatenate([model.buffer_y, y])[-model.hyper.buffer_cap :]
    _sgd(model, model.buffer_X, model.buffer_y, model.hyper.update_epochs)
    return model


def evaluate(model: Model, features, labels) -> Metrics:
    """Accuracy, false-positive and false-negative rates on a labeled set."""
    X, y = _as_arrays(features, labels)
    if len(y) == 0:
        raise EmptyDataset("evaluation set is empty")
    pred = (predict_scores(model, X) >= model.hyper.threshold).astype(np.float64)
    correct = float((pred == y).mean())
    normals = y == 0.0
    malwares = y == 1.0
    fpr = float(pred[normals].mean()) if normals.any() else 0.0
    fnr = float((1.0 - pred[malwares]).mean()) if malwares.any() else 0.0
    return Metrics(correct, fpr, fnr, len(y))


def save_model(model: Model, path) -> None:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "dim": model.dim,
        "step": model.step,
        "hyper": asdict(model.hyper),
        "training_log": model.training_log,
    }
    if model.kind == "mlp":
        doc["theta"] = model.theta.tolist()
        doc["buffer_X"] = model.buffer_X.tolist()
        doc["buffer_y"] = model.buffer_y.tolist()
    else:
        doc["exemplars"] = model.exemplars.tolist()
        doc["exemplar_labels"] = model.exemplar_labels.tolist()
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> Model:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version!r}")
    model = Model(
        kind=doc["kind"],
        hyper=Hyper(**doc["hyper"]),
        dim=doc["dim"],
        training_log=list(doc.get("training_log", [])),
        step=doc.get("step", 1),
    )
    if model.kind == "mlp":
        model.theta = np.array(doc["theta"], dtype=np.float64)
        model.buffer_X = np.array(doc["buffer_X"], dtype=np.float64)
        model.buffer_y = np.array(doc["buffer_y"], dtype=np.float64)
    else:
        model.exemplars = np.array(doc["exemplars"], dtype=np.float64)
        model.exemplar_labels = np.array(doc["exemplar_labels"], dtype=np.float64)
    return model
