"""One-vs-rest L2-regularized hinge-loss linear SVM."""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .backbone import decode_container, encode_container, TENSOR_KIND
from .errors import ShapeError, TrainError


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class LinearSvmModel:
    weights: np.ndarray     # (classes, features)
    biases: np.ndarray      # (classes,)
    C: float
    classes: tuple
    converged: bool
    iterations: int
    tol: float = 1e-3
    traces: list = field(default_factory=list, repr=False)

    @property
    def n_features(self):
        return self.weights.shape[1]


def hinge_objective(w, b, X, y, C):
    margins = 1.0 - y * (X @ w + b)
    return 0.5 * float(w @ w) + C * float(np.maximum(margins, 0).sum())


def train_linear_svm(X, y, C=1.0, tol=1e-3, max_iter=1000, n_classes=None, classes=None):
    """Fit one binary SVM per class (that class vs the rest).

    ``max_iter`` bounds solver sweeps per binary problem. A class with no
    training rows gets a constant negative scorer.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"{len(X)} rows but {len(y)} labels")
    present = np.unique(y)
    if len(present) < 2:
        raise TrainError("need at least 2 distinct classes")
    if n_classes is None:
        n_classes = len(classes) if classes is not None else int(present.max()) + 1
    classes = tuple(classes) if classes is not None else tuple(range(n_classes))
    W = np.zeros((n_classes, X.shape[1]))
    bias = np.zeros(n_classes)
    converged = True
    iterations = 0
    traces = []
    for c in range(n_classes):
        yc = np.where(y == c, 1.0, -1.0)
        if np.all(yc < 0):
            bias[c] = -1.0
            traces.append(np.zeros(1))
            continue
        w, b, sweeps, ok, trace = kernels.smo_binary(X, yc, C, tol, max_iter)
        W[c], bias[c] = w, b
        converged &= ok
        iterations = max(iterations, sweeps)
        traces.append(trace)
    # snap to f32 so a saved model predicts bit-identically after reload
    W = W.astype(np.float32).astype(np.float64)
    bias = bias.astype(np.float32).astype(np.float64)
    if not converged:
        warnings.warn(f"SVM solver hit max_iter={max_iter} before reaching tol={tol}", ConvergenceWarning)
    return LinearSvmModel(W, bias, float(C), classes, bool(converged), iterations, float(tol), traces)


def decision_scores(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeError(f"model expects {model.n_features} features, got {X.shape[-1]}")
    return X @ model.weights.T + model.biases


def predict(model, X):
    """Return ``(labels, scores)``; ties go to the lowest class index."""
    scores = decision_scores(model, X)
    return scores.argmax(axis=1), scores


def save_model(model, path):
    header = json.dumps({
        "classes": list(model.classes), "C": model.C, "tol": model.tol,
        "converged": model.converged, "iterations": model.iterations,
    }).encode()
    body = encode_container([(TENSOR_KIND, model.weights, None), (TENSOR_KIND, model.biases, None)])
    Path(path).write_bytes(struct.pack("<I", len(header)) + header + body)


def load_model(path):
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4:4 + n])
    entries, _ = decode_container(data[4 + n:])
    (_, W, _), (_, b, _) = entries
    return LinearSvmModel(
        W.astype(np.float64), b.astype(np.float64), header["C"], tuple(header["classes"]),
        header["converged"], header["iterations"], header["tol"],
    )
