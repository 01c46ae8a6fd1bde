"""Full-network embedding: pooled multi-layer activations, standardized and ternarized."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import LayerSelection, SelectionMode, forward_collect, read_tensors, selected_layers, write_tensors
from .errors import ConfigError, FitError, ShapeError
from .tasks import default_crop_side, ten_crop_batch

DEFAULT_THRESHOLDS = (-0.25, 0.15)


@dataclass(frozen=True)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray
    fitted_on: int

    def transform(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.shape[1] != self.means.shape[0]:
            raise ShapeError(f"expected {self.means.shape[0]} features, got {features.shape[1]}")
        out = np.zeros_like(features)
        live = self.stds > 0
        out[:, live] = (features[:, live] - self.means[live]) / self.stds[live]
        return out


@dataclass(frozen=True)
class FnEmbedding:
    matrix: np.ndarray          # int8, entries in {-1, 0, 1}
    feature_map: np.ndarray     # (features, 2): layer index, channel index
    standardizer: Standardizer
    thresholds: tuple
    origins: np.ndarray         # row -> index of the source sample in its split

    @property
    def n_features(self):
        return self.matrix.shape[1]


def spatial_average_pool(activation):
    """Per-channel spatial mean. Accepts one activation (rank 3 / rank 1) or a batch of them."""
    a = np.asarray(activation)
    if a.ndim == 3:
        return a.mean(axis=(0, 1))
    if a.ndim == 1:
        return a
    raise ShapeError(f"cannot pool a rank-{a.ndim} activation")


def pool_batch(activation):
    a = np.asarray(activation)
    if a.ndim == 4:
        return a.mean(axis=(1, 2))
    if a.ndim == 2:
        return a
    raise ShapeError(f"cannot pool a rank-{a.ndim} activation batch")


def fit_standardizer(train_features):
    x = np.asarray(train_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise FitError("the standardizer needs at least 2 samples")
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    # rounding noise on constant columns must not produce a tiny positive std
    const = np.all(x == x[0], axis=0)
    stds[const] = 0.0
    return Standardizer(means, stds, x.shape[0])


def discretize(standardized, lo=DEFAULT_THRESHOLDS[0], hi=DEFAULT_THRESHOLDS[1]):
    if not lo < hi:
        raise ConfigError(f"thresholds must satisfy lo < hi, got ({lo}, {hi})")
    x = np.asarray(standardized)
    out = np.zeros(x.shape, dtype=np.int8)
    out[x <= lo] = -1
    out[x >= hi] = 1
    return out


def extract_features(b, images, selection, crop=None, batch_size=256):
    """Ten-crop each image and pool the selected activations.

    Returns ``(features, origins)``: one row per crop, crops of an image
    adjacent, ``origins[r]`` the index of the image row ``r`` came from.
    """
    images = np.asarray(images)
    if crop is None:
        crop = default_crop_side(images.shape[1:3])
    n_layers = selection.resolved_count
    rows = []
    for start in range(0, len(images), max(1, batch_size // 10)):
        crops = ten_crop_batch(images[start:start + max(1, batch_size // 10)], crop)
        acts = forward_collect(b, crops, selection)
        if len(acts) != n_layers:
            raise ShapeError("backbone returned an unexpected number of activations")
        rows.append(np.concatenate([pool_batch(a).astype(np.float64) for a in acts], axis=1))
    width = sum(b.layers[i].width for i in selected_layers(b, selection))
    features = np.concatenate(rows) if rows else np.zeros((0, width))
    origins = np.repeat(np.arange(len(images)), 10)
    return features, origins


def feature_map_for(b, selection):
    idx = selected_layers(b, selection)
    return np.array([(i, c) for i in idx for c in range(b.layers[i].width)], dtype=np.int64)


def embed_features(train, val, test, feature_map, thresholds=DEFAULT_THRESHOLDS):
    """Standardize on train rows only, then ternarize all three splits.

    Each argument ``train`` / ``val`` / ``test`` is a ``(features, origins)`` pair.
    """
    lo, hi = thresholds
    if not lo < hi:
        raise ConfigError(f"thresholds must satisfy lo < hi, got ({lo}, {hi})")
    std = fit_standardizer(train[0])
    out = []
    for features, origins in (train, val, test):
        if len(features):
            matrix = discretize(std.transform(features), lo, hi)
        else:
            matrix = np.zeros((0, std.means.shape[0]), dtype=np.int8)
        out.append(FnEmbedding(matrix, feature_map, std, (lo, hi), origins))
    return tuple(out)


def build_fne(b, ds, fraction, thresholds=DEFAULT_THRESHOLDS, crop=None, batch_size=256):
    """Embed the train/val/test splits of ``ds``; returns an ``FnEmbedding`` triple."""
    selection = LayerSelection.resolve(len(b.layers), SelectionMode.EXTRACT_SUFFIX, fraction)
    parts = []
    for split in ("train", "val", "test"):
        images, _ = ds.arrays(split)
        parts.append(extract_features(b, images, selection, crop, batch_size))
    return embed_features(*parts, feature_map_for(b, selection), thresholds)


def export_embedding(emb, path):
    """Write an embedding with the weight-container codec (values stored as f32)."""
    s = emb.standardizer
    return write_tensors(path, [
        emb.matrix, emb.feature_map, s.means, s.stds,
        np.array([s.fitted_on]), np.array(emb.thresholds), emb.origins,
    ])


def import_embedding(path):
    matrix, fmap, means, stds, fitted_on, thresholds, origins = read_tensors(path)
    std = Standardizer(means.astype(np.float64), stds.astype(np.float64), int(fitted_on[0]))
    return FnEmbedding(
        matrix.astype(np.int8), fmap.astype(np.int64), std,
        # thresholds are short decimals; the f32 repr gives them back exactly
        (float(str(thresholds[0])), float(str(thresholds[1]))), origins.astype(np.int64),
    )


def import_activations(path):
    """Read externally exported, already pooled activations: one (rows, channels) tensor per layer."""
    layers = read_tensors(path)
    for t in layers:
        if t.ndim != 2:
            raise ShapeError("pooled activations must be (rows, channels) per layer")
    return np.concatenate([t.astype(np.float64) for t in layers], axis=1), layers
