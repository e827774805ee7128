"""Learned pairwise ranking of code variants.

A four-layer feed-forward comparator (input, two rectified hidden layers,
two-neuron softmax output) is trained on pairs of min-max scaled working-set
feature vectors labeled by which variant measured faster.  Ranking plays every
variant against every other in a round-robin tournament and sorts by wins; a
decision threshold turns soft outputs into win/loss/draw.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

MODEL_FORMAT_VERSION = 1


class TrainingDivergedError(Exception):
    """Loss became non-finite during training."""


class ComparisonOutcome(enum.Enum):
    WIN1 = "win1"
    WIN2 = "win2"
    DRAW = "draw"


@dataclass
class FeatureScaler:
    """Per-feature min-max scaling to [0, 1] over the training set.

    Constant columns map to 0; values outside the training range extrapolate
    (no clipping).
    """

    x_min: np.ndarray
    x_max: np.ndarray

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        span = self.x_max - self.x_min
        safe = np.where(span > 0, span, 1.0)
        out = (X - self.x_min) / safe
        return np.where(span > 0, out, 0.0)

    def to_json(self) -> dict:
        return {"x_min": self.x_min.tolist(), "x_max": self.x_max.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "FeatureScaler":
        return cls(np.asarray(data["x_min"], dtype=np.float64),
                   np.asarray(data["x_max"], dtype=np.float64))


def fit_scaler(profiles) -> FeatureScaler:
    """Fit min-max bounds from working-set profiles or raw feature rows."""
    rows = [p.features() if hasattr(p, "features") else p for p in profiles]
    if len(rows) < 2:
        raise ValueError("need at least 2 feature rows to fit a scaler")
    X = np.asarray(rows, dtype=np.float64)
    return FeatureScaler(X.min(axis=0), X.max(axis=0))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    augment_symmetric: bool = True


class ComparatorModel:
    """Feed-forward pairwise comparator over concatenated feature pairs.

    Input is [scaled(featA), scaled(featB)]; output is a two-way softmax.
    The first neuron exceeding the decision threshold declares that side the
    winner; neither exceeding it is a draw.
    """

    def __init__(self, feature_dim: int, hidden: tuple[int, int] = (64, 32),
                 theta: float = 0.7, seed: int = 0):
        if not 0.5 < theta <= 1.0:
            raise ValueError(f"threshold must be in (0.5, 1], got {theta}")
        self.feature_dim = int(feature_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.theta = float(theta)
        rng = np.random.default_rng(seed)
        dims = [2 * self.feature_dim, *self.hidden, 2]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            scale = math.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    # -- forward / backward ------------------------------------------------

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Softmax probabilities, shape (n, 2)."""
        a = np.asarray(X, dtype=np.float64)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ W + b, 0.0)
        logits = a @ self.weights[-1] + self.biases[-1]
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray):
        """Mean cross-entropy and gradients; y holds class indices (0 or 1)."""
        acts = [np.asarray(X, dtype=np.float64)]
        pre = []
        a = acts[0]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ W + b
            pre.append(z)
            a = np.maximum(z, 0.0)
            acts.append(a)
        logits = a @ self.weights[-1] + self.biases[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        n = X.shape[0]
        loss = float(-np.log(probs[np.arange(n), y] + 1e-300).mean())

        d = probs.copy()
        d[np.arange(n), y] -= 1.0
        d /= n
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        gw[-1] = acts[-1].T @ d
        gb[-1] = d.sum(axis=0)
        for layer in range(len(self.weights) - 2, -1, -1):
            d = (d @ self.weights[layer + 1].T) * (pre[layer] > 0)
            gw[layer] = acts[layer].T @ d
            gb[layer] = d.sum(axis=0)
        return loss, gw, gb

    # -- persistence ---------------------------------------------------------

    def save(self, path: str, scaler: FeatureScaler | None = None) -> None:
        data = {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": "pairwise-comparator",
            "feature_dim": self.feature_dim,
            "hidden": list(self.hidden),
            "theta": self.theta,
            "layer_shapes": [list(W.shape) for W in self.weights],
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }
        if scaler is not None:
            data["scaler"] = scaler.to_json()
        with open(path, "w") as f:
            json.dump(data, f)

    @classmethod
    def load(cls, path: str) -> tuple["ComparatorModel", FeatureScaler | None]:
        with open(path) as f:
            data = json.load(f)
        if data.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format {data.get('format_version')}")
        model = cls(feature_dim=data["feature_dim"], hidden=tuple(data["hidden"]),
                    theta=data["theta"])
        model.weights = [np.asarray(W, dtype=np.float64) for W in data["weights"]]
        model.biases = [np.asarray(b, dtype=np.float64) for b in data["biases"]]
        for W, shape in zip(model.weights, data["layer_shapes"]):
            if list(W.shape) != shape:
                raise ValueError("layer shape header disagrees with stored weights")
        scaler = FeatureScaler.from_json(data["scaler"]) if "scaler" in data else None
        return model, scaler


def _pair_matrix(scaler: FeatureScaler, pairs) -> tuple[np.ndarray, np.ndarray]:
    feats_a = scaler.transform([p[0] for p in pairs])
    feats_b = scaler.transform([p[1] for p in pairs])
    X = np.concatenate([feats_a, feats_b], axis=1)
    y = np.asarray([p[2] - 1 for p in pairs], dtype=np.int64)
    return X, y


def train(model: ComparatorModel, scaler: FeatureScaler, pairs,
          config: TrainConfig | None = None) -> tuple[ComparatorModel, list[float]]:
    """Momentum-SGD training on labeled pairs; returns per-epoch loss history.

    Each pair (featA, featB, label in {1,2}) is also presented swapped with
    the flipped label so the comparator sees both argument orders.
    """
    if config is None:
        config = TrainConfig()
    if not pairs:
        raise ValueError("need at least one training pair")
    X, y = _pair_matrix(scaler, pairs)
    if config.augment_symmetric:
        half = X.shape[1] // 2
        X = np.concatenate([X, np.concatenate([X[:, half:], X[:, :half]], axis=1)])
        y = np.concatenate([y, 1 - y])

    rng = np.random.default_rng(config.seed)
    vel_w = [np.zeros_like(W) for W in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    history = []
    n = X.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            loss, gw, gb = model.loss_and_grads(X[sel], y[sel])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss}")
            epoch_loss += loss
            batches += 1
            for idx in range(len(model.weights)):
                vel_w[idx] = config.momentum * vel_w[idx] - config.learning_rate * gw[idx]
                vel_b[idx] = config.momentum * vel_b[idx] - config.learning_rate * gb[idx]
                model.weights[idx] += vel_w[idx]
                model.biases[idx] += vel_b[idx]
        history.append(epoch_loss / batches)
    return model, history


def compare(model: ComparatorModel, scaler: FeatureScaler,
            feat_a, feat_b) -> ComparisonOutcome:
    """Threshold decision on the softmax pair: win1, win2, or draw."""
    feat_a = np.asarray(feat_a, dtype=np.float64)
    feat_b = np.asarray(feat_b, dtype=np.float64)
    if feat_a.shape != (model.feature_dim,) or feat_b.shape != (model.feature_dim,):
        raise ValueError(
            f"feature vectors must have dimension {model.feature_dim}, "
            f"got {feat_a.shape} and {feat_b.shape}"
        )
    x = np.concatenate([scaler.transform(feat_a[None, :])[0],
                        scaler.transform(feat_b[None, :])[0]])[None, :]
    p1, p2 = model.forward(x)[0]
    return outcome_from_probs(p1, p2, model.theta)


def outcome_from_probs(p1: float, p2: float, theta: float) -> ComparisonOutcome:
    if p1 > theta:
        return ComparisonOutcome.WIN1
    if p2 > theta:
        return ComparisonOutcome.WIN2
    return ComparisonOutcome.DRAW


def tournament_rank(model: ComparatorModel, scaler: FeatureScaler,
                    variants) -> list[tuple[object, int]]:
    """Round-robin ranking: each unordered pair plays once, wins are counted.

    `variants` is a sequence of (id, feature_vector).  Returns (id, wins)
    sorted by descending wins, ties broken by id.  Draws award no wins.
    """
    ids = [v[0] for v in variants]
    if not ids:
        raise ValueError("need at least one variant to rank")
    feats = scaler.transform([v[1] for v in variants])
    n = len(ids)
    wins = {vid: 0 for vid in ids}
    pair_idx = [(a, b) for a in range(n) for b in range(a + 1, n)]
    chunk = 4096
    for start in range(0, len(pair_idx), chunk):
        block = pair_idx[start:start + chunk]
        X = np.concatenate([feats[[a for a, _ in block]],
                            feats[[b for _, b in block]]], axis=1)
        probs = model.forward(X)
        for (a, b), (p1, p2) in zip(block, probs):
            outcome = outcome_from_probs(p1, p2, model.theta)
            if outcome is ComparisonOutcome.WIN1:
                wins[ids[a]] += 1
            elif outcome is ComparisonOutcome.WIN2:
                wins[ids[b]] += 1
    return sorted(wins.items(), key=lambda kv: (-kv[1], kv[0]))


def select_top(ranked: list[tuple[object, int]], fraction: float):
    """Highest-win prefix of ceil(fraction * n) variants."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    return ranked[:math.ceil(fraction * len(ranked))]


def pairwise_accuracy(model: ComparatorModel, scaler: FeatureScaler, pairs) -> float:
    """Fraction of pairs whose argmax output matches the label."""
    if not pairs:
        raise ValueError("need at least one evaluation pair")
    X, y = _pair_matrix(scaler, pairs)
    pred = model.forward(X).argmax(axis=1)
    return float((pred == y).mean())


def gradient_check(model: ComparatorModel, X: np.ndarray, y: np.ndarray,
                   step: float = 1e-5) -> float:
    """Max relative difference between analytic and central-difference grads."""
    _, gw, gb = model.loss_and_grads(X, y)
    worst = 0.0
    for params, grads in ((model.weights, gw), (model.biases, gb)):
        for tensor, grad in zip(params, grads):
            flat = tensor.reshape(-1)
            gflat = grad.reshape(-1)
            for idx in range(flat.size):
                keep = flat[idx]
                flat[idx] = keep + step
                up, _, _ = model.loss_and_grads(X, y)
                flat[idx] = keep - step
                down, _, _ = model.loss_and_grads(X, y)
                flat[idx] = keep
                numeric = (up - down) / (2 * step)
                denom = max(abs(numeric), abs(gflat[idx]), 1e-8)
                worst = max(worst, abs(numeric - gflat[idx]) / denom)
    return worst
