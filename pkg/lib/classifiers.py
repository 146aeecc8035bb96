"""Supervised learners trained on top of the learnt features: a multi-class linear SVM and a one-hidden-layer network."""
from __future__ import annotations
import dataclasses
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any
import numpy as np
from lib import checkpoint
from lib.autoencoders import DivergenceError
from lib.core_math import NonFiniteError, RandomSource, activation, activation_derivative, check_finite
from lib.mtae_types import ActivationKind, FloatArray, IntArray, MANIFEST_TYPE

logger = logging.getLogger(__name__)

LINEAR_SVM_KIND = "linear-svm"
DEFAULT_C_REG = 1.0
DEFAULT_SVM_EPOCHS = 20
DEFAULT_C_GRID = [{"C_reg": 0.01}, {"C_reg": 0.1}, {"C_reg": 1.0}, {"C_reg": 10.0}]

GridPoint = dict[str, Any]
Evaluate = Callable[[GridPoint, FloatArray, IntArray, FloatArray, IntArray, int], float]


@dataclass(frozen=True, eq=False)
class LinearModel:
    """One weight vector and bias per class; the predicted class has the highest score."""

    weights: FloatArray
    biases: FloatArray

    def __post_init__(self) -> None:
        """Check shapes and values."""
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError(f"weights {self.weights.shape} and biases {self.biases.shape} do not match")
        if self.weights.shape[0] < 2:
            raise ValueError("a linear model needs at least 2 classes")
        check_finite(self.weights, "non-finite linear model weight")
        check_finite(self.biases, "non-finite linear model bias")

    @property
    def classes(self) -> int:
        """Number of classes C."""
        return int(self.weights.shape[0])

    def scores(self, X: FloatArray) -> FloatArray:
        """Class scores w_cᵀx + b_c of every row of `X`."""
        X = np.atleast_2d(X)
        if X.shape[1] != self.weights.shape[1]:
            raise ValueError(f"input has {X.shape[1]} features, the model expects {self.weights.shape[1]}")
        return X @ self.weights.T + self.biases


def _class_count(labels: IntArray) -> int:
    present = np.unique(labels)
    if len(present) < 2:
        raise ValueError(f"need at least 2 classes to train a classifier, got {present.tolist()}")
    if int(present[0]) < 0:
        raise ValueError("class ids must be non-negative")
    return int(present[-1]) + 1


def _margins(scores: FloatArray, labels: IntArray) -> FloatArray:
    """[c ≠ y_i] + s_ic − s_iy for every sample and class."""
    rows = np.arange(len(labels))
    margins = scores - scores[rows, labels][:, None] + 1.0
    margins[rows, labels] = 0.0
    return margins


def svm_objective(model: LinearModel, X: FloatArray, labels: IntArray, C_reg: float) -> float:
    """
    The primal Crammer-Singer objective.

    ½(Σ‖w_c‖² + ‖b‖²) + C_reg·Σ_i max_c([c ≠ y_i] + w_cᵀx_i + b_c − w_{y_i}ᵀx_i − b_{y_i}). The bias
    is regularised like an extra always-one feature.
    """
    labels = np.asarray(labels, dtype=np.int64)
    hinge = _margins(model.scores(X), labels).max(axis=1)
    return float(0.5 * (np.sum(model.weights ** 2) + np.sum(model.biases ** 2)) + C_reg * np.sum(hinge))


def train_linear_svm(X: FloatArray, labels: IntArray, C_reg: float = DEFAULT_C_REG, epochs: int = DEFAULT_SVM_EPOCHS,
                     seed: int = 0, history: list[float] | None = None) -> LinearModel:
    """
    Train a multi-class linear SVM by stochastic subgradient descent.

    With λ = 1/(C_reg·n) the objective is minimised Pegasos-style: step t uses the rate 1/(λt) on
    one sample, then the weights are projected onto the ball of radius 1/√λ. The model returned is
    the one with the lowest objective among the epoch ends.

    :param X: One sample per row.
    :param labels: Class ids 0..C-1, at least two distinct.
    :param C_reg: Weight of the hinge loss.
    :param epochs: Passes over the data, each in a new random order.
    :param seed: Seeds the sample order.
    :param history: If given, the best objective so far is appended after every epoch.
    :return: The trained model.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise ValueError(f"{X.shape} data matrix does not match {len(labels)} labels")
    if C_reg <= 0 or epochs < 1:
        raise ValueError(f"need C_reg > 0 and epochs >= 1, got {C_reg} and {epochs}")
    check_finite(X, "non-finite feature value")
    C = _class_count(labels)
    n, d = X.shape
    Z = np.hstack([X, np.ones((n, 1))])
    lam = 1.0 / (C_reg * n)
    radius = 1.0 / math.sqrt(lam)
    Wa = np.zeros((C, d + 1))
    order_rng = RandomSource(seed)

    def as_model(weights: FloatArray) -> LinearModel:
        return LinearModel(weights[:, :-1].copy(), weights[:, -1].copy())

    best = as_model(Wa)
    best_objective = svm_objective(best, X, labels, C_reg)
    t = 0
    for epoch in range(1, epochs + 1):
        for i in order_rng.permutation(n):
            t += 1
            z = Z[i]
            y = labels[i]
            margins = Wa @ z - Wa[y] @ z + 1.0
            margins[y] = 0.0
            worst = int(np.argmax(margins))
            rate = 1.0 / (lam * t)
            Wa *= 1.0 - 1.0 / t
            if worst != y:
                Wa[y] += rate * z
                Wa[worst] -= rate * z
            norm = float(np.linalg.norm(Wa))
            if norm > radius:
                Wa *= radius / norm

        objective = svm_objective(as_model(Wa), X, labels, C_reg)
        if objective < best_objective:
            best, best_objective = as_model(Wa), objective
        if history is not None:
            history.append(best_objective)
        logger.debug(f"Linear SVM epoch {epoch}/{epochs}: objective {objective:.6f}, best {best_objective:.6f}")
    return best


def predict(model: LinearModel, X: FloatArray) -> IntArray:
    """The highest-scoring class of every row of `X`; ties go to the lowest class id."""
    return np.argmax(model.scores(X), axis=1).astype(np.int64)


def save_linear_model(model: LinearModel, directory: str, metadata: MANIFEST_TYPE | None = None) -> None:
    """Write a linear model checkpoint."""
    checkpoint.save_checkpoint(directory, LINEAR_SVM_KIND, {"weights": model.weights, "biases": model.biases},
                               {"classes": model.classes, "d": int(model.weights.shape[1])} | (metadata or {}))


def load_linear_model(directory: str) -> LinearModel:
    """Read a checkpoint written by `save_linear_model`."""
    _, arrays = checkpoint.load_checkpoint(directory, LINEAR_SVM_KIND)
    return LinearModel(arrays["weights"], arrays["biases"])


@dataclass(frozen=True)
class FineTuneConfig:
    """Hyperparameters of 1HNN training."""

    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 10
    hidden_dim: int = 500
    weight_decay: float = 0.0
    hidden_kind: ActivationKind = ActivationKind.SIGMOID
    seed: int = 0

    def __post_init__(self) -> None:
        """Check the ranges."""
        object.__setattr__(self, "hidden_kind", ActivationKind(self.hidden_kind))
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden_dim < 1:
            raise ValueError("epochs, batch_size and hidden_dim must be >= 1")


@dataclass(frozen=True, eq=False)
class OneHiddenNet:
    """A fully connected network with one hidden layer and a softmax output."""

    W1: FloatArray
    b1: FloatArray
    W2: FloatArray
    b2: FloatArray
    hidden_kind: ActivationKind = ActivationKind.SIGMOID

    @property
    def d_h(self) -> int:
        """Number of hidden units."""
        return int(self.W1.shape[1])

    @property
    def classes(self) -> int:
        """Number of output classes."""
        return int(self.W2.shape[1])


@dataclass(frozen=True, eq=False)
class NetworkGradients:
    """Gradient of the regularised mean cross-entropy with respect to each parameter."""

    W1: FloatArray
    b1: FloatArray
    W2: FloatArray
    b2: FloatArray


def softmax(A: FloatArray) -> FloatArray:
    """Row-wise softmax, shifted by the row maximum so large scores do not overflow."""
    A = np.atleast_2d(A)
    E = np.exp(A - A.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def _network_forward(net: OneHiddenNet, X: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
    if X.shape[1] != net.W1.shape[0]:
        raise ValueError(f"input has {X.shape[1]} features, the network expects {net.W1.shape[0]}")
    a_hidden = X @ net.W1 + net.b1
    H = activation(a_hidden, net.hidden_kind)
    return a_hidden, H, softmax(H @ net.W2 + net.b2)


def network_loss(net: OneHiddenNet, X: FloatArray, labels: IntArray, weight_decay: float = 0.0) -> float:
    """Mean cross-entropy of the softmax outputs plus η(‖W1‖² + ‖W2‖²)."""
    X = np.atleast_2d(X)
    labels = np.asarray(labels, dtype=np.int64)
    P = _network_forward(net, X)[2]
    log_likelihood = np.log(np.clip(P[np.arange(len(labels)), labels], 1e-300, None))
    return float(-log_likelihood.mean() + weight_decay * (np.sum(net.W1 ** 2) + np.sum(net.W2 ** 2)))


def network_gradients(net: OneHiddenNet, X: FloatArray, labels: IntArray, weight_decay: float = 0.0) -> NetworkGradients:
    """Backpropagate `network_loss` over a batch."""
    X = np.atleast_2d(X)
    labels = np.asarray(labels, dtype=np.int64)
    a_hidden, H, P = _network_forward(net, X)
    delta_out = P.copy()
    delta_out[np.arange(len(labels)), labels] -= 1.0
    delta_out /= X.shape[0]
    delta_hidden = (delta_out @ net.W2.T) * activation_derivative(a_hidden, net.hidden_kind)
    return NetworkGradients(W1=X.T @ delta_hidden + 2.0 * weight_decay * net.W1,
                            b1=delta_hidden.sum(axis=0),
                            W2=H.T @ delta_out + 2.0 * weight_decay * net.W2,
                            b2=delta_out.sum(axis=0))


def fine_tune_1hnn(init_W: FloatArray | None, X: FloatArray, labels: IntArray, config: FineTuneConfig,
                   init_b: FloatArray | None = None, num_classes: int | None = None) -> OneHiddenNet:
    """
    Train a one-hidden-layer softmax network by mini-batch SGD.

    :param init_W: Pretrained first-layer weights (d × d_h), e.g. an MTAE encoder. Random when None.
    :param X: One sample per row.
    :param labels: Class ids.
    :param config: The hyperparameters. `hidden_dim` must match `init_W` when it is given.
    :param init_b: Pretrained first-layer biases; zeros when None.
    :param num_classes: Output size; defaults to the largest label + 1.
    :return: The trained network.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != len(labels) or X.shape[0] == 0:
        raise ValueError(f"{X.shape} data matrix does not match {len(labels)} labels")
    C = num_classes or _class_count(labels)
    d = X.shape[1]
    d_h = config.hidden_dim
    root = RandomSource(config.seed)
    init_rng = root.fork(0)
    order_rng = root.fork(1)

    if init_W is not None:
        if init_W.shape != (d, d_h):
            raise ValueError(f"initial weights have shape {init_W.shape}, expected {(d, d_h)}")
        W1 = np.array(init_W, dtype=np.float64)
    else:
        scale = 4.0 if config.hidden_kind == ActivationKind.SIGMOID else 1.0
        bound = scale * math.sqrt(6.0 / (d + d_h))
        W1 = init_rng.uniform(-bound, bound, (d, d_h))
    b1 = np.zeros(d_h) if init_b is None else np.array(init_b, dtype=np.float64).reshape(d_h)
    bound = math.sqrt(6.0 / (d_h + C))
    net = OneHiddenNet(W1, b1, init_rng.uniform(-bound, bound, (d_h, C)), np.zeros(C), config.hidden_kind)

    pretrained = "pretrained" if init_W is not None else "random"
    logger.info(f"Fine-tuning a {d}-{d_h}-{C} network from {pretrained} weights for {config.epochs} epochs")
    alpha = config.learning_rate
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(labels))
        try:
            for start in range(0, len(labels), config.batch_size):
                batch = order[start:start + config.batch_size]
                g = network_gradients(net, X[batch], labels[batch], config.weight_decay)
                net = dataclasses.replace(net, W1=net.W1 - alpha * g.W1, b1=net.b1 - alpha * g.b1,
                                          W2=net.W2 - alpha * g.W2, b2=net.b2 - alpha * g.b2)
            loss = network_loss(net, X, labels, config.weight_decay)
        except NonFiniteError as error:
            raise DivergenceError(f"divergence at epoch {epoch}") from error
        if not math.isfinite(loss):
            raise DivergenceError(f"divergence at epoch {epoch}")
        logger.debug(f"1HNN epoch {epoch}/{config.epochs}: loss {loss:.6f}")
    return net


def predict_network(net: OneHiddenNet, X: FloatArray) -> IntArray:
    """The most probable class of every row; ties go to the lowest class id."""
    return np.argmax(_network_forward(net, np.atleast_2d(X))[2], axis=1).astype(np.int64)


def accuracy(predicted: IntArray, labels: IntArray) -> float:
    """Percentage of correct predictions."""
    if len(predicted) != len(labels) or len(labels) == 0:
        raise ValueError(f"cannot score {len(predicted)} predictions against {len(labels)} labels")
    return float(100.0 * np.mean(np.asarray(predicted) == np.asarray(labels)))


def stratified_folds(labels: IntArray, folds: int, r: RandomSource) -> list[tuple[IntArray, IntArray]]:
    """
    Split sample indices into `folds` folds that keep the class ratios.

    The members of each class are shuffled and dealt round-robin; the dealing continues from
    class to class, so fold sizes differ by at most one.

    :return: (training indices, validation indices) for each fold, both sorted.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if len(labels) < folds:
        raise ValueError(f"cannot split {len(labels)} samples into {folds} folds")
    assignment = np.empty(len(labels), dtype=np.int64)
    dealt = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < folds:
            raise ValueError(f"class {c} has {len(members)} samples, fewer than {folds} folds")
        shuffled = members[r.permutation(len(members))]
        assignment[shuffled] = (dealt + np.arange(len(members))) % folds
        dealt += len(members)

    return [(np.flatnonzero(assignment != k), np.flatnonzero(assignment == k)) for k in range(folds)]


def linear_svm_scorer(epochs: int = DEFAULT_SVM_EPOCHS) -> Evaluate:
    """Score a `{"C_reg": ...}` grid point by validation accuracy of a linear SVM."""
    def evaluate(point: GridPoint, X_train: FloatArray, y_train: IntArray, X_val: FloatArray, y_val: IntArray,
                 seed: int) -> float:
        model = train_linear_svm(X_train, y_train, C_reg=float(point["C_reg"]),
                                 epochs=int(point.get("epochs", epochs)), seed=seed)
        return accuracy(predict(model, X_val), y_val)
    return evaluate


def network_scorer(config: FineTuneConfig, init_W: FloatArray | None = None,
                   init_b: FloatArray | None = None, num_classes: int | None = None) -> Evaluate:
    """Score grid points whose keys are `FineTuneConfig` fields by validation accuracy of a 1HNN."""
    def evaluate(point: GridPoint, X_train: FloatArray, y_train: IntArray, X_val: FloatArray, y_val: IntArray,
                 seed: int) -> float:
        net = fine_tune_1hnn(init_W, X_train, y_train, dataclasses.replace(config, seed=seed, **point),
                             init_b=init_b, num_classes=num_classes)
        return accuracy(predict_network(net, X_val), y_val)
    return evaluate


def cross_validate(X: FloatArray, labels: IntArray, grid: Sequence[GridPoint], folds: int, seed: int,
                   evaluate: Evaluate | None = None) -> GridPoint:
    """
    Pick the grid point with the best mean validation accuracy over stratified folds.

    :param X: One sample per row.
    :param labels: Class ids.
    :param grid: Hyperparameter settings, in order of preference for ties.
    :param folds: Number of folds.
    :param seed: Seeds the folds and each fold's training.
    :param evaluate: Trains on one split and returns validation accuracy; a linear SVM scorer by default.
    :return: The winning grid point.
    """
    if not grid:
        raise ValueError("cross validation needs a non-empty grid")
    evaluate = evaluate or linear_svm_scorer()
    splits = stratified_folds(labels, folds, RandomSource(seed).fork(0))
    labels = np.asarray(labels, dtype=np.int64)

    best_point, best_score = grid[0], -math.inf
    for point in grid:
        scores = [evaluate(point, X[train], labels[train], X[val], labels[val], seed + fold)
                  for fold, (train, val) in enumerate(splits)]
        mean_score = float(np.mean(scores))
        logger.debug(f"{folds}-fold cross validation of {point}: mean accuracy {mean_score:.2f}")
        if mean_score > best_score:
            best_point, best_score = point, mean_score
    logger.info(f"Cross validation picked {best_point} (mean accuracy {best_score:.2f})")
    return best_point
