"""
Single-task and multi-task autoencoders trained by stochastic gradient descent.

A multi-task autoencoder shares one encoder (W, b_enc) across M domain-specific decoders
(V[l], b_dec[l]). Training visits the tasks l = 0..M-1 in order every epoch; task l maps every
row of X_bar to the matching row of view l, so both self-domain and between-domain
reconstructions are learnt. A single-task autoencoder is the M = 1 case trained on all views
concatenated. Zero-masking corruption of the inputs turns either into its denoising variant.
"""
from __future__ import annotations
import csv
import dataclasses
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
import numpy as np
from lib import checkpoint
from lib.core_math import NonFiniteError, RandomSource, activation, activation_derivative
from lib.data_pipeline import MultiDomainCorpus, TrainingMatrices, assemble_training_matrices, rand_sel
from lib.mtae_types import ActivationKind, FloatArray, LossKind, MANIFEST_TYPE
from lib.timer import Timer, sec_str, to_seconds

logger = logging.getLogger(__name__)

AUTOENCODER_KIND = "autoencoder"
LOG_CLIP = 1e-15

# Forks of RandomSource(config.seed), one per concern.
INIT_STREAM = 0
ORDER_STREAM = 1
CORRUPTION_STREAM = 2
SELECTION_STREAM = 3


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss or parameter."""


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter of one feature-learning run."""

    learning_rate: float
    weight_decay: float
    epochs: int
    hidden_dim: int
    corruption_level: float = 0.0
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    batch_size: int = 1
    seed: int = 0
    early_stop: tuple[int, float] | None = None
    enc_kind: ActivationKind = ActivationKind.SIGMOID
    dec_kind: ActivationKind = ActivationKind.SIGMOID

    def __post_init__(self) -> None:
        """Check the ranges and pairings."""
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        object.__setattr__(self, "enc_kind", ActivationKind(self.enc_kind))
        object.__setattr__(self, "dec_kind", ActivationKind(self.dec_kind))
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.learning_rate == 0:
            logger.warning("learning_rate is 0; training will leave the parameters at their initial values.")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.corruption_level <= 1.0:
            raise ValueError(f"corruption_level must be in [0, 1], got {self.corruption_level}")
        if self.loss_kind == LossKind.CROSS_ENTROPY and self.dec_kind != ActivationKind.SIGMOID:
            raise ValueError("cross_entropy loss needs a sigmoid decoder")
        if self.early_stop is not None:
            window, tolerance = self.early_stop
            if window < 1 or tolerance < 0:
                raise ValueError(f"early_stop needs a window >= 1 and a tolerance >= 0, got {self.early_stop}")

    def to_dict(self) -> MANIFEST_TYPE:
        """Plain values for manifests and logs."""
        return {"learning_rate": self.learning_rate,
                "weight_decay": self.weight_decay,
                "epochs": self.epochs,
                "hidden_dim": self.hidden_dim,
                "corruption_level": self.corruption_level,
                "loss_kind": self.loss_kind.value,
                "batch_size": self.batch_size,
                "seed": self.seed,
                "early_stop": list(self.early_stop) if self.early_stop else None,
                "enc_kind": self.enc_kind.value,
                "dec_kind": self.dec_kind.value}

    @classmethod
    def from_dict(cls, values: MANIFEST_TYPE) -> TrainConfig:
        """Inverse of `to_dict`."""
        early_stop = values.get("early_stop")
        return cls(**(values | {"early_stop": (int(early_stop[0]), float(early_stop[1])) if early_stop else None}))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """A shared encoder and M domain-specific decoders."""

    W: FloatArray
    b_enc: FloatArray
    V: tuple[FloatArray, ...]
    b_dec: tuple[FloatArray, ...]
    enc_kind: ActivationKind = ActivationKind.SIGMOID
    dec_kind: ActivationKind = ActivationKind.SIGMOID

    def __post_init__(self) -> None:
        """Check that the shapes fit together."""
        d_x, d_h = self.W.shape
        if not self.V or len(self.V) != len(self.b_dec):
            raise ValueError(f"need M >= 1 decoders with one bias each, got {len(self.V)} and {len(self.b_dec)}")
        if self.b_enc.shape != (d_h,):
            raise ValueError(f"encoder bias has shape {self.b_enc.shape}, expected ({d_h},)")
        for V, b in zip(self.V, self.b_dec):
            if V.shape != (d_h, d_x) or b.shape != (d_x,):
                raise ValueError(f"decoder of shape {V.shape} / {b.shape} does not fit encoder {self.W.shape}")

    @property
    def d_x(self) -> int:
        """Input dimensionality."""
        return int(self.W.shape[0])

    @property
    def d_h(self) -> int:
        """Number of hidden units."""
        return int(self.W.shape[1])

    @property
    def M(self) -> int:
        """Number of decoders."""
        return len(self.V)

    def arrays(self) -> dict[str, FloatArray]:
        """Every parameter array by name."""
        named = {"W": self.W, "b_enc": self.b_enc}
        for l, (V, b) in enumerate(zip(self.V, self.b_dec)):
            named[f"V{l}"] = V
            named[f"b_dec{l}"] = b
        return named


@dataclass(frozen=True, eq=False)
class Gradients:
    """Gradients for the shared encoder and decoder `task`; every other decoder's gradient is zero."""

    task: int
    W: FloatArray
    b_enc: FloatArray
    V: FloatArray
    b_dec: FloatArray


@dataclass
class TrainTrace:
    """Per-epoch reconstruction losses and timings of a training run."""

    task_losses: list[FloatArray] = field(default_factory=list)
    """One M×M grid per epoch: entry [k, l] is the mean loss of reconstructing view l from view k."""
    epoch_seconds: list[float] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def mean_losses(self) -> list[float]:
        """Mean loss over all tasks, per epoch."""
        return [float(grid.mean()) for grid in self.task_losses]


def init_params(d_x: int, d_h: int, M: int, enc_kind: ActivationKind | str, dec_kind: ActivationKind | str,
                r: RandomSource) -> ModelParams:
    """
    Draw small random weights and zero biases.

    Weights are uniform in ±√(6/(fan_in+fan_out)), four times wider for sigmoid layers.
    """
    def bound(kind: ActivationKind) -> float:
        scale = 4.0 if kind == ActivationKind.SIGMOID else 1.0
        return scale * math.sqrt(6.0 / (d_x + d_h))

    enc_kind = ActivationKind(enc_kind)
    dec_kind = ActivationKind(dec_kind)
    W = r.uniform(-bound(enc_kind), bound(enc_kind), (d_x, d_h))
    V = tuple(r.uniform(-bound(dec_kind), bound(dec_kind), (d_h, d_x)) for _ in range(M))
    return ModelParams(W, np.zeros(d_h), V, tuple(np.zeros(d_x) for _ in range(M)), enc_kind, dec_kind)


def _check_input(p: ModelParams, x: FloatArray) -> None:
    if x.shape[-1] != p.d_x:
        raise ValueError(f"input has {x.shape[-1]} features, the model expects {p.d_x}")


def _check_task(p: ModelParams, l: int) -> None:
    if not 0 <= l < p.M:
        raise ValueError(f"domain index {l} is out of range for {p.M} decoders")


def mtae_forward(p: ModelParams, x: FloatArray, l: int) -> tuple[FloatArray, FloatArray]:
    """
    Encode `x` with the shared encoder and reconstruct it with decoder `l`.

    :return: The hidden representation h and the reconstruction x_hat.
    """
    _check_input(p, x)
    _check_task(p, l)
    h = activation(x @ p.W + p.b_enc, p.enc_kind)
    x_hat = activation(h @ p.V[l] + p.b_dec[l], p.dec_kind)
    return h, x_hat


def ae_forward(p: ModelParams, x: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Forward pass of a single-task autoencoder (decoder 0)."""
    return mtae_forward(p, x, 0)


def encode(p: ModelParams, X: FloatArray) -> FloatArray:
    """The learnt feature map, applied to every row of `X`."""
    _check_input(p, X)
    return activation(X @ p.W + p.b_enc, p.enc_kind)


def reconstruct(p: ModelParams, X: FloatArray, l: int) -> FloatArray:
    """Decoder `l` reconstructions of every row of `X`."""
    return mtae_forward(p, X, l)[1]


def corrupt_zero_mask(x: FloatArray, level: float, r: RandomSource) -> FloatArray:
    """Set each coordinate to 0 independently with probability `level`."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"corruption level {level} is outside [0, 1]")
    return x * (1.0 - r.bernoulli_mask(x.shape, level))


def _row_losses(x_hat: FloatArray, target: FloatArray, kind: LossKind | str) -> FloatArray:
    """Loss of every row (or of the single vector) of a reconstruction."""
    if x_hat.shape != target.shape:
        raise ValueError(f"reconstruction shape {x_hat.shape} differs from target shape {target.shape}")
    if LossKind(kind) == LossKind.SQUARED:
        return 0.5 * np.sum((x_hat - target) ** 2, axis=-1)

    if np.any((target < 0) | (target > 1)) or np.any((x_hat < 0) | (x_hat > 1)):
        raise ValueError("cross_entropy needs targets and reconstructions in [0, 1]")
    y = np.clip(x_hat, LOG_CLIP, 1.0 - LOG_CLIP)
    return -np.sum(target * np.log(y) + (1.0 - target) * np.log(1.0 - y), axis=-1)


def reconstruction_loss(x_hat: FloatArray, target: FloatArray, kind: LossKind | str) -> float:
    """
    Loss of a reconstruction against its target.

    `squared` is ½‖x_hat − target‖²; `cross_entropy` is −Σ t·log ŷ + (1−t)·log(1−ŷ). Reconstructions
    that saturate at exactly 0 or 1 are clipped by 1e-15 before taking logarithms.
    """
    return float(np.sum(_row_losses(np.asarray(x_hat, dtype=np.float64), np.asarray(target, dtype=np.float64), kind)))


def gradients(p: ModelParams, x: FloatArray, target: FloatArray, l: int, loss_kind: LossKind | str,
              weight_decay: float) -> Gradients:
    """
    Backpropagate L(f_l(x), target) + η(‖W‖² + ‖V[l]‖²).

    :param p: The model.
    :param x: One input vector (possibly corrupted) or a batch of them as rows. For a batch the
        loss is averaged over the rows.
    :param target: The clean target(s) from view `l`.
    :param l: The decoder being trained.
    :param loss_kind: `cross_entropy` or `squared`.
    :param weight_decay: η.
    :return: Gradients for W, b_enc, V[l] and b_dec[l].
    """
    X = np.atleast_2d(x)
    T = np.atleast_2d(target)
    _check_input(p, X)
    _check_task(p, l)
    if X.shape != T.shape:
        raise ValueError(f"input shape {X.shape} differs from target shape {T.shape}")

    a_hidden = X @ p.W + p.b_enc
    h = activation(a_hidden, p.enc_kind)
    a_out = h @ p.V[l] + p.b_dec[l]
    y = activation(a_out, p.dec_kind)

    if LossKind(loss_kind) == LossKind.SQUARED:
        delta_out = (y - T) * activation_derivative(a_out, p.dec_kind)
    elif p.dec_kind == ActivationKind.SIGMOID:
        delta_out = y - T
    else:
        clipped = np.clip(y, LOG_CLIP, 1.0 - LOG_CLIP)
        delta_out = ((1.0 - T) / (1.0 - clipped) - T / clipped) * activation_derivative(a_out, p.dec_kind)
    delta_out = delta_out / X.shape[0]
    delta_hidden = (delta_out @ p.V[l].T) * activation_derivative(a_hidden, p.enc_kind)

    return Gradients(task=l,
                     W=X.T @ delta_hidden + 2.0 * weight_decay * p.W,
                     b_enc=delta_hidden.sum(axis=0),
                     V=h.T @ delta_out + 2.0 * weight_decay * p.V[l],
                     b_dec=delta_out.sum(axis=0))


def sgd_step(p: ModelParams, grads: Gradients, alpha: float) -> ModelParams:
    """Move the encoder and decoder `grads.task` against their gradients; other decoders are kept as they are."""
    if alpha < 0:
        raise ValueError(f"learning rate {alpha} is negative")
    l = grads.task
    V = list(p.V)
    b_dec = list(p.b_dec)
    V[l] = p.V[l] - alpha * grads.V
    b_dec[l] = p.b_dec[l] - alpha * grads.b_dec
    return dataclasses.replace(p, W=p.W - alpha * grads.W, b_enc=p.b_enc - alpha * grads.b_enc,
                               V=tuple(V), b_dec=tuple(b_dec))


def task_loss_grid(p: ModelParams, matrices: TrainingMatrices, loss_kind: LossKind | str) -> FloatArray:
    """Mean clean-input loss of every (input view, target view) pair."""
    blocks = matrices.X_bar.shape[0] // matrices.block_rows
    grid = np.zeros((blocks, matrices.M))
    for l in range(matrices.M):
        losses = _row_losses(reconstruct(p, matrices.X_bar, l), matrices.X_bar_l[l], loss_kind)
        grid[:, l] = losses.reshape(blocks, matrices.block_rows).mean(axis=1)
    return grid


def _should_stop(mean_losses: list[float], early_stop: tuple[int, float] | None) -> bool:
    """Whether the mean loss changed by less than the tolerance over the window."""
    if early_stop is None:
        return False
    window, tolerance = early_stop
    if len(mean_losses) <= window:
        return False
    previous, current = mean_losses[-1 - window], mean_losses[-1]
    return abs(previous - current) <= tolerance * max(abs(previous), 1e-300)


def _fit(config: TrainConfig, params: ModelParams, epoch_matrices: Callable[[], TrainingMatrices],
         run_name: str) -> tuple[ModelParams, TrainTrace]:
    """The epoch loop shared by every autoencoder variant."""
    root = RandomSource(config.seed)
    order_rng = root.fork(ORDER_STREAM)
    noise_rng = root.fork(CORRUPTION_STREAM)
    trace = TrainTrace()
    timer = Timer()
    logger.info(f"Training {run_name}: d_x={params.d_x}, d_h={params.d_h}, M={params.M}, "
                f"{config.epochs} epochs, learning rate {config.learning_rate}, corruption {config.corruption_level}")

    for epoch in range(1, config.epochs + 1):
        matrices = epoch_matrices()
        rows = matrices.X_bar.shape[0]
        try:
            for l in range(matrices.M):
                order = order_rng.permutation(rows)
                for start in range(0, rows, config.batch_size):
                    batch = order[start:start + config.batch_size]
                    inputs = matrices.X_bar[batch]
                    if config.corruption_level > 0:
                        inputs = corrupt_zero_mask(inputs, config.corruption_level, noise_rng)
                    grads = gradients(params, inputs, matrices.X_bar_l[l][batch], l, config.loss_kind,
                                      config.weight_decay)
                    params = sgd_step(params, grads, config.learning_rate)
            grid = task_loss_grid(params, matrices, config.loss_kind)
        except NonFiniteError as error:
            raise DivergenceError(f"divergence at epoch {epoch}") from error
        if not np.all(np.isfinite(grid)):
            raise DivergenceError(f"divergence at epoch {epoch}")

        lap = timer.lap()
        trace.task_losses.append(grid)
        trace.epoch_seconds.append(to_seconds(lap))
        logger.debug(f"{run_name} epoch {epoch}/{config.epochs}: mean loss {grid.mean():.6f} ({sec_str(lap)} s)")

        if _should_stop(trace.mean_losses, config.early_stop):
            trace.stopped_early = True
            logger.info(f"{run_name}: average loss stabilized, stopping after epoch {epoch}.")
            break

    logger.info(f"Finished {run_name} in {sec_str(timer.time_since_reset())} s, "
                f"final mean loss {trace.mean_losses[-1]:.6f}")
    return params, trace


def train_single_task(config: TrainConfig, data: FloatArray) -> tuple[ModelParams, TrainTrace]:
    """
    Train an autoencoder (a denoising one when `config.corruption_level` > 0).

    :param config: The hyperparameters.
    :param data: All source views concatenated, one sample per row.
    :return: The learnt parameters (M = 1) and the trace.
    """
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError(f"training data needs at least one row, got shape {data.shape}")
    params = init_params(data.shape[1], config.hidden_dim, 1, config.enc_kind, config.dec_kind,
                         RandomSource(config.seed).fork(INIT_STREAM))
    matrices = TrainingMatrices(data, (data,), data.shape[0])
    name = "DAE" if config.corruption_level > 0 else "AE"
    return _fit(config, params, lambda: matrices, name)


def train_mtae(config: TrainConfig, corpus: MultiDomainCorpus) -> tuple[ModelParams, TrainTrace]:
    """
    Train a multi-task autoencoder (D-MTAE when `config.corruption_level` > 0).

    Every epoch starts with RAND-SEL, so unaligned or unbalanced corpora are handled. A single
    view keeps all of its rows, and training then follows `train_single_task` exactly.

    :param config: The hyperparameters.
    :param corpus: The source views.
    :return: The learnt parameters (one decoder per view) and the trace.
    """
    params = init_params(corpus.d_x, config.hidden_dim, corpus.M, config.enc_kind, config.dec_kind,
                         RandomSource(config.seed).fork(INIT_STREAM))
    name = "D-MTAE" if config.corruption_level > 0 else "MTAE"
    if corpus.M == 1:
        matrices = assemble_training_matrices(corpus)
        return _fit(config, params, lambda: matrices, name)

    selection_rng = RandomSource(config.seed).fork(SELECTION_STREAM)
    rand_sel(corpus, RandomSource(config.seed).fork(SELECTION_STREAM))  # Fail before training on missing classes.
    return _fit(config, params, lambda: assemble_training_matrices(rand_sel(corpus, selection_rng)), name)


def save_model(p: ModelParams, config: TrainConfig, directory: str, domains: list[str] | None = None) -> None:
    """Write the parameters and the config that produced them as a checkpoint."""
    metadata = {"d_x": p.d_x, "d_h": p.d_h, "M": p.M,
                "enc_kind": p.enc_kind.value, "dec_kind": p.dec_kind.value,
                "domains": domains or [], "train_config": config.to_dict()}
    checkpoint.save_checkpoint(directory, AUTOENCODER_KIND, p.arrays(), metadata)


def load_model(directory: str) -> tuple[ModelParams, MANIFEST_TYPE]:
    """Read a checkpoint written by `save_model`."""
    metadata, arrays = checkpoint.load_checkpoint(directory, AUTOENCODER_KIND)
    M = int(metadata["M"])
    params = ModelParams(arrays["W"], arrays["b_enc"],
                         tuple(arrays[f"V{l}"] for l in range(M)), tuple(arrays[f"b_dec{l}"] for l in range(M)),
                         ActivationKind(metadata["enc_kind"]), ActivationKind(metadata["dec_kind"]))
    return params, metadata


def write_trace(trace: TrainTrace, path: str) -> None:
    """Write one CSV row per epoch: seconds, mean loss and every task loss."""
    with open(path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file, lineterminator="\n")
        shape = trace.task_losses[0].shape if trace.task_losses else (0, 0)
        writer.writerow(["epoch", "seconds", "mean_loss"] + [f"loss_{k}_{l}" for k in range(shape[0])
                                                             for l in range(shape[1])])
        for epoch, (grid, seconds_taken) in enumerate(zip(trace.task_losses, trace.epoch_seconds), start=1):
            writer.writerow([epoch, repr(seconds_taken), repr(float(grid.mean()))] + [repr(float(v)) for v in grid.ravel()])
