"""Tests for the autoencoder forward pass, gradients and training loops."""
import csv
import dataclasses
import os
import numpy as np
import numpy.testing as npt
import pytest
from lib import autoencoders
from lib.autoencoders import DivergenceError, ModelParams, TrainConfig
from lib.core_math import RandomSource
from lib.data_pipeline import CorpusError, DomainView, MultiDomainCorpus
from lib.mtae_types import ActivationKind, LossKind


def small_params(M: int = 2, enc_kind: str = "sigmoid", dec_kind: str = "sigmoid", seed: int = 0) -> ModelParams:
    """A model with 5 inputs and 3 hidden units and nonzero biases."""
    r = RandomSource(seed)
    p = autoencoders.init_params(5, 3, M, enc_kind, dec_kind, r)
    return dataclasses.replace(p, b_enc=r.uniform(-0.5, 0.5, 3), b_dec=tuple(r.uniform(-0.5, 0.5, 5) for _ in range(M)))


def objective(p: ModelParams, X: np.ndarray, T: np.ndarray, l: int, loss_kind: str, weight_decay: float) -> float:
    """Mean row loss of task `l` plus the weight decay term."""
    x_hat = autoencoders.reconstruct(p, X, l)
    mean_loss = autoencoders.reconstruction_loss(x_hat, T, loss_kind) / X.shape[0]
    return mean_loss + weight_decay * float(np.sum(p.W ** 2) + np.sum(p.V[l] ** 2))


def numeric_gradient(p: ModelParams, name: str, X: np.ndarray, T: np.ndarray, l: int, loss_kind: str,
                     weight_decay: float) -> np.ndarray:
    """Central differences of `objective` with respect to one parameter array."""
    def replaced(values: np.ndarray) -> ModelParams:
        if name == "V":
            return dataclasses.replace(p, V=tuple(values if k == l else v for k, v in enumerate(p.V)))
        if name == "b_dec":
            return dataclasses.replace(p, b_dec=tuple(values if k == l else b for k, b in enumerate(p.b_dec)))
        return dataclasses.replace(p, **{name: values})

    base = p.V[l] if name == "V" else p.b_dec[l] if name == "b_dec" else getattr(p, name)
    grad = np.zeros_like(base)
    step = 1e-6
    for index in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[index] += step
        minus[index] -= step
        grad[index] = (objective(replaced(plus), X, T, l, loss_kind, weight_decay)
                       - objective(replaced(minus), X, T, l, loss_kind, weight_decay)) / (2 * step)
    return grad


def unit_data(rows: int, d_x: int, seed: int) -> np.ndarray:
    """Random data in [0, 1]."""
    return RandomSource(seed).uniform(size=(rows, d_x))


def test_train_config_checks() -> None:
    """Test the hyperparameter range checks."""
    config = TrainConfig(learning_rate=0.1, weight_decay=0.0, epochs=2, hidden_dim=3, loss_kind=LossKind.SQUARED,
                         enc_kind=ActivationKind.RELU, dec_kind=ActivationKind.LINEAR)
    assert config.loss_kind == LossKind.SQUARED
    assert config.dec_kind == ActivationKind.LINEAR
    assert TrainConfig.from_dict(config.to_dict()) == config

    stopping = TrainConfig(0.1, 0.0, 2, 3, early_stop=(2, 0.01))
    assert TrainConfig.from_dict(stopping.to_dict()) == stopping

    with pytest.raises(ValueError, match="sigmoid decoder"):
        TrainConfig(0.1, 0.0, 2, 3, dec_kind=ActivationKind.RELU)
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(0.1, 0.0, 0, 3)
    with pytest.raises(ValueError, match="corruption_level"):
        TrainConfig(0.1, 0.0, 1, 3, corruption_level=1.5)
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig(-0.1, 0.0, 1, 3)
    with pytest.raises(ValueError, match="early_stop"):
        TrainConfig(0.1, 0.0, 1, 3, early_stop=(0, 0.1))


def test_init_params() -> None:
    """Test the shapes, zero biases and weight ranges of a fresh model."""
    p = autoencoders.init_params(6, 4, 3, "sigmoid", "relu", RandomSource(1))
    assert (p.d_x, p.d_h, p.M) == (6, 4, 3)
    assert p.W.shape == (6, 4)
    assert all(V.shape == (4, 6) for V in p.V)
    assert not np.any(p.b_enc)
    assert not any(np.any(b) for b in p.b_dec)
    assert np.abs(p.W).max() <= 4.0 * np.sqrt(0.6)
    assert np.abs(p.V[2]).max() <= np.sqrt(0.6)
    assert sorted(p.arrays()) == ["V0", "V1", "V2", "W", "b_dec0", "b_dec1", "b_dec2", "b_enc"]

    again = autoencoders.init_params(6, 4, 3, "sigmoid", "relu", RandomSource(1))
    npt.assert_array_equal(again.V[1], p.V[1])
    with pytest.raises(ValueError):
        ModelParams(p.W, p.b_enc, (p.V[0],), (np.zeros(5),))
    with pytest.raises(ValueError):
        ModelParams(p.W, p.b_enc, (), ())


def test_forward() -> None:
    """Test the forward pass shapes and ranges, and that batches match single rows."""
    p = small_params()
    X = unit_data(7, 5, 2)
    h, x_hat = autoencoders.mtae_forward(p, X[0], 1)
    assert h.shape == (3,)
    assert x_hat.shape == (5,)
    assert np.all((x_hat > 0) & (x_hat < 1))
    npt.assert_allclose(autoencoders.ae_forward(p, X[0])[1], autoencoders.reconstruct(p, X[:1], 0)[0])

    features = autoencoders.encode(p, X)
    assert features.shape == (7, 3)
    for row, feature in zip(X, features):
        npt.assert_allclose(autoencoders.encode(p, row), feature, rtol=1e-12, atol=1e-15)

    with pytest.raises(ValueError, match="out of range"):
        autoencoders.mtae_forward(p, X[0], 2)
    with pytest.raises(ValueError, match="features"):
        autoencoders.encode(p, np.zeros((2, 4)))


def test_corrupt_zero_mask() -> None:
    """Test the extreme corruption levels and that corruption only zeroes coordinates."""
    x = unit_data(4, 50, 3) + 1.0
    npt.assert_array_equal(autoencoders.corrupt_zero_mask(x, 0.0, RandomSource(0)), x)
    npt.assert_array_equal(autoencoders.corrupt_zero_mask(x, 1.0, RandomSource(0)), np.zeros_like(x))
    corrupted = autoencoders.corrupt_zero_mask(x, 0.5, RandomSource(0))
    kept = corrupted != 0
    npt.assert_array_equal(corrupted[kept], x[kept])
    assert 0.3 < kept.mean() < 0.7
    with pytest.raises(ValueError):
        autoencoders.corrupt_zero_mask(x, -0.1, RandomSource(0))


def test_reconstruction_loss() -> None:
    """Test both losses on hand-computed values and the cross-entropy range check."""
    assert autoencoders.reconstruction_loss(np.array([1.0, 2.0]), np.array([0.0, 0.0]), "squared") == 2.5
    assert autoencoders.reconstruction_loss(np.array([0.5]), np.array([1.0]), "cross_entropy") == pytest.approx(np.log(2))
    assert autoencoders.reconstruction_loss(np.array([0.0, 1.0]), np.array([0.0, 1.0]), "cross_entropy") < 1e-12
    saturated = autoencoders.reconstruction_loss(np.array([0.0]), np.array([1.0]), "cross_entropy")
    assert saturated == pytest.approx(-np.log(1e-15))
    batch_loss = autoencoders.reconstruction_loss(np.full((3, 2), 0.5), np.ones((3, 2)), "cross_entropy")
    assert batch_loss == pytest.approx(6 * np.log(2))

    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        autoencoders.reconstruction_loss(np.array([0.5]), np.array([2.0]), "cross_entropy")
    with pytest.raises(ValueError, match="shape"):
        autoencoders.reconstruction_loss(np.zeros(2), np.zeros(3), "squared")


@pytest.mark.parametrize("enc_kind,dec_kind,loss_kind", [("sigmoid", "sigmoid", "cross_entropy"),
                                                         ("sigmoid", "sigmoid", "squared"),
                                                         ("relu", "linear", "squared"),
                                                         ("linear", "sigmoid", "cross_entropy")])
def test_gradients_match_finite_differences(enc_kind: str, dec_kind: str, loss_kind: str) -> None:
    """Test the backpropagated gradients of a batch against central differences."""
    p = small_params(enc_kind=enc_kind, dec_kind=dec_kind, seed=4)
    X = unit_data(3, 5, 5)
    T = unit_data(3, 5, 6)
    grads = autoencoders.gradients(p, X, T, 1, loss_kind, 0.01)
    assert grads.task == 1
    for name, analytic in [("W", grads.W), ("b_enc", grads.b_enc), ("V", grads.V), ("b_dec", grads.b_dec)]:
        npt.assert_allclose(analytic, numeric_gradient(p, name, X, T, 1, loss_kind, 0.01), rtol=1e-4, atol=1e-7)


def test_gradients_single_row() -> None:
    """Test that a single vector gives the same gradients as a batch of one row."""
    p = small_params()
    x = unit_data(1, 5, 7)
    single = autoencoders.gradients(p, x[0], x[0], 0, "cross_entropy", 0.0)
    batch = autoencoders.gradients(p, x, x, 0, "cross_entropy", 0.0)
    npt.assert_array_equal(single.W, batch.W)
    npt.assert_array_equal(single.b_dec, batch.b_dec)
    with pytest.raises(ValueError, match="target shape"):
        autoencoders.gradients(p, x, np.zeros((2, 5)), 0, "squared", 0.0)


def test_sgd_step() -> None:
    """Test that a step moves the encoder and one decoder only."""
    p = small_params(M=3)
    X = unit_data(2, 5, 8)
    grads = autoencoders.gradients(p, X, X, 2, "cross_entropy", 0.0)
    stepped = autoencoders.sgd_step(p, grads, 0.5)
    npt.assert_allclose(stepped.W, p.W - 0.5 * grads.W)
    npt.assert_allclose(stepped.V[2], p.V[2] - 0.5 * grads.V)
    npt.assert_array_equal(stepped.V[0], p.V[0])
    npt.assert_array_equal(stepped.b_dec[1], p.b_dec[1])
    npt.assert_array_equal(autoencoders.sgd_step(p, grads, 0.0).W, p.W)
    with pytest.raises(ValueError):
        autoencoders.sgd_step(p, grads, -1.0)

    loss_before = objective(p, X, X, 2, "cross_entropy", 0.0)
    assert objective(autoencoders.sgd_step(p, grads, 0.01), X, X, 2, "cross_entropy", 0.0) < loss_before


def test_train_single_task() -> None:
    """Test that training lowers the reconstruction loss and is reproducible."""
    data = unit_data(20, 6, 9)
    config = TrainConfig(learning_rate=0.1, weight_decay=0.0, epochs=30, hidden_dim=4, seed=3)
    params, trace = autoencoders.train_single_task(config, data)
    assert params.M == 1
    assert len(trace.task_losses) == 30
    assert len(trace.epoch_seconds) == 30
    assert trace.task_losses[0].shape == (1, 1)
    assert trace.mean_losses[-1] < trace.mean_losses[0]
    assert not trace.stopped_early

    again, _ = autoencoders.train_single_task(config, data)
    npt.assert_array_equal(again.W, params.W)

    denoising = dataclasses.replace(config, corruption_level=0.3)
    noisy, _ = autoencoders.train_single_task(denoising, data)
    assert not np.array_equal(noisy.W, params.W)
    with pytest.raises(ValueError):
        autoencoders.train_single_task(config, np.zeros((0, 6)))


def test_single_view_mtae_is_an_autoencoder() -> None:
    """Test that a multi-task autoencoder on one view trains exactly like a single-task one."""
    data = unit_data(12, 5, 10)
    config = TrainConfig(learning_rate=0.1, weight_decay=0.001, epochs=3, hidden_dim=3, corruption_level=0.2, seed=5)
    single, single_trace = autoencoders.train_single_task(config, data)
    corpus = MultiDomainCorpus((DomainView("M", data, np.zeros(12, dtype=np.int64)),))
    multi, multi_trace = autoencoders.train_mtae(config, corpus)
    npt.assert_array_equal(multi.W, single.W)
    npt.assert_array_equal(multi.V[0], single.V[0])
    assert multi_trace.mean_losses == single_trace.mean_losses


def test_train_mtae() -> None:
    """Test multi-task training on unbalanced views and its loss grid."""
    r = RandomSource(11)
    views = tuple(DomainView(name, r.uniform(size=(n, 6)), np.array(labels, dtype=np.int64))
                  for name, n, labels in [("A", 6, [0, 0, 0, 1, 1, 1]), ("B", 4, [0, 1, 1, 1]), ("C", 5, [1, 0, 0, 1, 0])])
    config = TrainConfig(learning_rate=0.1, weight_decay=0.0, epochs=20, hidden_dim=4, batch_size=2, seed=1)
    params, trace = autoencoders.train_mtae(config, MultiDomainCorpus(views))
    assert params.M == 3
    assert trace.task_losses[-1].shape == (3, 3)
    assert trace.mean_losses[-1] < trace.mean_losses[0]

    missing = MultiDomainCorpus((views[0], DomainView("D", np.zeros((2, 6)), np.array([0, 0]))))
    with pytest.raises(CorpusError, match="class absent in domain"):
        autoencoders.train_mtae(config, missing)


def test_two_view_training_converges() -> None:
    """Test that two views of two 2-pixel patterns are learnt to a tenth of the first epoch's loss."""
    first = DomainView("A", np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    second = DomainView("B", np.array([[1.0, 1.0], [0.0, 0.0]]), np.array([0, 1]))
    for seed in range(3):
        config = TrainConfig(learning_rate=0.3, weight_decay=0.0, epochs=200, hidden_dim=2, loss_kind=LossKind.SQUARED,
                             enc_kind=ActivationKind.SIGMOID, dec_kind=ActivationKind.LINEAR, seed=seed)
        _, trace = autoencoders.train_mtae(config, MultiDomainCorpus((first, second)))
        assert len(trace.mean_losses) == 200
        assert trace.mean_losses[-1] <= 0.1 * trace.mean_losses[0]


def test_divergence() -> None:
    """Test that exploding parameters stop training with a divergence error."""
    data = unit_data(20, 6, 12) * 10.0
    config = TrainConfig(learning_rate=1000.0, weight_decay=0.0, epochs=50, hidden_dim=4, loss_kind=LossKind.SQUARED,
                         enc_kind=ActivationKind.LINEAR, dec_kind=ActivationKind.LINEAR)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError, match="divergence at epoch"):
        autoencoders.train_single_task(config, data)


def test_early_stop() -> None:
    """Test that a generous tolerance stops training once the window is filled."""
    config = TrainConfig(learning_rate=0.1, weight_decay=0.0, epochs=10, hidden_dim=3, early_stop=(1, 1.0))
    _, trace = autoencoders.train_single_task(config, unit_data(10, 4, 13))
    assert trace.stopped_early
    assert len(trace.task_losses) == 2


def test_save_and_load_model() -> None:
    """Test that a checkpoint restores the parameters and records the training config."""
    p = small_params(M=2, enc_kind="relu", dec_kind="linear")
    config = TrainConfig(0.05, 0.001, 7, 3, loss_kind=LossKind.SQUARED, dec_kind=ActivationKind.LINEAR)
    autoencoders.save_model(p, config, "TEMP/ae-model", domains=["M", "M15"])
    loaded, metadata = autoencoders.load_model("TEMP/ae-model")
    assert loaded.enc_kind == ActivationKind.RELU
    assert loaded.dec_kind == ActivationKind.LINEAR
    for name, array in p.arrays().items():
        npt.assert_array_equal(loaded.arrays()[name], array)
    assert metadata["domains"] == ["M", "M15"]
    assert TrainConfig.from_dict(metadata["train_config"]) == config


def test_write_trace() -> None:
    """Test the header and one row of the trace file."""
    os.makedirs("TEMP", exist_ok=True)
    trace = autoencoders.TrainTrace([np.array([[1.0, 2.0], [3.0, 4.0]])], [0.5])
    autoencoders.write_trace(trace, "TEMP/trace.csv")
    with open("TEMP/trace.csv") as file:
        rows = list(csv.reader(file))
    assert rows[0] == ["epoch", "seconds", "mean_loss", "loss_0_0", "loss_0_1", "loss_1_0", "loss_1_1"]
    assert rows[1] == ["1", "0.5", "2.5", "1.0", "2.0", "3.0", "4.0"]
