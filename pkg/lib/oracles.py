"""
Self-checks run by `mtae-lab.py oracle`.

Analytic gradients are compared with central finite differences on small random models, and the
combinatorial parts (RAND-SEL, training matrix assembly, the SVM pocket) are checked on random
small corpora.
"""
from __future__ import annotations
import logging
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass
import numpy as np
from lib.analysis import encoder_jacobian
from lib.autoencoders import ModelParams, encode, gradients, init_params, mtae_forward, reconstruction_loss
from lib.classifiers import OneHiddenNet, network_gradients, network_loss, train_linear_svm
from lib.core_math import RandomSource, singular_values
from lib.data_pipeline import DomainView, MultiDomainCorpus, assemble_training_matrices, rand_sel
from lib.mtae_types import ActivationKind, FloatArray, LossKind
from lib.timer import Timer, sec_str

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
GRADIENT_TOLERANCE = 1e-6
RELATIVE_ERROR_FLOOR = 1e-2
JACOBIAN_TOLERANCE = 1e-6
SINGULAR_VALUE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class OracleResult:
    """The outcome of one oracle suite."""

    name: str
    passed: bool
    detail: str


def relative_error(analytic: FloatArray, numeric: FloatArray) -> float:
    """
    Largest per-coordinate |a − n| / max(|a| + |n|, floor).

    Coordinates whose magnitude is below `RELATIVE_ERROR_FLOOR` are in effect compared absolutely.
    """
    if np.size(analytic) == 0:
        return 0.0
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), RELATIVE_ERROR_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def numeric_gradient(f: Callable[[], float], array: FloatArray, step: float = FD_STEP) -> FloatArray:
    """Central differences of `f` with respect to every entry of `array`, which is perturbed in place and restored."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = f()
        flat[i] = original - step
        minus = f()
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2.0 * step)
    return grad


def _random_autoencoder(r: RandomSource) -> tuple[ModelParams, LossKind]:
    d_x = int(r.uniform(2, 9)[0])
    d_h = int(r.uniform(1, 7)[0])
    M = int(r.uniform(1, 4)[0])
    enc_kind = [ActivationKind.SIGMOID, ActivationKind.LINEAR][int(r.uniform(0, 2)[0])]
    loss_kind = [LossKind.CROSS_ENTROPY, LossKind.SQUARED][int(r.uniform(0, 2)[0])]
    dec_kind = ActivationKind.SIGMOID if loss_kind == LossKind.CROSS_ENTROPY else enc_kind
    p = init_params(d_x, d_h, M, enc_kind, dec_kind, r)
    biases = ModelParams(p.W, r.uniform(-0.5, 0.5, d_h), p.V, tuple(r.uniform(-0.5, 0.5, d_x) for _ in range(M)),
                         enc_kind, dec_kind)
    return biases, loss_kind


def check_autoencoder_gradients(fixtures: int, r: RandomSource) -> OracleResult:
    """Backpropagation of the regularised reconstruction loss against finite differences."""
    worst = 0.0
    for _ in range(fixtures):
        p, loss_kind = _random_autoencoder(r)
        batch = int(r.uniform(1, 4)[0])
        l = int(r.uniform(0, p.M)[0])
        x = r.uniform(0, 1, (batch, p.d_x))
        t = r.uniform(0, 1, (batch, p.d_x))
        eta = float(r.uniform(0, 0.01)[0])

        def objective() -> float:
            loss = reconstruction_loss(mtae_forward(p, x, l)[1], t, loss_kind) / batch
            return loss + eta * (float(np.sum(p.W ** 2)) + float(np.sum(p.V[l] ** 2)))

        g = gradients(p, x, t, l, loss_kind, eta)
        for analytic, array in [(g.W, p.W), (g.b_enc, p.b_enc), (g.V, p.V[l]), (g.b_dec, p.b_dec[l])]:
            worst = max(worst, relative_error(analytic, numeric_gradient(objective, array)))
    return OracleResult("autoencoder gradients", worst <= GRADIENT_TOLERANCE, f"worst relative error {worst:.2e}")


def check_network_gradients(fixtures: int, r: RandomSource) -> OracleResult:
    """Backpropagation of the softmax cross-entropy network against finite differences."""
    worst = 0.0
    for _ in range(fixtures):
        d = int(r.uniform(2, 9)[0])
        d_h = int(r.uniform(1, 7)[0])
        C = int(r.uniform(2, 5)[0])
        batch = int(r.uniform(1, 5)[0])
        kind = [ActivationKind.SIGMOID, ActivationKind.LINEAR][int(r.uniform(0, 2)[0])]
        net = OneHiddenNet(r.uniform(-1, 1, (d, d_h)), r.uniform(-0.5, 0.5, d_h), r.uniform(-1, 1, (d_h, C)),
                           r.uniform(-0.5, 0.5, C), kind)
        X = r.uniform(-1, 1, (batch, d))
        labels = (r.uniform(0, C, batch)).astype(np.int64)
        eta = float(r.uniform(0, 0.01)[0])

        g = network_gradients(net, X, labels, eta)
        for analytic, array in [(g.W1, net.W1), (g.b1, net.b1), (g.W2, net.W2), (g.b2, net.b2)]:
            numeric = numeric_gradient(lambda: network_loss(net, X, labels, eta), array)
            worst = max(worst, relative_error(analytic, numeric))
    return OracleResult("1hnn gradients", worst <= GRADIENT_TOLERANCE, f"worst relative error {worst:.2e}")


def check_encoder_jacobian(fixtures: int, r: RandomSource) -> OracleResult:
    """The encoder Jacobian against finite differences of the encoder."""
    worst = 0.0
    for _ in range(fixtures):
        d_x = int(r.uniform(2, 9)[0])
        d_h = int(r.uniform(1, 9)[0])
        p = init_params(d_x, d_h, 1, ActivationKind.SIGMOID, ActivationKind.SIGMOID, r)
        x = r.uniform(0, 1, d_x)
        numeric = np.zeros((d_h, d_x))
        for j in range(d_x):
            step = np.zeros(d_x)
            step[j] = FD_STEP
            numeric[:, j] = (encode(p, (x + step)[None, :])[0] - encode(p, (x - step)[None, :])[0]) / (2.0 * FD_STEP)
        worst = max(worst, relative_error(encoder_jacobian(p, x), numeric))
    return OracleResult("encoder jacobian", worst <= JACOBIAN_TOLERANCE, f"worst relative error {worst:.2e}")


def check_singular_values(fixtures: int, r: RandomSource) -> OracleResult:
    """Jacobi singular values against LAPACK."""
    worst = 0.0
    for _ in range(fixtures):
        rows = int(r.uniform(1, 9)[0])
        cols = int(r.uniform(1, 9)[0])
        m = r.normal((rows, cols))
        jacobi = singular_values(m, "jacobi")
        lapack = singular_values(m, "lapack")
        worst = max(worst, float(np.max(np.abs(jacobi - lapack)) / max(float(lapack[0]), 1e-300)))
    return OracleResult("jacobi singular values", worst <= SINGULAR_VALUE_TOLERANCE, f"worst relative error {worst:.2e}")


def random_unbalanced_corpus(r: RandomSource, num_views: int = 3, num_classes: int = 3, d_x: int = 2) -> MultiDomainCorpus:
    """Views with random sizes and 1 to 6 samples of every class, shuffled."""
    views = []
    for k in range(num_views):
        counts = (r.uniform(1, 7, num_classes)).astype(np.int64)
        labels = np.repeat(np.arange(num_classes, dtype=np.int64), counts)
        labels = labels[r.permutation(len(labels))]
        views.append(DomainView(f"V{k}", r.uniform(0, 1, (len(labels), d_x)), labels))
    return MultiDomainCorpus(tuple(views))


def check_rand_sel(fixtures: int, r: RandomSource) -> OracleResult:
    """RAND-SEL keeps the per-class minimum of every class in every view, aligned."""
    failures = 0
    for _ in range(fixtures):
        corpus = random_unbalanced_corpus(r, int(r.uniform(1, 5)[0]), int(r.uniform(1, 5)[0]))
        selected = rand_sel(corpus, r)
        minima = {c: min(Counter(view.labels.tolist())[c] for view in corpus.views) for c in corpus.classes}
        counts_ok = all(Counter(view.labels.tolist()) == Counter(minima) for view in selected.views)
        if not (counts_ok and selected.aligned):
            failures += 1
    return OracleResult("rand_sel balance", failures == 0, f"{failures} of {fixtures} corpora failed")


def check_training_matrices(fixtures: int, r: RandomSource) -> OracleResult:
    """Every (input view, target view) pair occurs exactly n times in the assembled matrices."""
    failures = 0
    for _ in range(fixtures):
        M = int(r.uniform(1, 5)[0])
        n = int(r.uniform(1, 6)[0])
        labels = np.zeros(n, dtype=np.int64)
        views = tuple(DomainView(f"V{k}", np.full((n, 1), float(k)), labels) for k in range(M))
        matrices = assemble_training_matrices(MultiDomainCorpus(views))
        pairs = Counter((int(matrices.X_bar[j, 0]), int(matrices.X_bar_l[l][j, 0]))
                        for l in range(M) for j in range(M * n))
        if pairs != Counter({(k, l): n for k in range(M) for l in range(M)}):
            failures += 1
    return OracleResult("training matrix assembly", failures == 0, f"{failures} of {fixtures} fixtures failed")


def check_svm_objective(fixtures: int, r: RandomSource) -> OracleResult:
    """The recorded SVM objective never increases between epochs."""
    failures = 0
    for _ in range(max(1, fixtures // 4)):
        X = r.normal((30, 2))
        labels = (r.uniform(0, 3, 30)).astype(np.int64)
        labels[:3] = [0, 1, 2]
        history: list[float] = []
        train_linear_svm(X, labels, C_reg=1.0, epochs=10, seed=int(r.next_uint64(1)[0] >> np.uint64(33)), history=history)
        if any(later > earlier for earlier, later in zip(history, history[1:])):
            failures += 1
    return OracleResult("svm objective history", failures == 0, f"{failures} fixtures increased")


ORACLES: list[Callable[[int, RandomSource], OracleResult]] = [check_autoencoder_gradients,
                                                               check_network_gradients,
                                                               check_encoder_jacobian,
                                                               check_singular_values,
                                                               check_rand_sel,
                                                               check_training_matrices,
                                                               check_svm_objective]


def run_oracles(fixtures: int = 20, seed: int = 0) -> list[OracleResult]:
    """
    Run every oracle suite.

    :param fixtures: Random fixtures per suite (RAND-SEL uses five times as many).
    :param seed: Seeds all fixtures; suite i uses fork i.
    :return: One result per suite.
    """
    root = RandomSource(seed)
    results = []
    for index, oracle in enumerate(ORACLES):
        timer = Timer()
        count = fixtures * 5 if oracle is check_rand_sel else fixtures
        result = oracle(count, root.fork(index))
        logger.debug(f"Oracle `{result.name}` {'passed' if result.passed else 'FAILED'} in "
                     f"{sec_str(timer.time_since_reset())} s: {result.detail}")
        results.append(result)
    return results
