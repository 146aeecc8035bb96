"""
Leave-one-domain-out experiments.

Every domain in turn is held out as the test set. A feature learner is trained on the remaining
(source) domains only, a classifier is trained on the encoded source samples, and its accuracy on
the encoded held-out samples is recorded. Each case is repeated with seeds seed, seed + 1, ...
"""
from __future__ import annotations
import csv
import dataclasses
import io
import logging
import logging.handlers
import multiprocessing
import os
from dataclasses import dataclass
from multiprocessing.pool import Pool
import numpy as np
import yaml
from rich.console import Console
from rich.table import Table
from lib import data_pipeline
from lib.analysis import average_spectrum, top_k_mass
from lib.autoencoders import ModelParams, TrainConfig, TrainTrace, encode, train_mtae, train_single_task
from lib.classifiers import (DEFAULT_C_GRID, FineTuneConfig, accuracy, cross_validate, fine_tune_1hnn, linear_svm_scorer,
                             network_scorer, predict, predict_network, train_linear_svm)
from lib.config import Configuration, config_hash
from lib.core_math import RandomSource
from lib.data_pipeline import DomainView, MultiDomainCorpus
from lib.mtae_types import ActivationKind, ClassifierKind, DatasetPreset, FloatArray, IntArray, Method
from lib.timer import Timer, sec_str, to_seconds

logger = logging.getLogger(__name__)

REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
CONFIG_COPY = "config.yml"
BASE_SELECTION_STREAM = 7


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to run one leave-one-domain-out experiment."""

    dataset: DatasetPreset
    method: Method
    classifier: ClassifierKind
    train: TrainConfig | None
    finetune: FineTuneConfig
    repetitions: int = 10
    seed: int = 0
    output_dir: str = "results"
    workers: int = 1
    idx_images: str | None = None
    idx_labels: str | None = None
    cache_dir: str | None = None
    feature_tables: tuple[str, ...] = ()
    per_class: int = 100
    image_size: int = 16
    svm_c: float = 1.0
    svm_epochs: int = 20
    cv_folds: int = 0
    cv_grid: tuple[dict[str, float], ...] | None = None
    spectrum_k: int = 0
    holdout: str | None = None
    config_hash: str = ""

    def __post_init__(self) -> None:
        """Check the combinations the config loader cannot see."""
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if self.method != Method.RAW and self.train is None:
            raise ValueError(f"method `{self.method.value}` needs a training config")
        if self.train is not None and self.method.is_denoising != (self.train.corruption_level > 0):
            raise ValueError(f"method `{self.method.value}` does not match corruption level {self.train.corruption_level}")

    @classmethod
    def from_config(cls, config: Configuration) -> ExperimentConfig:
        """Build an experiment from a loaded and validated config."""
        method = Method(config.method)
        train = None
        if method != Method.RAW:
            window = config.early_stop_window
            train = TrainConfig(learning_rate=float(config.learning_rate),
                                weight_decay=float(config.weight_decay),
                                epochs=int(config.epochs),
                                hidden_dim=int(config.hidden_dim),
                                corruption_level=float(config.corruption_level),
                                loss_kind=config.loss_kind,
                                batch_size=int(config.batch_size),
                                seed=int(config.seed),
                                early_stop=(int(window), float(config.early_stop_tolerance)) if window else None,
                                enc_kind=config.enc_kind,
                                dec_kind=config.dec_kind)
        hidden_kind = train.enc_kind if train else ActivationKind.SIGMOID
        finetune = FineTuneConfig(learning_rate=float(config.finetune_learning_rate),
                                  epochs=int(config.finetune_epochs),
                                  batch_size=int(config.finetune_batch_size),
                                  hidden_dim=int(config.hidden_dim or 1),
                                  weight_decay=float(config.finetune_weight_decay),
                                  hidden_kind=hidden_kind,
                                  seed=int(config.seed))
        return cls(dataset=DatasetPreset(config.dataset),
                   method=method,
                   classifier=ClassifierKind(config.classifier),
                   train=train,
                   finetune=finetune,
                   repetitions=int(config.repetitions),
                   seed=int(config.seed),
                   output_dir=config.output_dir,
                   workers=int(config.workers),
                   idx_images=config.idx_images,
                   idx_labels=config.idx_labels,
                   cache_dir=config.cache_dir,
                   feature_tables=tuple(config.feature_tables or []),
                   per_class=int(config.per_class),
                   image_size=int(config.image_size),
                   svm_c=float(config.svm_c),
                   svm_epochs=int(config.svm_epochs),
                   cv_folds=int(config.cv_folds),
                   cv_grid=tuple(config.config["cv_grid"]) if config.config.get("cv_grid") else None,
                   spectrum_k=int(config.spectrum_k),
                   holdout=config.holdout,
                   config_hash=config_hash(config))


@dataclass(frozen=True)
class JobResult:
    """The outcome of one repetition of one held-out case."""

    target: str
    repetition: int
    training_domains: tuple[str, ...]
    accuracy: float
    spectrum_mass: float | None
    seconds: float


@dataclass
class CaseResult:
    """All repetitions of one held-out domain."""

    sources: tuple[str, ...]
    target: str
    accuracies: list[float]
    spectrum_masses: list[float] = dataclasses.field(default_factory=list)

    @property
    def mean(self) -> float:
        """Mean accuracy over repetitions."""
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        """Sample standard deviation of the accuracies; 0 for a single repetition."""
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    @property
    def spectrum_mass(self) -> float | None:
        """Mean top-k spectrum mass over repetitions, if it was measured."""
        return float(np.mean(self.spectrum_masses)) if self.spectrum_masses else None


@dataclass
class EvalReport:
    """Leave-one-domain-out accuracies of one method."""

    method: Method
    dataset: DatasetPreset
    classifier: ClassifierKind
    config_hash: str
    cases: list[CaseResult]

    @property
    def overall_mean(self) -> float:
        """Mean of the case means."""
        return float(np.mean([case.mean for case in self.cases]))

    @property
    def repetitions(self) -> int:
        """Repetitions per case."""
        return len(self.cases[0].accuracies) if self.cases else 0


def build_mnist_corpora(images_path: str, labels_path: str, per_class: int, size: int, seed: int,
                        presets: list[DatasetPreset]) -> dict[DatasetPreset, MultiDomainCorpus]:
    """
    Build the MNIST-r and/or MNIST-s corpora from an IDX image/label pair.

    Both presets share one base selection of `per_class` images per class.
    """
    images = data_pipeline.load_idx_images(images_path)
    labels = data_pipeline.load_idx_labels(labels_path)
    base = data_pipeline.select_base_subset(images, labels, per_class, RandomSource(seed).fork(BASE_SELECTION_STREAM),
                                            size)
    transforms = {DatasetPreset.MNIST_R: data_pipeline.mnist_r_transforms,
                  DatasetPreset.MNIST_S: data_pipeline.mnist_s_transforms}
    return {preset: data_pipeline.build_view_corpus(base, transforms[preset]()) for preset in presets}


def load_experiment_corpus(cfg: ExperimentConfig) -> MultiDomainCorpus:
    """Load the experiment's domains from the cache, the IDX files or the feature tables."""
    if cfg.dataset == DatasetPreset.FEATURE_TABLES:
        return MultiDomainCorpus(tuple(data_pipeline.load_feature_table(path) for path in cfg.feature_tables))

    if cfg.cache_dir and os.path.isfile(os.path.join(cfg.cache_dir, cfg.dataset.value, "manifest.yml")):
        logger.info(f"Loading cached {cfg.dataset.value} corpus from {cfg.cache_dir}")
        return data_pipeline.load_corpus(os.path.join(cfg.cache_dir, cfg.dataset.value))
    if not (cfg.idx_images and cfg.idx_labels):
        raise FileNotFoundError(f"no cached {cfg.dataset.value} corpus and no IDX files configured")
    corpus = build_mnist_corpora(cfg.idx_images, cfg.idx_labels, cfg.per_class, cfg.image_size, cfg.seed,
                                 [cfg.dataset])[cfg.dataset]
    if cfg.cache_dir:
        data_pipeline.save_corpus(corpus, os.path.join(cfg.cache_dir, cfg.dataset.value),
                                  {"dataset": cfg.dataset.value, "seed": cfg.seed, "per_class": cfg.per_class,
                                   "image_size": cfg.image_size})
    return corpus


def learn_features(method: Method, train: TrainConfig | None,
                   sources: MultiDomainCorpus) -> tuple[ModelParams, TrainTrace] | None:
    """Train the method's feature learner on the source domains; `raw` learns nothing."""
    if method == Method.RAW:
        return None
    assert train is not None
    if method.is_multi_task:
        return train_mtae(train, sources)
    return train_single_task(train, np.vstack([view.X for view in sources.views]))


def split_case(cfg: ExperimentConfig, corpus: MultiDomainCorpus,
               target: str | None) -> tuple[MultiDomainCorpus, DomainView | None]:
    """
    Separate the source domains from the held-out one.

    Feature tables are min-max scaled with ranges fitted on the sources only.

    :param cfg: The experiment.
    :param corpus: All domains.
    :param target: The held-out domain, or None to train on every domain.
    :return: The sources and the held-out view (None when `target` is None).
    """
    test_view = corpus.view(target) if target is not None else None
    sources = data_pipeline.subcorpus(corpus, [name for name in corpus.names if name != target])
    if cfg.dataset != DatasetPreset.FEATURE_TABLES:
        return sources, test_view

    scaling = data_pipeline.fit_min_max(np.vstack([view.X for view in sources.views]))
    sources = MultiDomainCorpus(tuple(DomainView(view.domain_name, scaling.apply(view.X), view.labels)
                                      for view in sources.views))
    if test_view is not None:
        test_view = DomainView(test_view.domain_name, scaling.apply(test_view.X), test_view.labels)
    return sources, test_view


def _assert_no_leakage(training_domains: tuple[str, ...], target: str) -> None:
    if target in training_domains:
        raise RuntimeError(f"held-out domain `{target}` is among the training domains {list(training_domains)}")


def _stack(views: tuple[DomainView, ...]) -> tuple[FloatArray, IntArray]:
    return np.vstack([view.X for view in views]), np.concatenate([view.labels for view in views])


def _classify(cfg: ExperimentConfig, params: ModelParams | None, X_train: FloatArray, y_train: IntArray,
              X_test: FloatArray, y_test: IntArray, num_classes: int, seed: int) -> float:
    """Train the configured classifier on source samples and score it on the held-out samples."""
    if cfg.classifier == ClassifierKind.ONE_HIDDEN_NET:
        init_W = params.W if params is not None else None
        init_b = params.b_enc if params is not None else None
        finetune = dataclasses.replace(cfg.finetune, seed=seed,
                                       hidden_dim=params.d_h if params is not None else cfg.finetune.hidden_dim)
        if cfg.cv_folds >= 2 and cfg.cv_grid:
            point = cross_validate(X_train, y_train, list(cfg.cv_grid), cfg.cv_folds, seed,
                                   network_scorer(finetune, init_W, init_b, num_classes))
            finetune = dataclasses.replace(finetune, **point)
        net = fine_tune_1hnn(init_W, X_train, y_train, finetune, init_b=init_b, num_classes=num_classes)
        return accuracy(predict_network(net, X_test), y_test)

    F_train = encode(params, X_train) if params is not None else X_train
    F_test = encode(params, X_test) if params is not None else X_test
    C_reg = cfg.svm_c
    if cfg.cv_folds >= 2:
        point = cross_validate(F_train, y_train, list(cfg.cv_grid or DEFAULT_C_GRID), cfg.cv_folds, seed,
                               linear_svm_scorer(cfg.svm_epochs))
        C_reg = float(point["C_reg"])
    model = train_linear_svm(F_train, y_train, C_reg=C_reg, epochs=cfg.svm_epochs, seed=seed)
    return accuracy(predict(model, F_test), y_test)


def run_job(cfg: ExperimentConfig, corpus: MultiDomainCorpus, target: str, repetition: int) -> JobResult:
    """
    Run one repetition of the case that holds out `target`.

    :param cfg: The experiment.
    :param corpus: All domains.
    :param target: The held-out domain.
    :param repetition: 0-based; the seed is `cfg.seed + repetition`.
    :return: The held-out accuracy and, when configured, the spectrum mass.
    """
    timer = Timer()
    seed = cfg.seed + repetition
    sources, held_out = split_case(cfg, corpus, target)
    assert held_out is not None
    test_view = held_out
    training_domains = tuple(sources.names)
    _assert_no_leakage(training_domains, test_view.domain_name)

    train = dataclasses.replace(cfg.train, seed=seed) if cfg.train is not None else None
    learnt = learn_features(cfg.method, train, sources)
    params = learnt[0] if learnt is not None else None
    X_train, y_train = _stack(sources.views)
    score = _classify(cfg, params, X_train, y_train, test_view.X, test_view.labels, max(corpus.classes) + 1, seed)

    spectrum_mass = None
    if cfg.spectrum_k > 0 and params is not None:
        report = average_spectrum(params, test_view.X, f"{cfg.method.value} -> {target}")
        spectrum_mass = top_k_mass(report, cfg.spectrum_k)

    elapsed = timer.time_since_reset()
    logger.info(f"Held-out {target}, repetition {repetition + 1}/{cfg.repetitions}: "
                f"accuracy {score:.2f}% ({sec_str(elapsed)} s)")
    return JobResult(target, repetition, training_domains, score, spectrum_mass, to_seconds(elapsed))


_worker_state: dict[str, object] = {}


def _worker_initializer(cfg: ExperimentConfig, corpus: MultiDomainCorpus, logging_queue: object) -> None:
    """Give a pool worker the experiment and send its logs to the main process."""
    handler = logging.handlers.QueueHandler(logging_queue)  # type: ignore[arg-type]
    root = logging.getLogger()
    root.handlers.clear()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG)
    _worker_state["cfg"] = cfg
    _worker_state["corpus"] = corpus


def _pool_job(job: tuple[str, int]) -> JobResult:
    cfg = _worker_state["cfg"]
    corpus = _worker_state["corpus"]
    assert isinstance(cfg, ExperimentConfig) and isinstance(corpus, MultiDomainCorpus)
    return run_job(cfg, corpus, *job)


def _run_jobs(cfg: ExperimentConfig, corpus: MultiDomainCorpus, jobs: list[tuple[str, int]]) -> list[JobResult]:
    """Run jobs in order, or on a worker pool whose results are collected in job order."""
    if cfg.workers == 1 or len(jobs) == 1:
        return [run_job(cfg, corpus, target, repetition) for target, repetition in jobs]

    manager = multiprocessing.Manager()
    logging_queue = manager.Queue()
    listener = logging.handlers.QueueListener(logging_queue, *logging.getLogger().handlers, respect_handler_level=True)
    listener.start()
    try:
        with Pool(min(cfg.workers, len(jobs)), initializer=_worker_initializer,
                  initargs=(cfg, corpus, logging_queue)) as pool:
            return list(pool.imap(_pool_job, jobs))
    finally:
        listener.stop()
        manager.shutdown()


def run_leave_one_domain_out(cfg: ExperimentConfig, corpus: MultiDomainCorpus | None = None) -> EvalReport:
    """
    Evaluate a method by holding out each domain in turn.

    :param cfg: The experiment.
    :param corpus: The domains; loaded as configured when None.
    :return: One case per held-out domain (only `cfg.holdout` when it is set).
    """
    corpus = corpus or load_experiment_corpus(cfg)
    if corpus.M < 2:
        raise ValueError("leave-one-domain-out needs at least 2 domains")
    targets = corpus.names
    if cfg.holdout is not None:
        corpus.view(cfg.holdout)
        targets = [cfg.holdout]

    jobs = [(target, repetition) for target in targets for repetition in range(cfg.repetitions)]
    logger.info(f"Running {cfg.method.value} + {cfg.classifier.value} on {cfg.dataset.value}: {len(targets)} cases x "
                f"{cfg.repetitions} repetitions with {cfg.workers} worker(s)")
    results = _run_jobs(cfg, corpus, jobs)

    cases = []
    for target in targets:
        mine = [result for result in results if result.target == target]
        for result in mine:
            _assert_no_leakage(result.training_domains, target)
        cases.append(CaseResult(sources=mine[0].training_domains,
                                target=target,
                                accuracies=[result.accuracy for result in mine],
                                spectrum_masses=[result.spectrum_mass for result in mine
                                                 if result.spectrum_mass is not None]))
    report = EvalReport(cfg.method, cfg.dataset, cfg.classifier, cfg.config_hash, cases)
    logger.info(f"Overall mean accuracy of {cfg.method.value}: {report.overall_mean:.2f}%")
    return report


def _format_optional(value: float | None) -> str:
    return "" if value is None else repr(value)


def render_report_text(report: EvalReport) -> str:
    """The human-readable report: one row per case and a final average row."""
    with_spectrum = any(case.spectrum_mass is not None for case in report.cases)
    table = Table(title=f"Leave-one-domain-out accuracy (%) of {report.method.value.upper()}")
    table.add_column("Source domains")
    table.add_column("Target")
    table.add_column("Accuracy", justify="right")
    if with_spectrum:
        table.add_column("Spectrum mass", justify="right")
    for case in report.cases:
        row = [", ".join(case.sources), case.target, f"{case.mean:.2f} ± {case.std:.2f}"]
        if with_spectrum:
            row.append("" if case.spectrum_mass is None else f"{case.spectrum_mass:.4f}")
        table.add_row(*row)
    table.add_section()
    table.add_row("Average", "", f"{report.overall_mean:.2f}", *([""] if with_spectrum else []))

    console = Console(file=io.StringIO(), width=140, color_system=None, force_terminal=False, record=True)
    console.print(table)
    console.print(f"Method: {report.method.value}")
    console.print(f"Dataset: {report.dataset.value}")
    console.print(f"Classifier: {report.classifier.value}")
    console.print(f"Repetitions: {report.repetitions}")
    console.print(f"Config hash: {report.config_hash}")
    return console.export_text()


def emit_report(report: EvalReport, directory: str) -> tuple[str, str]:
    """
    Write `report.csv` and `report.txt` into `directory`.

    :return: The paths of both files.
    """
    if not report.cases:
        raise ValueError("cannot emit an empty report")
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, REPORT_CSV)
    with open(csv_path, "w", newline="", encoding="utf-8") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["sources", "target", "mean", "std", "repetitions", "spectrum_mass"])
        for case in report.cases:
            writer.writerow([";".join(case.sources), case.target, repr(case.mean), repr(case.std),
                             len(case.accuracies), _format_optional(case.spectrum_mass)])
        masses = [case.spectrum_mass for case in report.cases if case.spectrum_mass is not None]
        writer.writerow(["all", "overall", repr(report.overall_mean), "", report.repetitions,
                         _format_optional(float(np.mean(masses)) if masses else None)])

    txt_path = os.path.join(directory, REPORT_TXT)
    with open(txt_path, "w", encoding="utf-8") as file:
        file.write(render_report_text(report))
    logger.info(f"Wrote {csv_path} and {txt_path}")
    return csv_path, txt_path


def save_config_copy(config: Configuration, directory: str) -> None:
    """Store the effective config next to the report."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, CONFIG_COPY), "w", encoding="utf-8") as file:
        yaml.safe_dump(config.config, file, sort_keys=False)
