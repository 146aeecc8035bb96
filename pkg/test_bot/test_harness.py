"""Tests for the leave-one-domain-out harness and its reports."""
import dataclasses
import os
import numpy as np
import numpy.testing as npt
import pytest
from lib import config, data_pipeline, harness
from lib.autoencoders import TrainConfig
from lib.classifiers import FineTuneConfig, accuracy, fine_tune_1hnn, predict_network
from lib.core_math import RandomSource
from lib.data_pipeline import MultiDomainCorpus
from lib.harness import CaseResult, EvalReport, ExperimentConfig
from lib.mtae_types import ActivationKind, ClassifierKind, DatasetPreset, LossKind, Method


def gaussian_corpus(seed: int = 0) -> MultiDomainCorpus:
    """Three small feature-table domains with three classes."""
    return MultiDomainCorpus(tuple(data_pipeline.make_gaussian_domains(RandomSource(seed), num_domains=3, dim=10,
                                                                       num_classes=3, per_class=8, separation=3.0)))


def experiment(method: Method = Method.MTAE, classifier: ClassifierKind = ClassifierKind.LINEAR_SVM,
               **changes: object) -> ExperimentConfig:
    """A quick feature-table experiment."""
    train = None
    if method != Method.RAW:
        train = TrainConfig(learning_rate=0.1, weight_decay=0.0, epochs=3, hidden_dim=6,
                            corruption_level=0.2 if method.is_denoising else 0.0)
    cfg = ExperimentConfig(dataset=DatasetPreset.FEATURE_TABLES, method=method, classifier=classifier, train=train,
                           finetune=FineTuneConfig(learning_rate=0.1, epochs=5, batch_size=4, hidden_dim=6),
                           repetitions=2, seed=4, svm_epochs=5, config_hash="0" * 64)
    return dataclasses.replace(cfg, **changes)


def sample_report() -> EvalReport:
    """A report with two hand-made cases."""
    cases = [CaseResult(("M15", "M30"), "M", [50.0, 100.0], [0.5, 0.7]),
             CaseResult(("M", "M30"), "M15", [80.0, 80.0], [0.25, 0.25])]
    return EvalReport(Method.D_MTAE, DatasetPreset.MNIST_R, ClassifierKind.LINEAR_SVM, "abc123", cases)


def test_case_statistics() -> None:
    """Test the mean, the sample standard deviation and the overall mean."""
    report = sample_report()
    first, second = report.cases
    assert first.mean == 75.0
    assert first.std == pytest.approx(np.sqrt(1250.0))
    assert second.std == 0.0
    assert CaseResult(("A",), "B", [42.0]).std == 0.0
    assert CaseResult(("A",), "B", [42.0]).spectrum_mass is None
    assert first.spectrum_mass == pytest.approx(0.6)
    assert report.overall_mean == 77.5
    assert report.repetitions == 2


def test_experiment_config_checks() -> None:
    """Test the method and training config combinations."""
    with pytest.raises(ValueError, match="needs a training config"):
        experiment(train=None)
    with pytest.raises(ValueError, match="corruption level"):
        experiment(method=Method.D_MTAE, train=TrainConfig(0.1, 0.0, 1, 4))
    with pytest.raises(ValueError, match="repetitions"):
        experiment(repetitions=0)


def test_from_config() -> None:
    """Test that a loaded preset becomes an experiment."""
    cfg = ExperimentConfig.from_config(config.load_config("configs/feature-tables-d-mtae.yml", check_data=False))
    assert cfg.dataset == DatasetPreset.FEATURE_TABLES
    assert cfg.method == Method.D_MTAE
    assert cfg.classifier == ClassifierKind.ONE_HIDDEN_NET
    assert cfg.train is not None
    assert cfg.train.corruption_level == 0.2
    assert cfg.finetune.hidden_dim == 2000
    assert cfg.cv_folds == 10
    assert cfg.cv_grid == ({"learning_rate": 0.01}, {"learning_rate": 0.1})
    assert len(cfg.feature_tables) == 3
    assert len(cfg.config_hash) == 64

    raw = ExperimentConfig.from_config(config.load_config("configs/mnist-r-raw.yml", check_data=False))
    assert raw.train is None
    assert raw.cv_grid is None


def test_learn_features() -> None:
    """Test which learner each method trains."""
    corpus = data_pipeline.subcorpus(gaussian_corpus(), ["D0", "D1"])
    sources, _ = harness.split_case(experiment(), corpus, None)
    train = TrainConfig(0.1, 0.0, 2, 5)
    assert harness.learn_features(Method.RAW, None, sources) is None

    learnt = harness.learn_features(Method.AE, train, sources)
    assert learnt is not None
    assert learnt[0].M == 1
    learnt = harness.learn_features(Method.MTAE, train, sources)
    assert learnt is not None
    assert learnt[0].M == 2
    assert learnt[1].task_losses[0].shape == (2, 2)


def test_split_case_scales_with_source_ranges() -> None:
    """Test that feature tables are scaled with statistics of the source domains only."""
    corpus = gaussian_corpus()
    sources, target = harness.split_case(experiment(), corpus, "D2")
    assert sources.names == ["D0", "D1"]
    assert target is not None
    assert target.domain_name == "D2"
    stacked = np.vstack([view.X for view in sources.views])
    npt.assert_allclose(stacked.min(axis=0), 0.0, atol=1e-12)
    npt.assert_allclose(stacked.max(axis=0), 1.0)
    scaling = data_pipeline.fit_min_max(np.vstack([corpus.view("D0").X, corpus.view("D1").X]))
    npt.assert_allclose(target.X, scaling.apply(corpus.view("D2").X))

    image_cfg = experiment(dataset=DatasetPreset.MNIST_R)
    _, unscaled = harness.split_case(image_cfg, corpus, "D2")
    assert unscaled is corpus.view("D2")


def test_run_job() -> None:
    """Test one repetition: no leakage, a percentage and a spectrum mass."""
    cfg = experiment(spectrum_k=2)
    result = harness.run_job(cfg, gaussian_corpus(), "D1", 0)
    assert result.target == "D1"
    assert result.training_domains == ("D0", "D2")
    assert 0.0 <= result.accuracy <= 100.0
    assert result.spectrum_mass is not None
    assert 0.0 < result.spectrum_mass <= 1.0
    assert result.seconds >= 0.0

    with pytest.raises(RuntimeError, match="held-out domain"):
        harness._assert_no_leakage(("D0", "D1"), "D1")


def test_leave_one_domain_out() -> None:
    """Test that every domain is held out once and that runs are reproducible."""
    cfg = experiment()
    corpus = gaussian_corpus()
    report = harness.run_leave_one_domain_out(cfg, corpus)
    assert [case.target for case in report.cases] == ["D0", "D1", "D2"]
    for case in report.cases:
        assert case.target not in case.sources
        assert len(case.sources) == 2
        assert len(case.accuracies) == 2
        assert case.spectrum_mass is None
    assert report.overall_mean == pytest.approx(np.mean([case.mean for case in report.cases]))
    assert report.config_hash == "0" * 64

    again = harness.run_leave_one_domain_out(cfg, corpus)
    assert [case.accuracies for case in again.cases] == [case.accuracies for case in report.cases]

    held_out = harness.run_leave_one_domain_out(dataclasses.replace(cfg, holdout="D2"), corpus)
    assert [case.target for case in held_out.cases] == ["D2"]
    assert held_out.cases[0].accuracies == report.cases[2].accuracies

    with pytest.raises(data_pipeline.CorpusError, match="no view named"):
        harness.run_leave_one_domain_out(dataclasses.replace(cfg, holdout="D9"), corpus)
    with pytest.raises(ValueError, match="at least 2 domains"):
        harness.run_leave_one_domain_out(cfg, data_pipeline.subcorpus(corpus, ["D0"]))


@pytest.mark.parametrize("method,classifier", [(Method.RAW, ClassifierKind.LINEAR_SVM),
                                               (Method.RAW, ClassifierKind.ONE_HIDDEN_NET),
                                               (Method.DAE, ClassifierKind.LINEAR_SVM),
                                               (Method.D_MTAE, ClassifierKind.ONE_HIDDEN_NET)])
def test_method_and_classifier_combinations(method: Method, classifier: ClassifierKind) -> None:
    """Test that every learner works with both classifiers."""
    report = harness.run_leave_one_domain_out(experiment(method, classifier, repetitions=1, holdout="D0"),
                                              gaussian_corpus())
    assert len(report.cases) == 1
    assert 0.0 <= report.cases[0].mean <= 100.0


def test_cross_validation_in_cases() -> None:
    """Test that cases run with cross validated hyperparameters."""
    svm = experiment(cv_folds=2, cv_grid=({"C_reg": 0.1}, {"C_reg": 1.0}), repetitions=1, holdout="D1")
    assert len(harness.run_leave_one_domain_out(svm, gaussian_corpus()).cases) == 1
    net = experiment(classifier=ClassifierKind.ONE_HIDDEN_NET, cv_folds=2, cv_grid=({"learning_rate": 0.05},),
                     repetitions=1, holdout="D1")
    assert len(harness.run_leave_one_domain_out(net, gaussian_corpus()).cases) == 1


@pytest.mark.timeout(300)
def test_workers_do_not_change_results() -> None:
    """Test that a worker pool gives the same report as a single process."""
    cfg = experiment(method=Method.DAE)
    corpus = gaussian_corpus()
    single = harness.run_leave_one_domain_out(cfg, corpus)
    pooled = harness.run_leave_one_domain_out(dataclasses.replace(cfg, workers=2), corpus)
    assert [case.accuracies for case in pooled.cases] == [case.accuracies for case in single.cases]
    assert [case.sources for case in pooled.cases] == [case.sources for case in single.cases]


@pytest.mark.timeout(300)
def test_pretraining_beats_random_init() -> None:
    """Test that a 1HNN started from an MTAE encoder generalizes better than one started from random weights."""
    pretrained: list[float] = []
    random_init: list[float] = []
    for seed in range(10):
        corpus = MultiDomainCorpus(tuple(data_pipeline.make_gaussian_domains(
            RandomSource(seed), num_domains=3, dim=64, num_classes=4, per_class=20, separation=2.0, informative=4)))
        sources, held_out = harness.split_case(experiment(), corpus, "D2")
        assert held_out is not None
        train = TrainConfig(learning_rate=0.05, weight_decay=0.001, epochs=100, hidden_dim=16, loss_kind=LossKind.SQUARED,
                            batch_size=10, enc_kind=ActivationKind.SIGMOID, dec_kind=ActivationKind.LINEAR, seed=seed)
        learnt = harness.learn_features(Method.MTAE, train, sources)
        assert learnt is not None
        params = learnt[0]
        X_train = np.vstack([view.X for view in sources.views])
        y_train = np.concatenate([view.labels for view in sources.views])
        finetune = FineTuneConfig(learning_rate=0.1, epochs=5, batch_size=10, hidden_dim=16, seed=seed)
        from_encoder = fine_tune_1hnn(params.W, X_train, y_train, finetune, init_b=params.b_enc, num_classes=4)
        from_scratch = fine_tune_1hnn(None, X_train, y_train, finetune, num_classes=4)
        pretrained.append(accuracy(predict_network(from_encoder, held_out.X), held_out.labels))
        random_init.append(accuracy(predict_network(from_scratch, held_out.X), held_out.labels))
    assert np.mean(pretrained) > np.mean(random_init)


def test_emit_report() -> None:
    """Test the CSV rows and the text report."""
    report = sample_report()
    csv_path, txt_path = harness.emit_report(report, "TEMP/report")
    first_std = repr(float(np.std([50.0, 100.0], ddof=1)))
    first_mass = repr(float(np.mean([0.5, 0.7])))
    overall_mass = repr(float(np.mean([float(np.mean([0.5, 0.7])), 0.25])))
    with open(csv_path) as file:
        assert file.read().splitlines() == ["sources,target,mean,std,repetitions,spectrum_mass",
                                            f"M15;M30,M,75.0,{first_std},2,{first_mass}",
                                            "M;M30,M15,80.0,0.0,2,0.25",
                                            f"all,overall,77.5,,2,{overall_mass}"]
    with open(txt_path) as file:
        text = file.read()
    assert "M15, M30" in text
    assert "75.00 ± 35.36" in text
    assert "Average" in text
    assert "Spectrum mass" in text
    assert "Config hash: abc123" in text
    assert "Classifier: linear-svm" in text

    with open(csv_path, "rb") as file:
        first_bytes = file.read()
    with open(txt_path, "rb") as file:
        first_text = file.read()
    harness.emit_report(report, "TEMP/report")
    with open(csv_path, "rb") as file:
        assert file.read() == first_bytes
    with open(txt_path, "rb") as file:
        assert file.read() == first_text

    with pytest.raises(ValueError, match="empty report"):
        harness.emit_report(dataclasses.replace(report, cases=[]), "TEMP/empty-report")


def test_report_without_spectrum() -> None:
    """Test that the spectrum column stays empty when it was not measured."""
    report = EvalReport(Method.RAW, DatasetPreset.FEATURE_TABLES, ClassifierKind.ONE_HIDDEN_NET, "h",
                        [CaseResult(("D1",), "D0", [60.0]), CaseResult(("D0",), "D1", [70.0])])
    csv_path, txt_path = harness.emit_report(report, "TEMP/raw-report")
    with open(csv_path) as file:
        lines = file.read().splitlines()
    assert lines[1] == "D1,D0,60.0,0.0,1,"
    assert lines[-1] == "all,overall,65.0,,1,"
    with open(txt_path) as file:
        assert "Spectrum mass" not in file.read()


def test_save_config_copy() -> None:
    """Test that the effective config is stored next to the report."""
    loaded = config.load_config("configs/mnist-s-dae.yml", check_data=False)
    harness.save_config_copy(loaded, "TEMP/config-copy")
    copy = config.load_config("TEMP/config-copy/config.yml", check_data=False)
    assert copy.config == loaded.config
    assert config.config_hash(copy) == config.config_hash(loaded)


def test_load_experiment_corpus_from_idx() -> None:
    """Test building a corpus from IDX files, caching it and reading the cache back."""
    os.makedirs("TEMP/idx-corpus", exist_ok=True)
    r = RandomSource(9)
    images = [r.uniform(size=(12, 12)) for _ in range(10)]
    with open("TEMP/idx-corpus/images", "wb") as file:
        file.write(data_pipeline.encode_idx_images(images))
    with open("TEMP/idx-corpus/labels", "wb") as file:
        file.write(data_pipeline.encode_idx_labels([0, 1, 2, 3, 4] * 2))

    cfg = experiment(dataset=DatasetPreset.MNIST_S, idx_images="TEMP/idx-corpus/images",
                     idx_labels="TEMP/idx-corpus/labels", cache_dir="TEMP/idx-corpus/cache", per_class=2, image_size=6)
    corpus = harness.load_experiment_corpus(cfg)
    assert corpus.names == ["M", "M*0.9", "M*0.8", "M*0.7", "M*0.6"]
    assert all(view.n == 10 and view.d_x == 36 for view in corpus.views)
    assert os.path.isfile("TEMP/idx-corpus/cache/mnist-s/manifest.yml")

    cached = harness.load_experiment_corpus(dataclasses.replace(cfg, idx_images=None, idx_labels=None))
    npt.assert_array_equal(cached.view("M*0.7").X, corpus.view("M*0.7").X)

    with pytest.raises(FileNotFoundError):
        harness.load_experiment_corpus(dataclasses.replace(cfg, dataset=DatasetPreset.MNIST_R, idx_images=None))

    both = harness.build_mnist_corpora("TEMP/idx-corpus/images", "TEMP/idx-corpus/labels", 2, 6, 4,
                                       [DatasetPreset.MNIST_R, DatasetPreset.MNIST_S])
    npt.assert_array_equal(both[DatasetPreset.MNIST_R].view("M").X, both[DatasetPreset.MNIST_S].view("M").X)
    npt.assert_array_equal(both[DatasetPreset.MNIST_S].view("M").X, corpus.view("M").X)


def test_load_experiment_corpus_from_tables() -> None:
    """Test that feature tables become one domain each."""
    os.makedirs("TEMP/harness-tables", exist_ok=True)
    paths = []
    for view in gaussian_corpus().views:
        path = f"TEMP/harness-tables/{view.domain_name}.csv"
        data_pipeline.write_feature_table(view, path)
        paths.append(path)
    corpus = harness.load_experiment_corpus(experiment(feature_tables=tuple(paths)))
    assert corpus.names == ["D0", "D1", "D2"]
    npt.assert_array_equal(corpus.view("D1").X, gaussian_corpus().view("D1").X)
