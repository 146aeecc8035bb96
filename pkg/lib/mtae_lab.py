"""The main module that controls mtae-lab."""
from __future__ import annotations
import argparse
import importlib.metadata
import logging
import logging.handlers
import multiprocessing
import os
import platform
import re
import sys
import yaml
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from lib import harness
from lib.analysis import DEFAULT_HIGH, DEFAULT_LOW, average_spectrum, export_filter_grid, top_k_mass, write_spectrum
from lib.autoencoders import load_model, save_model, write_trace
from lib.config import Configuration, load_config, log_config
from lib.core_math import RandomSource
from lib.data_pipeline import make_gaussian_domains, save_corpus, write_feature_table
from lib.mtae_types import DatasetPreset, Method, VersioningType
from lib.oracles import run_oracles

logger = logging.getLogger(__name__)

with open(os.path.join(os.path.dirname(__file__), "versioning.yml")) as version_file:
    versioning_info: VersioningType = yaml.safe_load(version_file)

__version__ = versioning_info["mtae_lab_version"]

auto_log_directory = "mtae_lab_auto_logs"
DEFAULT_SPECTRUM_K = 20


def logging_configurer(level: int, filename: str | None, disable_auto_logs: bool) -> None:
    """
    Configure the logger.

    :param level: The logging level. Either `logging.INFO` or `logging.DEBUG`.
    :param filename: The filename to write the logs to. If it is `None` then the logs aren't written to a file.
    :param disable_auto_logs: Whether to skip the automatic daily log files in `mtae_lab_auto_logs/`.
    """
    console_handler = RichHandler()
    console_formatter = logging.Formatter("%(message)s")
    console_handler.setFormatter(console_formatter)
    console_handler.setLevel(level)
    all_handlers: list[logging.Handler] = [console_handler]
    FORMAT = "%(asctime)s %(name)s (%(filename)s:%(lineno)d) %(levelname)s %(message)s"

    if filename:
        file_handler = logging.FileHandler(filename, delay=True, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(FORMAT))
        file_handler.setLevel(level)
        all_handlers.append(file_handler)

    if not disable_auto_logs:
        os.makedirs(auto_log_directory, exist_ok=True)
        auto_log_filename = os.path.join(auto_log_directory, "mtae-lab.log")
        auto_file_handler = logging.handlers.TimedRotatingFileHandler(auto_log_filename,
                                                                      delay=True,
                                                                      encoding="utf-8",
                                                                      when="midnight",
                                                                      backupCount=7)
        auto_file_handler.setLevel(logging.DEBUG)
        auto_file_handler.setFormatter(logging.Formatter(FORMAT))
        all_handlers.append(auto_file_handler)

    logging.basicConfig(level=logging.DEBUG,
                        handlers=all_handlers,
                        force=True)


def intro() -> str:
    """Return the intro string."""
    return fr"""
    .    o   o
    .     \ /      mtae-lab {__version__} on {platform.system()} {platform.release()}
    .    o-o-o
    .     / \      Multi-task autoencoders for domain generalization
    .    o   o
    """


def log_python_and_libraries() -> None:
    """Log the installed libraries and the python version."""
    logger.debug(f"Python version: {'.'.join(map(str, sys.version_info))}")
    text = "Installed libraries:\n"
    for distribution in importlib.metadata.distributions():
        text += f"{distribution.metadata['Name']}=={distribution.version}\n"
    logger.debug(text)


def check_python_version() -> None:
    """Raise a warning or an exception if the version isn't supported or is deprecated."""
    def version_numeric(version_str: str) -> list[int]:
        return [int(n) for n in version_str.split(".")]

    python_deprecated_version = version_numeric(versioning_info["deprecated_python_version"])
    python_good_version = version_numeric(versioning_info["minimum_python_version"])
    version_change_date = versioning_info["deprecation_date"]
    this_python_version = list(sys.version_info[0:2])

    def version_str(version: list[int]) -> str:
        return f"Python {'.'.join(str(n) for n in version)}"

    upgrade_request = (f"You are currently running {version_str(this_python_version)}. "
                       f"Please upgrade to {version_str(python_good_version)} or newer")
    out_of_date_error = RuntimeError("A newer version of Python is required "
                                     f"to run this version of mtae-lab. {upgrade_request}.")
    out_of_date_warning = ("A newer version of Python will be required "
                           f"on {version_change_date} to run mtae-lab. {upgrade_request} before then.")

    this_mtae_lab_version = version_numeric(__version__)
    mtae_lab_breaking_version = list(version_change_date.timetuple()[0:3])

    if this_python_version < python_deprecated_version:
        raise out_of_date_error

    if this_python_version == python_deprecated_version:
        if this_mtae_lab_version < mtae_lab_breaking_version:
            logger.warning(out_of_date_warning)
        else:
            raise out_of_date_error


def _file_safe(name: str) -> str:
    return re.sub(r"[^\w.-]", "_", name)


def _experiment(args: argparse.Namespace, check_data: bool = True) -> tuple[Configuration, harness.ExperimentConfig]:
    if not args.config:
        raise ValueError(f"`{args.command}` needs --config")
    config = load_config(args.config, {"seed": args.seed, "output_dir": args.out}, check_data)
    return config, harness.ExperimentConfig.from_config(config)


def gen_data(args: argparse.Namespace) -> int:
    """Build the MNIST-r and MNIST-s corpora from IDX files, or synthetic feature tables, and cache them."""
    images, labels = args.images, args.labels
    size, seed = args.size, args.seed or 0
    if args.config:
        config = load_config(args.config, {"seed": args.seed}, check_data=False)
        images = images or config.idx_images
        labels = labels or config.idx_labels
        seed = config.seed
    if args.dataset == DatasetPreset.FEATURE_TABLES:
        return _gen_feature_tables(args.out or "data/features", args.per_class or 40, seed)
    if not (images and labels):
        raise ValueError("gen-data needs --images and --labels (or idx_images and idx_labels in the config)")

    per_class = args.per_class or 100
    presets = [DatasetPreset.MNIST_R, DatasetPreset.MNIST_S] if args.dataset == "all" else [DatasetPreset(args.dataset)]
    out = args.out or "cache"
    corpora = harness.build_mnist_corpora(images, labels, per_class, size, seed, presets)
    for preset, corpus in corpora.items():
        save_corpus(corpus, os.path.join(out, preset.value),
                    {"dataset": preset.value, "seed": seed, "per_class": per_class, "image_size": size,
                     "idx_images": images, "idx_labels": labels, "views": corpus.names})
    return 0


def _gen_feature_tables(out: str, per_class: int, seed: int) -> int:
    """Write three synthetic Gaussian domains as the feature tables D0.csv, D1.csv and D2.csv."""
    os.makedirs(out, exist_ok=True)
    for view in make_gaussian_domains(RandomSource(seed), per_class=per_class):
        path = os.path.join(out, f"{view.domain_name}.csv")
        write_feature_table(view, path)
        logger.info(f"Wrote {view.n} samples with {view.d_x} features to {path}")
    return 0


def train(args: argparse.Namespace) -> int:
    """Train one feature learner on every domain but the held-out one and save it with its trace."""
    config, cfg = _experiment(args)
    if cfg.method == Method.RAW:
        raise ValueError("method `raw` has no feature learner to train")
    corpus = harness.load_experiment_corpus(cfg)
    holdout = args.holdout or cfg.holdout
    sources, _ = harness.split_case(cfg, corpus, holdout)
    learnt = harness.learn_features(cfg.method, cfg.train, sources)
    assert learnt is not None and cfg.train is not None
    params, trace = learnt

    out = cfg.output_dir
    model_dir = os.path.join(out, "model")
    save_model(params, cfg.train, model_dir, sources.names)
    write_trace(trace, os.path.join(out, "trace.csv"))
    harness.save_config_copy(config, out)
    logger.info(f"Saved the {cfg.method.value} model trained on {', '.join(sources.names)} to {model_dir}")
    return 0


def evaluate(args: argparse.Namespace) -> int:
    """Run leave-one-domain-out evaluation and write the report."""
    config, cfg = _experiment(args)
    if not args.disable_auto_logging:
        with open(os.path.join(auto_log_directory, "config.log"), "w") as config_log:
            log_config(config.config, config_log.write)
    report = harness.run_leave_one_domain_out(cfg)
    harness.emit_report(report, cfg.output_dir)
    harness.save_config_copy(config, cfg.output_dir)
    return 0


def spectrum(args: argparse.Namespace) -> int:
    """Average the encoder Jacobian spectrum of a checkpoint over one domain's samples."""
    _, cfg = _experiment(args)
    if not args.checkpoint:
        raise ValueError("spectrum needs --checkpoint")
    params, metadata = load_model(args.checkpoint)
    corpus = harness.load_experiment_corpus(cfg)
    domain = args.domain or cfg.holdout
    if domain is None:
        unseen = [name for name in corpus.names if name not in (metadata.get("domains") or [])]
        if len(unseen) != 1:
            raise ValueError("spectrum needs --domain (or `holdout` in the config)")
        domain = unseen[0]
    _, view = harness.split_case(cfg, corpus, domain)
    assert view is not None

    report = average_spectrum(params, view.X, f"{os.path.basename(os.path.normpath(args.checkpoint))} on {domain}")
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, f"spectrum-{_file_safe(domain)}.csv")
    write_spectrum(report, path)
    k = cfg.spectrum_k or DEFAULT_SPECTRUM_K
    logger.info(f"Top-{k} spectrum mass on {domain}: {top_k_mass(report, k):.4f} ({report.sample_count} samples); "
                f"wrote {path}")
    return 0


def filters(args: argparse.Namespace) -> int:
    """Render randomly chosen encoder filters of a checkpoint as a PGM image."""
    if not args.checkpoint:
        raise ValueError("filters needs --checkpoint")
    params, _ = load_model(args.checkpoint)
    out = args.out or "results"
    os.makedirs(out, exist_ok=True)
    export_filter_grid(params.W, min(args.count, params.d_h), args.cols, args.low, args.high,
                       RandomSource(args.seed or 0), os.path.join(out, "filters.pgm"))
    return 0


def oracle(args: argparse.Namespace) -> int:
    """Run the self-check suites and print pass/fail."""
    results = run_oracles(args.fixtures, args.seed or 0)
    table = Table(title="Oracle suites")
    table.add_column("Suite")
    table.add_column("Result")
    table.add_column("Detail")
    for result in results:
        table.add_row(result.name, "pass" if result.passed else "FAIL", result.detail)
    Console().print(table)
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.error(f"Failed oracle suites: {', '.join(failed)}")
        return 1
    return 0


COMMANDS = {"gen-data": gen_data,
            "train": train,
            "eval": evaluate,
            "spectrum": spectrum,
            "filters": filters,
            "oracle": oracle}


def build_parser() -> argparse.ArgumentParser:
    """The command line of mtae-lab."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Specify an experiment config file (see config.yml.default).")
    common.add_argument("--seed", type=int, default=None, help="Override the seed of the config.")
    common.add_argument("--out", default=None, help="Output directory (overrides output_dir of the config).")
    common.add_argument("-v", action="store_true", help="Make output more verbose. Include per-epoch losses.")
    common.add_argument("-l", "--logfile", help="Record all console output to a log file.", default=None)
    common.add_argument("--disable_auto_logging", action="store_true", help="Disable automatic logging.")

    parser = argparse.ArgumentParser(prog="mtae-lab.py",
                                     description="Domain generalization with multi-task autoencoders")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="command")

    gen = subparsers.add_parser("gen-data", parents=[common], help="Build and cache MNIST-r/MNIST-s or synthetic tables.")
    gen.add_argument("--images", help="IDX image file, e.g. train-images-idx3-ubyte.")
    gen.add_argument("--labels", help="IDX label file, e.g. train-labels-idx1-ubyte.")
    gen.add_argument("--dataset", choices=["mnist-r", "mnist-s", "feature-tables", "all"], default="all",
                     help="`feature-tables` writes three synthetic Gaussian domains instead of MNIST.")
    gen.add_argument("--per-class", dest="per_class", type=int, default=None,
                     help="Base images per digit (default 100), or samples per class of each table (default 40).")
    gen.add_argument("--size", type=int, default=16, help="Side length of the resized images.")

    train_parser = subparsers.add_parser("train", parents=[common], help="Train one feature learner.")
    train_parser.add_argument("--holdout", default=None, help="Domain to leave out of training.")

    subparsers.add_parser("eval", parents=[common], help="Leave-one-domain-out evaluation from a config file.")

    spectrum_parser = subparsers.add_parser("spectrum", parents=[common], help="Encoder Jacobian spectrum.")
    spectrum_parser.add_argument("--checkpoint", help="Model directory written by `train`.")
    spectrum_parser.add_argument("--domain", help="Domain whose samples are used.")

    filters_parser = subparsers.add_parser("filters", parents=[common], help="Filter grid image of an encoder.")
    filters_parser.add_argument("--checkpoint", help="Model directory written by `train`.")
    filters_parser.add_argument("--count", type=int, default=100, help="Number of filters.")
    filters_parser.add_argument("--cols", type=int, default=10, help="Filters per row.")
    filters_parser.add_argument("--low", type=float, default=DEFAULT_LOW, help="Weights at or below are black.")
    filters_parser.add_argument("--high", type=float, default=DEFAULT_HIGH, help="Weights at or above are white.")

    oracle_parser = subparsers.add_parser("oracle", parents=[common], help="Run the self-check suites.")
    oracle_parser.add_argument("--fixtures", type=int, default=20, help="Random fixtures per suite.")
    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    """
    Parse the command line and run a subcommand.

    :param argv: The arguments, without the program name.
    :return: The exit status: 0 on success, 1 when the command fails, 2 for usage errors.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as error:
        return error.code if isinstance(error.code, int) else 2

    logging_level = logging.DEBUG if args.v else logging.INFO
    logging_configurer(logging_level, args.logfile, args.disable_auto_logging)
    logger.info(intro(), extra={"highlighter": None})
    check_python_version()
    log_python_and_libraries()

    try:
        return COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError, yaml.YAMLError) as error:
        logger.debug("Traceback:", exc_info=True)
        logger.error(f"{args.command} failed: {error}")
        return 1
    finally:
        logging.shutdown()


def start_program() -> None:
    """Start mtae-lab."""
    multiprocessing.set_start_method("spawn")
    sys.exit(cli_dispatch(sys.argv[1:]))
