"""Code related to the experiment config that mtae-lab uses."""
from __future__ import annotations
import hashlib
import logging
import os
import yaml
from typing import Any, ItemsView, Callable
from lib.mtae_types import ActivationKind, CONFIG_DICT_TYPE, ClassifierKind, DatasetPreset, LossKind, Method

logger = logging.getLogger(__name__)

SEED_ENVIRONMENT_VARIABLE = "MTAE_LAB_SEED"

TRAIN_KEYS = ["learning_rate", "weight_decay", "epochs", "hidden_dim", "corruption_level", "loss_kind", "batch_size",
              "enc_kind", "dec_kind"]
HARNESS_DEFAULTS: CONFIG_DICT_TYPE = {"classifier": ClassifierKind.LINEAR_SVM.value,
                                      "idx_images": None,
                                      "idx_labels": None,
                                      "cache_dir": None,
                                      "feature_tables": [],
                                      "per_class": 100,
                                      "image_size": 16,
                                      "repetitions": 10,
                                      "seed": 0,
                                      "output_dir": "results",
                                      "workers": 1,
                                      "early_stop_window": None,
                                      "early_stop_tolerance": 0.0,
                                      "svm_c": 1.0,
                                      "svm_epochs": 20,
                                      "finetune_learning_rate": 0.1,
                                      "finetune_epochs": 50,
                                      "finetune_batch_size": 10,
                                      "finetune_weight_decay": 0.0,
                                      "cv_folds": 0,
                                      "cv_grid": None,
                                      "spectrum_k": 0,
                                      "holdout": None}
KNOWN_KEYS = {"dataset", "method"} | set(TRAIN_KEYS) | set(HARNESS_DEFAULTS)
EXECUTION_KEYS = {"workers", "output_dir"}


class ConfigError(ValueError):
    """Raised when the config file is unusable."""


class Configuration:
    """The experiment config."""

    def __init__(self, parameters: CONFIG_DICT_TYPE) -> None:
        """:param parameters: A `dict` containing the config."""
        self.config = parameters

    def __getattr__(self, name: str) -> Any:
        """
        Enable the use of `config.key`.

        :param name: The key to get its value.
        :return: The value of the key.
        """
        return self.lookup(name)

    def lookup(self, name: str) -> Any:
        """
        Get the value of a key.

        :param name: The key to get its value.
        :return: `Configuration` if the value is a `dict` else returns the value.
        """
        data = self.config.get(name)
        return Configuration(data) if isinstance(data, dict) else data

    def items(self) -> ItemsView[str, Any]:
        """:return: All the key-value pairs in this config."""
        return self.config.items()

    def keys(self) -> list[str]:
        """:return: All of the keys in this config."""
        return list(self.config.keys())

    def __or__(self, other: Configuration | CONFIG_DICT_TYPE) -> Configuration:
        """Create a copy of this configuration that is updated with values from the parameter."""
        other_dict = other.config if isinstance(other, Configuration) else other
        return Configuration(self.config | other_dict)

    def __bool__(self) -> bool:
        """Whether `self.config` is empty."""
        return bool(self.config)

    def __getstate__(self) -> CONFIG_DICT_TYPE:
        """Get `self.config`."""
        return self.config

    def __setstate__(self, d: CONFIG_DICT_TYPE) -> None:
        """Set `self.config`."""
        self.config = d


def config_assert(assertion: bool, error_message: str) -> None:
    """Raise an exception if an assertion is false."""
    if not assertion:
        raise ConfigError(error_message)


def config_warn(assertion: bool, warning_message: str) -> None:
    """Print a warning message if an assertion is false."""
    if not assertion:
        logger.warning(warning_message)


def check_config_value(config: CONFIG_DICT_TYPE, key: str, data_type: type | tuple[type, ...],
                       choices: list[str] | None = None, minimum: float | None = None) -> None:
    """
    Check the validity of one config value.

    :param config: The config.
    :param key: The key to check its value.
    :param data_type: The expected data type(s).
    :param choices: The allowed values, if limited.
    :param minimum: The smallest allowed value, for numbers.
    """
    config_assert(key in config, f"Your config does not have required key `{key}`.")
    value = config[key]
    config_assert(isinstance(value, data_type) and not isinstance(value, bool),
                  f"`{key}: {value}` should be of type {getattr(data_type, '__name__', data_type)}.")
    if choices is not None:
        config_assert(value in choices, f"`{key}: {value}` is not valid. Please choose from {choices}.")
    if minimum is not None:
        config_assert(value >= minimum, f"`{key}` must be at least {minimum}, got {value}.")


def set_config_default(config: CONFIG_DICT_TYPE, key: str, default: Any, force_empty_values: bool = False) -> None:
    """
    Fill a config key with the default value if it is missing.

    :param config: The config.
    :param key: The key to set.
    :param default: The default value.
    :param force_empty_values: Whether an empty value should be replaced with the default value.
    """
    if key not in config or (force_empty_values and config[key] in [None, ""]):
        if key not in config:
            logger.debug(f"Using default `{key}: {default}`")
        config[key] = default


def change_value_to_list(config: CONFIG_DICT_TYPE, key: str) -> None:
    """
    Change a single value to a list. e.g. `a.txt` becomes [`a.txt`].

    :param config: The config.
    :param key: The key to set.
    """
    if config.get(key) is None:
        config[key] = []
    if not isinstance(config[key], list):
        config[key] = [config[key]]


def insert_default_values(CONFIG: CONFIG_DICT_TYPE) -> None:
    """
    Insert the default values of the harness keys if they are missing.

    The training keys have no defaults: a feature learner is only trained from explicit values.

    :param CONFIG: The experiment config.
    """
    for key, default in HARNESS_DEFAULTS.items():
        set_config_default(CONFIG, key=key, default=default)
    set_config_default(CONFIG, key="early_stop_tolerance", default=0.0, force_empty_values=True)
    change_value_to_list(CONFIG, key="feature_tables")


def log_config(CONFIG: CONFIG_DICT_TYPE, alternate_log_function: Callable[[str], Any] | None = None) -> None:
    """
    Log the config to make debugging easier.

    :param CONFIG: The experiment config.
    """
    destination = alternate_log_function or logger.debug
    destination(f"Config:\n{yaml.dump(CONFIG, sort_keys=False)}")
    destination("====================")


def config_hash(CONFIG: CONFIG_DICT_TYPE | Configuration) -> str:
    """
    The sha256 of the canonical YAML dump of the config, identifying an experiment in reports.

    `workers` and `output_dir` do not change results and are left out.
    """
    values = CONFIG.config if isinstance(CONFIG, Configuration) else CONFIG
    values = {key: value for key, value in values.items() if key not in EXECUTION_KEYS}
    return hashlib.sha256(yaml.safe_dump(values, sort_keys=True).encode("utf-8")).hexdigest()


def _validate_dataset(CONFIG: CONFIG_DICT_TYPE) -> None:
    """Check that the experiment's data can be found."""
    if CONFIG["dataset"] == DatasetPreset.FEATURE_TABLES:
        tables = CONFIG["feature_tables"]
        config_assert(len(tables) >= 2, "The feature-tables dataset needs at least two `feature_tables` (one per domain).")
        for table in tables:
            config_assert(os.path.isfile(table), f"The feature table `{table}` does not exist.")
        return

    cache_dir = CONFIG["cache_dir"]
    has_cache = bool(cache_dir) and os.path.isfile(os.path.join(cache_dir, CONFIG["dataset"], "manifest.yml"))
    has_idx = all(CONFIG[key] and os.path.isfile(CONFIG[key]) for key in ["idx_images", "idx_labels"])
    config_assert(has_cache or has_idx,
                  f"The {CONFIG['dataset']} dataset needs either a `cache_dir` built by `gen-data` or existing "
                  "`idx_images` and `idx_labels` files.")
    check_config_value(CONFIG, "per_class", int, minimum=1)
    check_config_value(CONFIG, "image_size", int, minimum=1)


def validate_config(CONFIG: CONFIG_DICT_TYPE, check_data: bool = True) -> None:
    """
    Check if the config is valid.

    :param CONFIG: The experiment config, with defaults inserted.
    :param check_data: Whether the data files must already exist.
    """
    unknown = sorted(set(CONFIG) - KNOWN_KEYS)
    config_assert(not unknown, f"Unknown config keys: {', '.join(unknown)}.")

    check_config_value(CONFIG, "dataset", str, [preset.value for preset in DatasetPreset])
    check_config_value(CONFIG, "method", str, [method.value for method in Method])
    check_config_value(CONFIG, "classifier", str, [kind.value for kind in ClassifierKind])
    check_config_value(CONFIG, "repetitions", int, minimum=1)
    check_config_value(CONFIG, "seed", int)
    check_config_value(CONFIG, "workers", int, minimum=1)
    check_config_value(CONFIG, "output_dir", str)
    check_config_value(CONFIG, "svm_c", (int, float))
    config_assert(CONFIG["svm_c"] > 0, f"`svm_c` must be positive, got {CONFIG['svm_c']}.")
    check_config_value(CONFIG, "svm_epochs", int, minimum=1)
    check_config_value(CONFIG, "spectrum_k", int, minimum=0)
    check_config_value(CONFIG, "cv_folds", int, minimum=0)
    config_assert(CONFIG["cv_folds"] != 1, "`cv_folds` must be 0 (no cross validation) or at least 2.")
    cv_grid = CONFIG["cv_grid"]
    config_assert(cv_grid is None or (isinstance(cv_grid, list) and cv_grid and all(isinstance(p, dict) for p in cv_grid)),
                  "`cv_grid` must be a non-empty list of mappings, e.g. [{C_reg: 0.1}, {C_reg: 1.0}].")

    method = Method(CONFIG["method"])
    needs_training = method != Method.RAW
    if needs_training:
        missing = [key for key in TRAIN_KEYS if key not in CONFIG]
        config_assert(not missing, f"Method `{method.value}` needs explicit values for: {', '.join(missing)}.")
    if CONFIG["classifier"] == ClassifierKind.ONE_HIDDEN_NET:
        check_config_value(CONFIG, "hidden_dim", int, minimum=1)
        check_config_value(CONFIG, "finetune_learning_rate", (int, float), minimum=0)
        check_config_value(CONFIG, "finetune_weight_decay", (int, float), minimum=0)
        check_config_value(CONFIG, "finetune_epochs", int, minimum=1)
        check_config_value(CONFIG, "finetune_batch_size", int, minimum=1)

    if needs_training:
        check_config_value(CONFIG, "learning_rate", (int, float), minimum=0)
        check_config_value(CONFIG, "weight_decay", (int, float), minimum=0)
        check_config_value(CONFIG, "epochs", int, minimum=1)
        check_config_value(CONFIG, "hidden_dim", int, minimum=1)
        check_config_value(CONFIG, "batch_size", int, minimum=1)
        check_config_value(CONFIG, "corruption_level", (int, float), minimum=0)
        config_assert(CONFIG["corruption_level"] <= 1, "`corruption_level` must be in [0, 1].")
        check_config_value(CONFIG, "loss_kind", str, [kind.value for kind in LossKind])
        check_config_value(CONFIG, "enc_kind", str, [kind.value for kind in ActivationKind])
        check_config_value(CONFIG, "dec_kind", str, [kind.value for kind in ActivationKind])
        config_assert(method.is_denoising == (CONFIG["corruption_level"] > 0),
                      f"Method `{method.value}` needs corruption_level "
                      f"{'> 0' if method.is_denoising else '= 0'}, got {CONFIG['corruption_level']}.")
        config_assert(CONFIG["loss_kind"] != LossKind.CROSS_ENTROPY or CONFIG["dec_kind"] == ActivationKind.SIGMOID,
                      "cross_entropy loss needs `dec_kind: sigmoid`.")
        config_warn(CONFIG["learning_rate"] > 0, "With learning_rate set to 0, the feature learner will not learn.")
        config_assert(CONFIG["spectrum_k"] == 0 or CONFIG["enc_kind"] == ActivationKind.SIGMOID,
                      "`spectrum_k` needs a sigmoid encoder (`enc_kind: sigmoid`).")

    window = CONFIG["early_stop_window"]
    config_assert(window is None or (isinstance(window, int) and window >= 1),
                  f"`early_stop_window` must be empty or a positive integer, got {window}.")
    config_warn(CONFIG["spectrum_k"] == 0 or needs_training, "`spectrum_k` is ignored for the raw method.")
    config_warn(CONFIG["workers"] <= (os.cpu_count() or 1),
                f"{CONFIG['workers']} workers requested on a machine with {os.cpu_count()} CPUs.")

    if check_data:
        _validate_dataset(CONFIG)


def load_config(config_file: str, overrides: CONFIG_DICT_TYPE | None = None, check_data: bool = True) -> Configuration:
    """
    Read the config.

    :param config_file: The filename of the config (e.g. `configs/mnist-r-dmtae.yml`).
    :param overrides: Values from the command line, applied last.
    :param check_data: Whether the data files must already exist.
    :return: A `Configuration` object containing the config.
    """
    with open(config_file, encoding="utf-8") as stream:
        try:
            CONFIG = yaml.safe_load(stream)
        except Exception:
            logger.exception(f"There appears to be a syntax problem with your config {config_file}")
            raise
    config_assert(isinstance(CONFIG, dict), f"{config_file} should hold `key: value` lines.")

    log_config(CONFIG)

    if SEED_ENVIRONMENT_VARIABLE in os.environ:
        try:
            CONFIG["seed"] = int(os.environ[SEED_ENVIRONMENT_VARIABLE])
        except ValueError as error:
            raise ConfigError(f"{SEED_ENVIRONMENT_VARIABLE} must be an integer, "
                              f"got `{os.environ[SEED_ENVIRONMENT_VARIABLE]}`.") from error
    CONFIG |= {key: value for key, value in (overrides or {}).items() if value is not None}

    insert_default_values(CONFIG)
    log_config(CONFIG)
    validate_config(CONFIG, check_data)

    return Configuration(CONFIG)
