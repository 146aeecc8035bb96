"""Some type hints that can be accessed by all other python files."""
import datetime
from enum import Enum
from typing import Any, TypedDict, TypeAlias
import numpy as np
import numpy.typing as npt

FloatArray: TypeAlias = npt.NDArray[np.float64]
IntArray: TypeAlias = npt.NDArray[np.int64]

# Types that still use `Any`.
CONFIG_DICT_TYPE: TypeAlias = dict[str, Any]
MANIFEST_TYPE: TypeAlias = dict[str, Any]


class ActivationKind(str, Enum):
    """The nonlinearity applied by a layer."""

    SIGMOID = "sigmoid"
    RELU = "relu"
    LINEAR = "linear"


class LossKind(str, Enum):
    """How a reconstruction is compared to its target."""

    CROSS_ENTROPY = "cross_entropy"
    """Sum of binary cross-entropies. Targets and reconstructions must lie in [0, 1]."""
    SQUARED = "squared"
    """Half the squared Euclidean distance."""


class Method(str, Enum):
    """The feature learner used before classification."""

    RAW = "raw"
    AE = "ae"
    DAE = "dae"
    MTAE = "mtae"
    D_MTAE = "d-mtae"

    @property
    def is_multi_task(self) -> bool:
        """Whether the method trains one decoder per source domain."""
        return self in (Method.MTAE, Method.D_MTAE)

    @property
    def is_denoising(self) -> bool:
        """Whether the method corrupts its inputs during training."""
        return self in (Method.DAE, Method.D_MTAE)


class ClassifierKind(str, Enum):
    """The supervised learner trained on top of the features."""

    LINEAR_SVM = "linear-svm"
    ONE_HIDDEN_NET = "1hnn"


class DatasetPreset(str, Enum):
    """Where the domains of an experiment come from."""

    MNIST_R = "mnist-r"
    MNIST_S = "mnist-s"
    FEATURE_TABLES = "feature-tables"


class VersioningType(TypedDict):
    """Type hint for the versioning information from lib/versioning.yml."""

    mtae_lab_version: str
    minimum_python_version: str
    deprecated_python_version: str
    deprecation_date: datetime.date


class ArrayEntryType(TypedDict):
    """Where one array lives inside a checkpoint blob."""

    name: str
    shape: list[int]
    offset: int


class CheckpointManifestType(TypedDict, total=False):
    """Type hint for the `manifest.yml` of a checkpoint directory."""

    format: str
    format_version: int
    kind: str
    blob: str
    dtype: str
    arrays: list[ArrayEntryType]
    metadata: MANIFEST_TYPE
