"""
Build the multi-domain corpora the feature learners train on.

MNIST IDX files are decoded into [0, 1] images, subsampled and resized, then turned into
rotated (MNIST-r) or dilated (MNIST-s) views that share row order, so row i of every view is
the same digit. Feature tables (one sample per line, label last) stand in for precomputed
features. RAND-SEL balances per-class counts across views, and the training matrices pair
every view with every other one.
"""
from __future__ import annotations
import logging
import math
import os
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass
import numpy as np
from lib import checkpoint
from lib.core_math import RandomSource, check_finite
from lib.mtae_types import FloatArray, IntArray, MANIFEST_TYPE

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 1 << 31
CORPUS_KIND = "corpus"

Image = FloatArray
Transform = Callable[[Image], Image]


class IdxFormatError(ValueError):
    """Raised when an IDX file does not follow the format."""


class FeatureTableError(ValueError):
    """Raised when a feature table cannot be parsed."""


class CorpusError(ValueError):
    """Raised when views cannot be combined the way an operation needs."""


@dataclass(frozen=True, eq=False)
class DomainView:
    """The samples of one domain: a data matrix with one row per sample and its class ids."""

    domain_name: str
    X: FloatArray
    labels: IntArray
    image_shape: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        """Check the shapes and values."""
        if self.X.ndim != 2:
            raise CorpusError(f"view `{self.domain_name}` needs a 2-D data matrix, got shape {self.X.shape}")
        if self.X.shape[0] != len(self.labels):
            raise CorpusError(f"view `{self.domain_name}` has {self.X.shape[0]} rows but {len(self.labels)} labels")
        if len(self.labels) and int(np.min(self.labels)) < 0:
            raise CorpusError(f"view `{self.domain_name}` has a negative class id")
        if self.image_shape is not None and math.prod(self.image_shape) != self.X.shape[1]:
            raise CorpusError(f"view `{self.domain_name}` rows of length {self.X.shape[1]} "
                              f"are not {self.image_shape} images")
        check_finite(self.X, f"non-finite value in view `{self.domain_name}`")

    @property
    def n(self) -> int:
        """Number of samples."""
        return int(self.X.shape[0])

    @property
    def d_x(self) -> int:
        """Input dimensionality."""
        return int(self.X.shape[1])

    def rows(self, index: IntArray, domain_name: str | None = None) -> DomainView:
        """A view holding the selected rows, in the given order."""
        return DomainView(domain_name or self.domain_name, self.X[index], self.labels[index], self.image_shape)


@dataclass(frozen=True, eq=False)
class MultiDomainCorpus:
    """M views of the same categories, in a fixed order."""

    views: tuple[DomainView, ...]

    def __post_init__(self) -> None:
        """Check that the views can be used together."""
        if not self.views:
            raise CorpusError("a corpus needs at least one view")
        dims = {view.d_x for view in self.views}
        if len(dims) != 1:
            raise CorpusError(f"views have different input dimensions {sorted(dims)}")
        names = [view.domain_name for view in self.views]
        if len(set(names)) != len(names):
            raise CorpusError(f"view names are not unique: {names}")

    @property
    def aligned(self) -> bool:
        """Whether every view has the same number of rows and row i carries the same label everywhere."""
        first = self.views[0]
        return all(view.n == first.n and np.array_equal(view.labels, first.labels) for view in self.views[1:])

    @property
    def M(self) -> int:
        """Number of views."""
        return len(self.views)

    @property
    def names(self) -> list[str]:
        """Domain names in view order."""
        return [view.domain_name for view in self.views]

    @property
    def d_x(self) -> int:
        """Input dimensionality shared by all views."""
        return self.views[0].d_x

    @property
    def classes(self) -> list[int]:
        """Every class id that occurs in any view."""
        return sorted({int(c) for view in self.views for c in np.unique(view.labels)})

    def view(self, name: str) -> DomainView:
        """The view called `name`."""
        for view in self.views:
            if view.domain_name == name:
                return view
        raise CorpusError(f"no view named `{name}`; views are {self.names}")


@dataclass(frozen=True, eq=False)
class TrainingMatrices:
    """
    Input rows and the M target matrices of the multi-task reconstruction.

    `X_bar` stacks all views; `X_bar_l[l]` stacks view l M times, so the pair
    (X_bar row j, X_bar_l[l] row j) is one input/target example of task l.
    """

    X_bar: FloatArray
    X_bar_l: tuple[FloatArray, ...]
    block_rows: int

    @property
    def M(self) -> int:
        """Number of tasks (decoders)."""
        return len(self.X_bar_l)


def _read_be32(data: bytes, offset: int) -> int:
    if len(data) < offset + 4:
        raise IdxFormatError("truncated file")
    value: int = struct.unpack_from(">I", data, offset)[0]
    return value


def _idx_payload(data: bytes, magic: int, dims_count: int, what: str) -> tuple[list[int], bytes]:
    """Check an IDX header and return its dimensions and payload."""
    if _read_be32(data, 0) != magic:
        raise IdxFormatError(f"wrong magic for {what} file")
    dims = [_read_be32(data, 4 + 4 * i) for i in range(dims_count)]
    total = math.prod(dims)
    if total > MAX_IDX_ELEMENTS:
        raise IdxFormatError(f"dimension overflow: {dims} describe {total} elements")
    start = 4 + 4 * dims_count
    payload = data[start:start + total]
    if len(payload) < total:
        raise IdxFormatError(f"truncated file: expected {total} bytes of data, found {len(payload)}")
    if len(data) > start + total:
        logger.warning(f"Ignoring {len(data) - start - total} trailing bytes after the IDX {what} data.")
    return dims, payload


def parse_idx_images(data: bytes) -> list[Image]:
    """Decode IDX image bytes into images with pixels scaled into [0, 1]."""
    (count, rows, cols), payload = _idx_payload(data, IMAGE_MAGIC, 3, "image")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols).astype(np.float64) / 255.0
    return list(pixels)


def parse_idx_labels(data: bytes) -> list[int]:
    """Decode IDX label bytes."""
    _, payload = _idx_payload(data, LABEL_MAGIC, 1, "label")
    return [int(b) for b in payload]


def load_idx_images(path: str) -> list[Image]:
    """Read an IDX image file (magic 0x00000803)."""
    with open(path, "rb") as file:
        images = parse_idx_images(file.read())
    logger.debug(f"Read {len(images)} images from {path}")
    return images


def load_idx_labels(path: str) -> list[int]:
    """Read an IDX label file (magic 0x00000801)."""
    with open(path, "rb") as file:
        return parse_idx_labels(file.read())


def encode_idx_images(images: Sequence[Image]) -> bytes:
    """Encode same-sized [0, 1] images as IDX bytes (pixels rounded to the nearest 1/255)."""
    rows, cols = images[0].shape if images else (0, 0)
    header = struct.pack(">IIII", IMAGE_MAGIC, len(images), rows, cols)
    pixels = np.rint(np.array(images, dtype=np.float64).reshape(-1) * 255.0).astype(np.uint8)
    return header + pixels.tobytes()


def encode_idx_labels(labels: Sequence[int]) -> bytes:
    """Encode class ids (0..255) as IDX bytes."""
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + bytes(labels)


def _tap(img: Image, yi: IntArray, xi: IntArray) -> FloatArray:
    """Pixel values at integer coordinates, 0 outside the image."""
    height, width = img.shape
    inside = (yi >= 0) & (yi < height) & (xi >= 0) & (xi < width)
    values = img[np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1)]
    return np.where(inside, values, 0.0)


def _bilinear_sample(img: Image, ys: FloatArray, xs: FloatArray) -> FloatArray:
    """Bilinear interpolation of `img` at real coordinates; samples outside the image are 0."""
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    top = (1.0 - fx) * _tap(img, y0i, x0i) + fx * _tap(img, y0i, x0i + 1)
    bottom = (1.0 - fx) * _tap(img, y0i + 1, x0i) + fx * _tap(img, y0i + 1, x0i + 1)
    return np.clip((1.0 - fy) * top + fy * bottom, 0.0, 1.0)


def _grid(source_length: int, target_length: int) -> FloatArray:
    """Corner-aligned sample positions; a single sample sits in the middle."""
    if target_length == 1:
        return np.array([(source_length - 1) / 2.0])
    return np.arange(target_length, dtype=np.float64) * ((source_length - 1) / (target_length - 1))


def resize_bilinear(img: Image, w: int, h: int) -> Image:
    """
    Resize an image with bilinear interpolation on a corner-aligned grid.

    :param img: The image to resize.
    :param w: Output width.
    :param h: Output height.
    :return: An h × w image.
    """
    if w < 1 or h < 1:
        raise ValueError(f"cannot resize to {w}x{h}")
    ys, xs = np.meshgrid(_grid(img.shape[0], h), _grid(img.shape[1], w), indexing="ij")
    return _bilinear_sample(img, ys, xs)


def _exact_cos_sin(degrees: float) -> tuple[float, float]:
    """cos and sin of an angle, exact on multiples of 90 degrees."""
    quarter_turns = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    reduced = degrees % 360.0
    if reduced in quarter_turns:
        return quarter_turns[reduced]
    radians = math.radians(degrees)
    return math.cos(radians), math.sin(radians)


def rotate_image(img: Image, degrees: float) -> Image:
    """
    Rotate a square image counterclockwise about its center.

    Every output pixel is mapped back into the input and sampled bilinearly; positions that fall
    outside the input contribute 0.
    """
    height, width = img.shape
    if height != width:
        raise ValueError(f"rotation needs a square image, got {width}x{height}")
    cos, sin = _exact_cos_sin(degrees)
    center = (width - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    dy = rows - center
    dx = cols - center
    xs = center + dx * cos - dy * sin
    ys = center + dx * sin + dy * cos
    return _bilinear_sample(img, ys, xs)


def dilate_image(img: Image, factor: float) -> Image:
    """Shrink the content by `factor` and pad it with zeros back to the original size, centered."""
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"dilation factor {factor} is outside (0, 1]")
    height, width = img.shape
    new_height = max(1, math.floor(factor * height + 0.5))
    new_width = max(1, math.floor(factor * width + 0.5))
    if (new_height, new_width) == (height, width):
        return img.copy()
    shrunk = resize_bilinear(img, new_width, new_height)
    out = np.zeros_like(img)
    top = (height - new_height) // 2
    left = (width - new_width) // 2
    out[top:top + new_height, left:left + new_width] = shrunk
    return out


@dataclass(frozen=True)
class ViewTransform:
    """A named rotation or dilation that produces one view from the base view."""

    name: str
    kind: str
    amount: float

    def __call__(self, img: Image) -> Image:
        """Apply the transform."""
        if self.kind == "rotate":
            return rotate_image(img, self.amount)
        if self.kind == "dilate":
            return dilate_image(img, self.amount)
        if self.kind == "identity":
            return img.copy()
        raise ValueError(f"unknown transform kind `{self.kind}`")

    def describe(self) -> MANIFEST_TYPE:
        """The transform's parameters for a corpus manifest."""
        return {"name": self.name, "kind": self.kind, "amount": float(self.amount)}


def mnist_r_transforms() -> list[tuple[str, Transform]]:
    """The six rotated views: 0°, 15°, ..., 75°."""
    angles = [0, 15, 30, 45, 60, 75]
    return [(t.name, t) for t in (ViewTransform("M" if a == 0 else f"M{a}", "rotate", float(a)) for a in angles)]


def mnist_s_transforms() -> list[tuple[str, Transform]]:
    """The five dilated views: factors 1.0, 0.9, ..., 0.6."""
    factors = [1.0, 0.9, 0.8, 0.7, 0.6]
    return [(t.name, t) for t in (ViewTransform("M" if f == 1.0 else f"M*{f}", "dilate", f) for f in factors)]


def _image_shape(view: DomainView) -> tuple[int, int]:
    if view.image_shape is not None:
        return view.image_shape
    side = math.isqrt(view.d_x)
    if side * side != view.d_x:
        raise CorpusError(f"rows of view `{view.domain_name}` are not square images")
    return side, side


def select_base_subset(images: Sequence[Image], labels: Sequence[int], per_class: int, r: RandomSource,
                       size: int = 16) -> DomainView:
    """
    Draw the base view M: `per_class` random images of every class, resized to size × size.

    :param images: The decoded IDX images.
    :param labels: Their class ids.
    :param per_class: How many images to keep per class. Classes with fewer keep them all.
    :param r: Chooses the images.
    :param size: Output side length in pixels.
    :return: A view named `M`, rows ordered class by class.
    """
    if len(images) != len(labels):
        raise CorpusError(f"{len(images)} images but {len(labels)} labels")
    label_array = np.asarray(labels, dtype=np.int64)
    chosen: list[int] = []
    for c in np.unique(label_array):
        members = np.flatnonzero(label_array == c)
        if len(members) < per_class:
            logger.warning(f"Class {c} has only {len(members)} images; keeping all of them instead of {per_class}.")
        chosen.extend(int(i) for i in members[r.permutation(len(members))[:per_class]])

    X = np.array([resize_bilinear(images[i], size, size).ravel() for i in chosen]).reshape(len(chosen), size * size)
    logger.info(f"Selected {len(chosen)} base images of {size}x{size} pixels from {len(images)}.")
    return DomainView("M", X, label_array[chosen], (size, size))


def build_view_corpus(base: DomainView, transforms: Sequence[tuple[str, Transform]]) -> MultiDomainCorpus:
    """
    Apply each transform to every row of the base view.

    :param base: Rows are flattened images.
    :param transforms: (name, transform) pairs, one per output view.
    :return: An aligned corpus; row i of view k is transform k of base row i.
    """
    if not transforms:
        raise CorpusError("empty transform list")
    if base.n < 1:
        raise CorpusError("the base view has no rows")
    shape = _image_shape(base)
    views = []
    for name, transform in transforms:
        X = np.array([transform(row.reshape(shape)).ravel() for row in base.X])
        views.append(DomainView(name, X, base.labels.copy(), shape))
        logger.debug(f"Built view `{name}` with {len(X)} rows")
    return MultiDomainCorpus(tuple(views))


def subcorpus(corpus: MultiDomainCorpus, names: Sequence[str]) -> MultiDomainCorpus:
    """The views called `names`, in that order."""
    return MultiDomainCorpus(tuple(corpus.view(name) for name in names))


def rand_sel(corpus: MultiDomainCorpus, r: RandomSource, preserve_instances: bool = True) -> MultiDomainCorpus:
    """
    Balance the samples per class across views while keeping the class-level correspondence.

    For class c every view keeps m_c = min over views of its count of c, chosen at random without
    replacement, and rows are laid out class by class so row i has the same class in every view.
    When the corpus is already aligned and `preserve_instances` is set, the same random rows are
    taken from every view, so row i stays the same instance everywhere.

    :param corpus: Views that may have different sizes and class counts.
    :param r: Chooses the rows.
    :param preserve_instances: Share one selection across views of an aligned corpus.
    :return: An aligned corpus.
    """
    classes = corpus.classes
    members = [[np.flatnonzero(view.labels == c) for c in classes] for view in corpus.views]
    for view, per_class in zip(corpus.views, members):
        for c, rows in zip(classes, per_class):
            if len(rows) == 0:
                raise CorpusError(f"class absent in domain: class {c} has no samples in view `{view.domain_name}`")

    shared = preserve_instances and corpus.aligned
    chosen: list[list[IntArray]] = [[] for _ in corpus.views]
    for k, _ in enumerate(classes):
        m_c = min(len(per_class[k]) for per_class in members)
        if shared:
            rows = members[0][k][r.permutation(len(members[0][k]))[:m_c]]
            for selection in chosen:
                selection.append(rows)
        else:
            for selection, per_class in zip(chosen, members):
                selection.append(per_class[k][r.permutation(len(per_class[k]))[:m_c]])

    views = tuple(view.rows(np.concatenate(selection)) for view, selection in zip(corpus.views, chosen))
    return MultiDomainCorpus(views)


def assemble_training_matrices(corpus: MultiDomainCorpus) -> TrainingMatrices:
    """
    Stack the views into the multi-task input and target matrices.

    X_bar = [X¹; X²; ...; X^M] and X_bar_l[l] = [X^l; X^l; ...; X^l].
    """
    if not corpus.aligned:
        raise CorpusError("corpus is not aligned; run rand_sel first")
    X_bar = np.vstack([view.X for view in corpus.views])
    X_bar_l = tuple(np.tile(view.X, (corpus.M, 1)) for view in corpus.views)
    return TrainingMatrices(X_bar, X_bar_l, corpus.views[0].n)


def _split_fields(line: str) -> list[str]:
    if "," in line:
        return [field.strip() for field in line.split(",")]
    return line.split()


def load_feature_table(path: str, domain_name: str | None = None) -> DomainView:
    """
    Read a delimited feature table: one sample per line, features then an integer class id.

    Fields are separated by commas or whitespace. Blank lines and lines starting with `#` are
    skipped.

    :param path: The table file.
    :param domain_name: Defaults to the file name without its extension.
    :return: The samples as a view.
    """
    name = domain_name or os.path.splitext(os.path.basename(path))[0]
    features: list[list[float]] = []
    labels: list[int] = []
    width: int | None = None
    with open(path, encoding="utf-8") as table:
        for line_number, line in enumerate(table, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = _split_fields(stripped)
            if width is None:
                width = len(fields)
                if width < 2:
                    raise FeatureTableError(f"{path} row {line_number}: need at least one feature and a label")
            if len(fields) != width:
                raise FeatureTableError(f"{path} row {line_number} has {len(fields)} columns, expected {width}")
            try:
                features.append([float(field) for field in fields[:-1]])
                labels.append(int(fields[-1]))
            except ValueError as error:
                raise FeatureTableError(f"{path} row {line_number}: {error}") from error

    if not features:
        raise FeatureTableError(f"{path}: no rows")
    logger.debug(f"Read {len(features)} samples with {width - 1 if width else 0} features from {path}")
    return DomainView(name, np.array(features, dtype=np.float64), np.array(labels, dtype=np.int64))


def write_feature_table(view: DomainView, path: str) -> None:
    """Write a view as a comma-delimited feature table."""
    with open(path, "w", encoding="utf-8") as table:
        for row, label in zip(view.X, view.labels):
            table.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


@dataclass(frozen=True, eq=False)
class MinMaxScaling:
    """Per-feature affine map sending the fitted minimum to 0 and maximum to 1."""

    lo: FloatArray
    span: FloatArray

    def apply(self, X: FloatArray) -> FloatArray:
        """Scale rows of `X`. Values outside the fitted range map outside [0, 1]."""
        return (X - self.lo) / self.span


def fit_min_max(X: FloatArray) -> MinMaxScaling:
    """Fit a `MinMaxScaling` on the rows of `X`; constant features get a span of 1."""
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"cannot fit a scaling on shape {X.shape}")
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    return MinMaxScaling(lo, np.where(span > 0, span, 1.0))


def make_gaussian_domains(r: RandomSource, num_domains: int = 3, dim: int = 512, num_classes: int = 5,
                          per_class: int | Sequence[int] = 40, separation: float = 1.0, noise: float = 1.0,
                          shift: float = 1.5, informative: int = 8) -> list[DomainView]:
    """
    Synthesize feature-table domains of Gaussian class clusters.

    All domains share the class means; domain l rescales them, adds its own offset vector and
    isotropic noise, the way dataset bias shifts features between datasets.

    :param r: Draws every random quantity.
    :param num_domains: How many domains to create.
    :param dim: Feature dimensionality.
    :param num_classes: Number of classes.
    :param per_class: Samples per class, either one count or one per domain.
    :param separation: Scale of the class means.
    :param noise: Standard deviation of the within-class noise.
    :param shift: Scale of the per-domain offsets.
    :param informative: Only the first `informative` features separate the classes; the rest carry noise and
        domain offsets alone.
    :return: One view per domain, named D0, D1, ...
    """
    counts = [per_class] * num_domains if isinstance(per_class, int) else list(per_class)
    if len(counts) != num_domains:
        raise ValueError(f"{len(counts)} per-class counts given for {num_domains} domains")
    if informative < 1:
        raise ValueError(f"at least one informative feature is needed, got {informative}")
    means = r.uniform(-separation, separation, (num_classes, dim))
    means[:, informative:] = 0.0
    views = []
    for domain, count in enumerate(counts):
        offset = r.uniform(-shift, shift, dim)
        scale = float(r.uniform(0.8, 1.2)[0])
        labels = np.repeat(np.arange(num_classes, dtype=np.int64), count)
        X = scale * (means[labels] + noise * r.normal((len(labels), dim))) + offset
        views.append(DomainView(f"D{domain}", X, labels))
    return views


def save_corpus(corpus: MultiDomainCorpus, directory: str, metadata: MANIFEST_TYPE | None = None) -> None:
    """
    Cache a corpus as a directory: `manifest.yml` plus one little-endian float64 blob per view.

    :param corpus: The corpus to store.
    :param directory: Created if needed.
    :param metadata: Seed, transform parameters and anything else needed to rebuild it.
    """
    os.makedirs(directory, exist_ok=True)
    views = []
    for index, view in enumerate(corpus.views):
        blob = f"view-{index}.bin"
        entries = checkpoint.write_blob(os.path.join(directory, blob),
                                        {"pixels": view.X, "labels": view.labels.astype(np.float64)})
        views.append({"name": view.domain_name,
                      "rows": view.n,
                      "d_x": view.d_x,
                      "image_shape": list(view.image_shape) if view.image_shape else None,
                      "blob": blob,
                      "arrays": entries})
    checkpoint.write_manifest(directory, {"format": checkpoint.FORMAT_NAME,
                                          "format_version": checkpoint.FORMAT_VERSION,
                                          "kind": CORPUS_KIND,
                                          "dtype": checkpoint.LITTLE_ENDIAN_FLOAT64,
                                          "views": views,
                                          "metadata": metadata or {}})
    logger.info(f"Cached {corpus.M} views ({', '.join(corpus.names)}) in {directory}")


def load_corpus(directory: str) -> MultiDomainCorpus:
    """Read a corpus written by `save_corpus`."""
    manifest = checkpoint.read_manifest(directory)
    if manifest.get("kind") != CORPUS_KIND:
        raise checkpoint.CheckpointError(f"{directory} holds a `{manifest.get('kind')}`, not a corpus")
    views = []
    for entry in manifest["views"]:
        arrays = checkpoint.read_blob(os.path.join(directory, entry["blob"]), entry["arrays"])
        shape = tuple(entry["image_shape"]) if entry.get("image_shape") else None
        views.append(DomainView(entry["name"], arrays["pixels"], arrays["labels"].astype(np.int64),
                                (shape[0], shape[1]) if shape else None))
    return MultiDomainCorpus(tuple(views))
