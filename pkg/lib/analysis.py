"""Invariance diagnostics of a trained encoder: Jacobian singular value spectra and filter images."""
from __future__ import annotations
import logging
import math
from dataclasses import dataclass
from typing import Literal
import numpy as np
from lib.autoencoders import ModelParams
from lib.core_math import RandomSource, activation, singular_values
from lib.mtae_types import ActivationKind, FloatArray

logger = logging.getLogger(__name__)

GRAY = 0.5
DEFAULT_LOW = -3.0
DEFAULT_HIGH = 3.0
JACOBIAN_CHUNK = 64


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    """The average singular value spectrum of the encoder Jacobian over a set of samples."""

    mean_spectrum: FloatArray
    sample_count: int
    model_tag: str = ""


@dataclass(frozen=True, eq=False)
class FilterGrid:
    """Thresholded filters laid out as tiles, row by row."""

    cells: list[FloatArray]
    rows: int
    cols: int
    thresholds: tuple[float, float] = (DEFAULT_LOW, DEFAULT_HIGH)

    def __post_init__(self) -> None:
        """Check that every cell has a place."""
        if self.rows * self.cols < len(self.cells):
            raise ValueError(f"a {self.rows}x{self.cols} grid cannot hold {len(self.cells)} cells")

    def canvas(self) -> FloatArray:
        """One image of all tiles, separated by one gray pixel. Unused cells are gray."""
        if not self.cells:
            return np.full((1, 1), GRAY)
        side = self.cells[0].shape[0]
        height = self.rows * side + self.rows - 1
        width = self.cols * side + self.cols - 1
        image = np.full((height, width), GRAY)
        for index, cell in enumerate(self.cells):
            top = (index // self.cols) * (side + 1)
            left = (index % self.cols) * (side + 1)
            image[top:top + side, left:left + side] = cell
        return image


def encoder_jacobian(p: ModelParams, x: FloatArray) -> FloatArray:
    """
    ∂h/∂x of the encoder at `x`.

    :param p: A model with a sigmoid encoder.
    :param x: One input vector.
    :return: The d_h × d_x matrix diag(h ∘ (1 − h))·Wᵀ.
    """
    if p.enc_kind != ActivationKind.SIGMOID:
        raise ValueError("jacobian defined for sigmoid encoder only")
    if x.shape != (p.d_x,):
        raise ValueError(f"input has shape {x.shape}, the model expects ({p.d_x},)")
    h = activation(x @ p.W + p.b_enc, p.enc_kind)
    return (h * (1.0 - h))[:, None] * p.W.T


def average_spectrum(p: ModelParams, X: FloatArray, model_tag: str = "",
                     method: Literal["lapack", "jacobi"] = "lapack") -> SpectrumReport:
    """
    Average the descending singular values of the encoder Jacobian over the rows of `X`.

    The per-index sums are exactly rounded, so the result does not depend on the order of the rows.

    :param p: A model with a sigmoid encoder.
    :param X: One sample per row, at least one.
    :param model_tag: Names the model in reports.
    :param method: Singular value back-end; `jacobi` is slow and meant for small models.
    :return: The spectrum report.
    """
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"average_spectrum needs at least one sample, got shape {X.shape}")
    if p.enc_kind != ActivationKind.SIGMOID:
        raise ValueError("jacobian defined for sigmoid encoder only")
    if X.shape[1] != p.d_x:
        raise ValueError(f"input has {X.shape[1]} features, the model expects {p.d_x}")

    if method == "jacobi":
        spectra = np.array([singular_values(encoder_jacobian(p, x), "jacobi") for x in X])
    else:
        chunks = []
        for start in range(0, X.shape[0], JACOBIAN_CHUNK):
            H = activation(X[start:start + JACOBIAN_CHUNK] @ p.W + p.b_enc, p.enc_kind)
            jacobians = (H * (1.0 - H))[:, :, None] * p.W.T[None, :, :]
            chunks.append(-np.sort(-np.linalg.svd(jacobians, compute_uv=False), axis=1))
        spectra = np.vstack(chunks)

    count = spectra.shape[0]
    mean = np.array([math.fsum(column) / count for column in spectra.T])
    logger.debug(f"Averaged {spectra.shape[1]} singular values over {count} samples for `{model_tag}`")
    return SpectrumReport(mean, count, model_tag)


def top_k_mass(report: SpectrumReport, k: int) -> float:
    """Fraction of the total spectrum held by the k largest mean singular values."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    total = math.fsum(report.mean_spectrum)
    if total <= 0:
        raise ValueError("the spectrum is identically zero")
    return math.fsum(report.mean_spectrum[:k]) / total


def write_spectrum(report: SpectrumReport, path: str) -> None:
    """Write a spectrum as delimited text: a header naming the model, then one line per index."""
    with open(path, "w", encoding="utf-8") as file:
        file.write(f"# model={report.model_tag} samples={report.sample_count}\n")
        file.write("index,mean_singular_value\n")
        for index, value in enumerate(report.mean_spectrum, start=1):
            file.write(f"{index},{float(value)!r}\n")


def threshold_filter(w: FloatArray, low: float = DEFAULT_LOW, high: float = DEFAULT_HIGH) -> FloatArray:
    """Render one filter as a square tile: ≥ high is white, ≤ low is black, anything else gray."""
    side = math.isqrt(len(w))
    if side * side != len(w):
        raise ValueError(f"filter length {len(w)} is not a perfect square")
    tile = np.full(len(w), GRAY)
    tile[w >= high] = 1.0
    tile[w <= low] = 0.0
    return tile.reshape(side, side)


def render_filter_grid(W: FloatArray, indices: list[int], cols: int, low: float = DEFAULT_LOW,
                       high: float = DEFAULT_HIGH) -> FilterGrid:
    """Tile the filters W[:, j] for j in `indices`, `cols` to a row."""
    if cols < 1:
        raise ValueError(f"cols must be >= 1, got {cols}")
    if low >= high:
        raise ValueError(f"low threshold {low} must be below high threshold {high}")
    cells = [threshold_filter(W[:, j], low, high) for j in indices]
    return FilterGrid(cells, max(1, math.ceil(len(cells) / cols)), cols, (low, high))


def write_pgm(image: FloatArray, path: str) -> None:
    """Write a [0, 1] image as an 8-bit binary PGM."""
    height, width = image.shape
    pixels = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as file:
        file.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        file.write(pixels.tobytes())


def export_filter_grid(W: FloatArray, count: int, cols: int, low: float = DEFAULT_LOW, high: float = DEFAULT_HIGH,
                       r: RandomSource | None = None, path: str | None = None) -> FilterGrid:
    """
    Draw `count` random filters of an encoder and optionally save them as a PGM image.

    :param W: The d_x × d_h encoder weights; column j is filter j.
    :param count: How many filters, at most d_h.
    :param cols: Tiles per row.
    :param low: Values at or below are black.
    :param high: Values at or above are white.
    :param r: Chooses the filters; the first `count` are used when None.
    :param path: Where to write the grid.
    :return: The grid.
    """
    d_h = W.shape[1]
    if not 1 <= count <= d_h:
        raise ValueError(f"cannot draw {count} filters from {d_h} hidden units")
    indices = [int(j) for j in (r.permutation(d_h)[:count] if r is not None else range(count))]
    grid = render_filter_grid(W, indices, cols, low, high)
    if path is not None:
        write_pgm(grid.canvas(), path)
        logger.info(f"Wrote {count} filters as a {grid.rows}x{grid.cols} grid to {path}")
    return grid
