"""Penalized model selection and slope-heuristics calibration.

Given per-model empirical risks and a penalty shape, this module minimizes
the penalized criterion, traces the selected model along a grid of penalty
multipliers, locates the dimension jump, and selects at twice the detected
multiplier.  Tie-breaking is deterministic everywhere: smallest dimension
first, then smallest model index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .models import ModelCollection


class NoJumpError(RuntimeError):
    """The selected dimension never drops along the multiplier grid."""


@dataclass(frozen=True, eq=False)
class PenaltyShape:
    """One penalty value per model, up to a common multiplier.

    ``kind`` is one of ``linear_dimension`` (D/n), ``oracle_mean_p2``
    (Monte Carlo estimate of the mean empirical excess risk) or
    ``user_supplied``.
    """

    values: np.ndarray
    kind: str
    stderr: np.ndarray | None = None

    _KINDS = ("linear_dimension", "oracle_mean_p2", "user_supplied")

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("penalty values must be a 1-d vector")
        if not np.all(np.isfinite(v)) or np.any(v < 0.0):
            raise ValueError("penalty values must be finite and non-negative")
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}; expected {self._KINDS}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if self.stderr is not None:
            s = np.asarray(self.stderr, dtype=float).copy()
            s.flags.writeable = False
            object.__setattr__(self, "stderr", s)


def linear_dimension_shape(collection: ModelCollection, n: int) -> PenaltyShape:
    return PenaltyShape(collection.dimensions / float(n), kind="linear_dimension")


@dataclass(frozen=True, eq=False)
class SelectionPath:
    """The selected model as a function of the penalty multiplier."""

    grid: np.ndarray
    selected_index: np.ndarray
    selected_dimension: np.ndarray
    criterion_values: np.ndarray

    def __len__(self) -> int:
        return self.grid.size


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    """Detected minimal multiplier and the final selection at twice it."""

    a_min_hat: float
    jump_from_dim: int
    jump_to_dim: int
    final_model_index: int
    final_dimension: int
    method: str


def _tie_break_order(collection: ModelCollection) -> np.ndarray:
    dims = collection.dimensions
    return np.lexsort((np.arange(len(collection)), dims))


def _argmin_with_ties(criterion: np.ndarray, perm: np.ndarray) -> int:
    # np.argmin returns the first minimum, so scanning in (dimension, index)
    # order realizes the deterministic tie-break.
    return int(perm[np.argmin(criterion[perm])])


def select(collection: ModelCollection, fitted_risks, penalty) -> int:
    """Index minimizing risk + penalty; ties resolve to the smallest model."""
    risks = np.asarray(fitted_risks, dtype=float)
    pen = np.asarray(penalty, dtype=float)
    if risks.shape != (len(collection),) or pen.shape != (len(collection),):
        raise ValueError("risks and penalties must have one entry per model")
    if np.any(pen < 0.0):
        raise ValueError("penalties must be non-negative")
    return _argmin_with_ties(risks + pen, _tie_break_order(collection))


def default_grid(fitted_risks, shape: PenaltyShape, num: int = 200,
                 lo: float = 1e-3, hi: float = 1e2) -> np.ndarray:
    """Log-spaced multiplier grid scaled to the data.

    The span ``[lo, hi]`` is multiplied by ``median(risks) / median(shape)``
    so the interesting multiplier range sits inside the grid for any
    normalization of the shape.
    """
    risks = np.asarray(fitted_risks, dtype=float)
    positive = shape.values[shape.values > 0]
    scale = 1.0
    if positive.size and np.median(np.abs(risks)) > 0:
        scale = float(np.median(np.abs(risks)) / np.median(positive))
    return np.geomspace(lo * scale, hi * scale, num)


def compute_path(
    collection: ModelCollection,
    fitted_risks,
    shape: PenaltyShape,
    grid,
) -> SelectionPath:
    """Selected model for every multiplier of the grid.

    The selected dimension is checked to be non-increasing in the multiplier;
    this is guaranteed whenever the shape is non-decreasing in dimension, and
    the check is skipped for shapes where it can legitimately fail.
    """
    risks = np.asarray(fitted_risks, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 16:
        raise ValueError("grid must be an increasing vector with at least 16 points")
    if np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("grid must be strictly increasing and non-negative")
    if risks.shape != (len(collection),):
        raise ValueError("risks must have one entry per model")
    if shape.values.shape != (len(collection),):
        raise ValueError("shape must have one entry per model")

    criterion = risks[None, :] + grid[:, None] * shape.values[None, :]
    perm = _tie_break_order(collection)
    rows = np.argmin(criterion[:, perm], axis=1)
    selected = perm[rows]
    dims = collection.dimensions[selected]

    shape_by_dim = shape.values[perm]
    if np.all(np.diff(shape_by_dim) >= 0) and np.any(np.diff(dims) > 0):
        raise RuntimeError("selected dimension increased along the multiplier grid")
    return SelectionPath(
        grid=grid,
        selected_index=selected.astype(int),
        selected_dimension=dims.astype(int),
        criterion_values=criterion,
    )


def detect_jump(
    path: SelectionPath,
    method: str = "max_jump",
    dim_threshold: int | None = None,
) -> CalibrationResult:
    """Locate the multiplier where the selected dimension collapses.

    ``max_jump``: the grid point after the largest drop between consecutive
    grid points (earliest on ties).  ``threshold``: the smallest grid
    multiplier whose selected dimension is at most ``dim_threshold``.
    The returned ``final_model_index`` is a placeholder (-1); ``calibrate``
    fills it by re-minimizing at twice the detected multiplier.
    """
    dims = path.selected_dimension
    if dims.size == 0:
        raise ValueError("path is empty")
    if np.all(dims == dims[0]):
        raise NoJumpError("selected dimension is constant along the grid")
    if method == "max_jump":
        drops = dims[:-1] - dims[1:]
        best = int(np.argmax(drops))
        if drops[best] <= 0:
            raise NoJumpError("selected dimension never drops along the grid")
        return CalibrationResult(
            a_min_hat=float(path.grid[best + 1]),
            jump_from_dim=int(dims[best]),
            jump_to_dim=int(dims[best + 1]),
            final_model_index=-1,
            final_dimension=-1,
            method="max_jump",
        )
    if method == "threshold":
        if dim_threshold is None:
            raise ValueError("threshold method requires dim_threshold")
        below = np.nonzero(dims <= dim_threshold)[0]
        if below.size == 0:
            raise NoJumpError("selected dimension never drops below the threshold")
        first = int(below[0])
        if first == 0:
            raise NoJumpError("path starts below the dimension threshold")
        return CalibrationResult(
            a_min_hat=float(path.grid[first]),
            jump_from_dim=int(dims[first - 1]),
            jump_to_dim=int(dims[first]),
            final_model_index=-1,
            final_dimension=-1,
            method="threshold",
        )
    raise ValueError(f"unknown jump detection method {method!r}")


def calibrate(
    collection: ModelCollection,
    fitted_risks,
    shape: PenaltyShape,
    grid,
    method: str = "max_jump",
    dim_threshold: int | None = None,
) -> CalibrationResult:
    """Full slope-heuristics calibration.

    Traces the multiplier path, detects the dimension jump at ``a_min_hat``,
    and selects by a fresh minimization at exactly ``2 * a_min_hat`` (no grid
    quantization of the final multiplier).
    """
    path = compute_path(collection, fitted_risks, shape, grid)
    jump = detect_jump(path, method=method, dim_threshold=dim_threshold)
    final = select(collection, fitted_risks, 2.0 * jump.a_min_hat * shape.values)
    return CalibrationResult(
        a_min_hat=jump.a_min_hat,
        jump_from_dim=jump.jump_from_dim,
        jump_to_dim=jump.jump_to_dim,
        final_model_index=final,
        final_dimension=int(collection.dimensions[final]),
        method=jump.method,
    )


def write_path_csv(path: SelectionPath, file, header_comment: str | None = None) -> None:
    """Path as CSV rows (A, selected_model_id, selected_dimension, criterion_min)."""
    writer = csv.writer(file, lineterminator="\n")
    if header_comment:
        file.write(f"# {header_comment}\n")
    writer.writerow(["A", "selected_model_id", "selected_dimension", "criterion_min"])
    crit_min = path.criterion_values[np.arange(len(path)), path.selected_index]
    for a, idx, dim, cmin in zip(path.grid, path.selected_index,
                                 path.selected_dimension, crit_min):
        writer.writerow([repr(float(a)), int(idx), int(dim), repr(float(cmin))])
