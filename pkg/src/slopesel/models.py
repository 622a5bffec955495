"""Partition models on [0, 1].

A model is a partition of the unit interval into half-open cells together
with a uniform polynomial degree per cell.  Each cell carries an orthonormal
basis of shifted-scaled Legendre polynomials under the Lebesgue measure of
the cell, so a fitted function is a coefficient matrix of shape
``(n_cells, degree + 1)``.

The module provides the model collection builder, exact per-cell least
squares fitting of samples, density-weighted L2 projection of a known
regression function, and a report of structural diagnostics for a collection
(lower regularity of partitions, localized-basis constants, dimension and
richness flags, density bounds).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from numpy.polynomial import legendre as _leg

if TYPE_CHECKING:
    from .risk import Sample

QUADRATURE_ORDER = 32
RANK_RTOL = 1e-12
SUP_GRID = 4096

_U64_MASK = (1 << 64) - 1


class SingularGramError(ValueError):
    """A per-cell Gram matrix is numerically singular.

    This happens when the design density puts (almost) no mass on a cell,
    so the weighted projection onto that cell is not identifiable.
    """


def _legendre_scale(degree: int) -> np.ndarray:
    # sqrt(2k+1) turns the classical Legendre family into an orthonormal one
    # under the normalized measure dt/ (b-a) after the affine cell map.
    return np.sqrt(2.0 * np.arange(degree + 1) + 1.0)


@dataclass(frozen=True, eq=False)
class PartitionModel:
    """A finite-dimensional model: partition of [0, 1] plus a degree.

    Cells are half-open ``[b_i, b_{i+1})``; the final cell also contains 1.
    The linear dimension is ``n_cells * (degree + 1)``.
    """

    breakpoints: np.ndarray
    degree: int

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("breakpoints must be a 1-d vector with at least 2 entries")
        if not np.all(np.diff(b) > 0):
            raise ValueError("breakpoints must be strictly increasing")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("breakpoints must start at 0.0 and end at 1.0")
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError("degree must be a non-negative integer")
        b = b.copy()
        b.flags.writeable = False
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "degree", int(self.degree))

    @property
    def n_cells(self) -> int:
        return self.breakpoints.size - 1

    @property
    def dimension(self) -> int:
        return self.n_cells * (self.degree + 1)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    def cell_index(self, x) -> np.ndarray:
        """Map points to cell indices; x == 1 belongs to the last cell."""
        x = np.asarray(x, dtype=float)
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("points must lie in [0, 1]")
        idx = np.searchsorted(self.breakpoints, x, side="right") - 1
        return np.minimum(idx, self.n_cells - 1)

    def basis_rows(self, x):
        """Orthonormal basis values at points.

        Returns ``(idx, rows)`` where ``rows[i, k]`` is the k-th local basis
        function of cell ``idx[i]`` evaluated at ``x[i]``.
        """
        x = np.asarray(x, dtype=float)
        idx = self.cell_index(x)
        a = self.breakpoints[idx]
        h = self.widths[idx]
        u = 2.0 * (x - a) / h - 1.0
        rows = _leg.legvander(u, self.degree) * _legendre_scale(self.degree)
        rows /= np.sqrt(h)[:, None]
        return idx, rows

    def local_basis(self, cell_index: int) -> "LocalBasis":
        if not 0 <= cell_index < self.n_cells:
            raise IndexError(f"cell index {cell_index} out of range")
        return LocalBasis(
            cell_index=cell_index,
            lower=float(self.breakpoints[cell_index]),
            upper=float(self.breakpoints[cell_index + 1]),
            degree=self.degree,
            model_dimension=self.dimension,
        )

    def localized_basis_constant(self) -> float:
        """Measured localization factor of the basis.

        Smallest c such that every coefficient vector beta satisfies
        ``sup |sum_k beta_k phi_k| <= c * sqrt(D) * max_k |beta_k|``, measured
        on a dense per-cell grid (the maximizing beta is a sign pattern, so
        the sup equals ``max_x sum_k |phi_k(x)|``).
        """
        worst = 0.0
        for c in range(self.n_cells):
            worst = max(worst, self.local_basis(c)._abs_sum_sup())
        return worst / math.sqrt(self.dimension)


@dataclass(frozen=True, eq=False)
class LocalBasis:
    """The degree+1 orthonormal Legendre functions of one cell."""

    cell_index: int
    lower: float
    upper: float
    degree: int
    model_dimension: int

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def functions(self) -> tuple:
        """Callable basis functions, orthonormal under Lebesgue on the cell."""
        scale = _legendre_scale(self.degree) / math.sqrt(self.width)
        out = []
        for k in range(self.degree + 1):
            coef = np.zeros(k + 1)
            coef[k] = scale[k]
            out.append(_leg.Legendre(coef, domain=[self.lower, self.upper]))
        return tuple(out)

    def _abs_sum_sup(self, grid: int = 512) -> float:
        u = np.linspace(-1.0, 1.0, grid)
        vander = _leg.legvander(u, self.degree) * _legendre_scale(self.degree)
        return float(np.max(np.sum(np.abs(vander), axis=1))) / math.sqrt(self.width)

    @property
    def sup_norm_constant(self) -> float:
        """Measured per-cell contribution to the model localization factor."""
        return self._abs_sum_sup() / math.sqrt(self.model_dimension)


@dataclass(frozen=True, eq=False)
class FittedFunction:
    """Piecewise polynomial given by local orthonormal-basis coefficients."""

    model: PartitionModel
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        expected = (self.model.n_cells, self.model.degree + 1)
        if c.shape != expected:
            raise ValueError(f"coefficients must have shape {expected}, got {c.shape}")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "coefficients", c)

    def __call__(self, x) -> np.ndarray:
        idx, rows = self.model.basis_rows(x)
        return np.einsum("ij,ij->i", rows, self.coefficients[idx])

    def evaluate(self, x: float) -> float:
        """Value at a single point of [0, 1]; x == 1 uses the last cell."""
        return float(self(np.asarray([x], dtype=float))[0])

    def cell_values(self) -> np.ndarray:
        """Per-cell constant values; only defined for degree 0."""
        if self.model.degree != 0:
            raise ValueError("cell_values is only defined for histograms")
        return self.coefficients[:, 0] / np.sqrt(self.model.widths)

    def cell_polynomials(self) -> np.ndarray:
        """Monomial coefficients in the global variable x, one row per cell."""
        r = self.model.degree
        scale = _legendre_scale(r)
        out = np.zeros((self.model.n_cells, r + 1))
        for c in range(self.model.n_cells):
            a, b = self.model.breakpoints[c], self.model.breakpoints[c + 1]
            coef = self.coefficients[c] * scale / math.sqrt(b - a)
            series = _leg.Legendre(coef, domain=[a, b]).convert(kind=np.polynomial.Polynomial)
            out[c, : series.coef.size] = series.coef
        return out


def zero_function(model: PartitionModel) -> FittedFunction:
    return FittedFunction(model, np.zeros((model.n_cells, model.degree + 1)))


@dataclass(frozen=True, eq=False)
class CollectionMetadata:
    """Counts and flags used by the richness and complexity diagnostics."""

    n: int
    cardinality: int
    max_dimension: int
    has_mid_dimension_model: bool
    has_high_dimension_model: bool
    c_rich: float
    a_rich: float


@dataclass(frozen=True, eq=False)
class ModelCollection:
    models: tuple
    metadata: CollectionMetadata

    def __len__(self) -> int:
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    def __getitem__(self, i: int) -> PartitionModel:
        return self.models[i]

    @property
    def dimensions(self) -> np.ndarray:
        return np.asarray([m.dimension for m in self.models], dtype=int)


def _richness_flags(dimensions, n: int, c_rich: float, a_rich: float):
    dims = np.asarray(dimensions, dtype=float)
    root = math.sqrt(n)
    mid = bool(np.any((dims >= root) & (dims <= c_rich * root)))
    high = bool(np.any(dims >= a_rich * n / math.log(n) ** 2))
    return mid, high


def build_regular_collection(
    n: int,
    degrees: Iterable[int],
    dyadic_max: int,
    *,
    c_rich: float = 2.0,
    a_rich: float = 1.0,
) -> ModelCollection:
    """Regular dyadic partitions crossed with polynomial degrees.

    Produces the models with ``2**k`` equal cells for ``k = 0 .. dyadic_max``
    and every requested degree, sorted by dimension.  Rejects settings whose
    largest dimension exceeds ``n``.
    """
    if n < 4:
        raise ValueError("n must be at least 4")
    degs = sorted({int(d) for d in degrees})
    if not degs or degs[0] < 0:
        raise ValueError("degrees must be a non-empty set of non-negative integers")
    if dyadic_max < 0:
        raise ValueError("dyadic_max must be non-negative")
    max_dim = 2**dyadic_max * (max(degs) + 1)
    if max_dim > n:
        raise ValueError(
            f"dimension bound violated (P2): max dimension {max_dim} exceeds n={n}"
        )
    models = [
        PartitionModel(np.linspace(0.0, 1.0, 2**k + 1), r)
        for r in degs
        for k in range(dyadic_max + 1)
    ]
    models.sort(key=lambda m: (m.dimension, m.degree))
    dims = [m.dimension for m in models]
    mid, high = _richness_flags(dims, n, c_rich, a_rich)
    meta = CollectionMetadata(
        n=n,
        cardinality=len(models),
        max_dimension=max(dims),
        has_mid_dimension_model=mid,
        has_high_dimension_model=high,
        c_rich=c_rich,
        a_rich=a_rich,
    )
    return ModelCollection(tuple(models), meta)


class ModelQuadrature:
    """Gauss-Legendre nodes for density-weighted integrals over one model.

    Cells are subdivided at the truth's non-smooth knots so every segment
    integrand is smooth.  All arrays are laid out as (segment, node); the
    rule is exact for polynomial integrands up to degree ``2 * order - 1``
    per segment, so projections of in-model polynomial targets are exact.
    """

    def __init__(self, model: PartitionModel, truth, order: int = QUADRATURE_ORDER):
        self.model = model
        self.truth = truth
        breaks = model.breakpoints
        knots = sorted(k for k in getattr(truth, "knots", ()) if 0.0 < k < 1.0)

        seg_lo, seg_hi, seg_cell = [], [], []
        for c in range(model.n_cells):
            a, b = breaks[c], breaks[c + 1]
            inner = [k for k in knots if a < k < b]
            edges = [a, *inner, b]
            for lo, hi in zip(edges[:-1], edges[1:]):
                seg_lo.append(lo)
                seg_hi.append(hi)
                seg_cell.append(c)
        lo = np.asarray(seg_lo)[:, None]
        hi = np.asarray(seg_hi)[:, None]
        self.cell = np.asarray(seg_cell, dtype=int)

        t, w = _leg.leggauss(order)
        self.x = 0.5 * (lo + hi) + 0.5 * (hi - lo) * t
        self.w = 0.5 * (hi - lo) * w
        self.fx = np.asarray(truth.density(self.x), dtype=float)
        self.wf = self.w * self.fx
        self.target = np.asarray(truth.s_star(self.x), dtype=float)

        cell_a = breaks[:-1][self.cell][:, None]
        h = model.widths[self.cell][:, None]
        u = 2.0 * (self.x - cell_a) / h - 1.0
        vander = _leg.legvander(u.reshape(-1), model.degree)
        vander = vander.reshape(self.x.shape + (model.degree + 1,))
        self.basis = vander * _legendre_scale(model.degree) / np.sqrt(h)[..., None]

        self._projection = None
        self._noise_moment = None

    def integrate(self, values) -> float:
        """Integral of ``values`` (given at the nodes) against f(x) dx."""
        return float(np.sum(self.wf * values))

    def cell_masses(self) -> np.ndarray:
        """Design-measure mass of each cell."""
        return np.bincount(
            self.cell, weights=self.wf.sum(axis=1), minlength=self.model.n_cells
        )

    def node_values(self, fn: FittedFunction) -> np.ndarray:
        if fn.model is not self.model and fn.model.dimension != self.model.dimension:
            raise ValueError("fitted function does not belong to this quadrature's model")
        return np.einsum("sqk,sk->sq", self.basis, fn.coefficients[self.cell])

    def squared_error(self, fn: FittedFunction) -> float:
        """Weighted squared distance of a member of the model to the target."""
        return self.integrate((self.node_values(fn) - self.target) ** 2)

    def noise_second_moment(self) -> float:
        if self._noise_moment is None:
            sig = np.asarray(self.truth.sigma(self.x), dtype=float)
            self._noise_moment = self.integrate(sig**2)
        return self._noise_moment

    def projection(self) -> FittedFunction:
        """Weighted L2 projection of the target onto the model."""
        if self._projection is not None:
            return self._projection
        k = self.model.degree + 1
        m = self.model.n_cells
        gram_parts = np.einsum("sqk,sq,sql->skl", self.basis, self.wf, self.basis)
        rhs_parts = np.einsum("sqk,sq->sk", self.basis, self.wf * self.target)
        gram = np.zeros((m, k, k))
        rhs = np.zeros((m, k))
        np.add.at(gram, self.cell, gram_parts)
        np.add.at(rhs, self.cell, rhs_parts)
        coeffs = np.empty((m, k))
        for c in range(m):
            eig = np.linalg.eigvalsh(gram[c])
            if eig[-1] <= 0.0 or eig[0] <= RANK_RTOL * eig[-1]:
                raise SingularGramError(
                    f"Gram matrix of cell {c} is singular; the design density "
                    "carries no usable mass there"
                )
            coeffs[c] = np.linalg.solve(gram[c], rhs[c])
        self._projection = FittedFunction(self.model, coeffs)
        return self._projection


def fit_least_squares(model: PartitionModel, sample: "Sample") -> FittedFunction:
    """Empirical least-squares fit, solved independently per cell.

    Cells holding fewer than ``degree + 1`` points (empty cells included)
    receive the zero function; rank-deficient cells fall back to the
    minimum-norm solution.
    """
    n = sample.n
    if n < 1:
        raise ValueError("sample must be non-empty")
    if model.dimension > n:
        raise ValueError(
            f"dimension bound violated (P2): D={model.dimension} exceeds n={n}"
        )
    k = model.degree + 1
    m = model.n_cells
    coeffs = np.zeros((m, k))
    if model.degree == 0:
        idx = model.cell_index(sample.x)
        counts = np.bincount(idx, minlength=m)
        sums = np.bincount(idx, weights=sample.y, minlength=m)
        filled = counts > 0
        means = np.zeros(m)
        means[filled] = sums[filled] / counts[filled]
        coeffs[:, 0] = means * np.sqrt(model.widths)
        return FittedFunction(model, coeffs)

    idx, rows = model.basis_rows(sample.x)
    order = np.argsort(idx, kind="stable")
    idx_sorted = idx[order]
    rows_sorted = rows[order]
    y_sorted = sample.y[order]
    bounds = np.searchsorted(idx_sorted, np.arange(m + 1))
    for c in range(m):
        lo, hi = bounds[c], bounds[c + 1]
        if hi - lo < k:
            continue
        sol, *_ = np.linalg.lstsq(rows_sorted[lo:hi], y_sorted[lo:hi], rcond=RANK_RTOL)
        coeffs[c] = sol
    return FittedFunction(model, coeffs)


def project_L2(model: PartitionModel, truth, quadrature: ModelQuadrature | None = None) -> FittedFunction:
    """Projection of the true regression function onto the model in L2(f dx)."""
    quad = quadrature if quadrature is not None else ModelQuadrature(model, truth)
    return quad.projection()


@dataclass(frozen=True, eq=False)
class ModelAssumptionRow:
    model_index: int
    n_cells: int
    degree: int
    dimension: int
    lower_regularity: float
    basis_constant: float
    dimension_ok: bool
    dimension_ratio: float

    def to_dict(self) -> dict:
        return {
            "model_index": self.model_index,
            "n_cells": self.n_cells,
            "degree": self.degree,
            "dimension": self.dimension,
            "lower_regularity": self.lower_regularity,
            "basis_constant": self.basis_constant,
            "dimension_ok": self.dimension_ok,
            "dimension_ratio": self.dimension_ratio,
        }


@dataclass(frozen=True, eq=False)
class AssumptionReport:
    """Report-only structural diagnostics for a collection and a truth."""

    n: int
    cardinality: int
    complexity_ok: bool
    c_m: float
    alpha_m: float
    has_mid_dimension_model: bool
    has_high_dimension_model: bool
    c_rich: float
    a_rich: float
    density_min: float
    density_max: float
    sigma_min: float
    data_bound: float
    rows: tuple

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "cardinality": self.cardinality,
            "complexity_ok": self.complexity_ok,
            "c_m": self.c_m,
            "alpha_m": self.alpha_m,
            "has_mid_dimension_model": self.has_mid_dimension_model,
            "has_high_dimension_model": self.has_high_dimension_model,
            "c_rich": self.c_rich,
            "a_rich": self.a_rich,
            "density_min": self.density_min,
            "density_max": self.density_max,
            "sigma_min": self.sigma_min,
            "data_bound": self.data_bound,
            "models": [r.to_dict() for r in self.rows],
        }


def check_assumptions(
    collection: ModelCollection,
    truth,
    n: int,
    *,
    c_m: float = 1.0,
    alpha_m: float = 1.0,
) -> AssumptionReport:
    """Measure, per model, the structural quantities the theory relies on.

    Everything is report-only: lower-regularity statistic
    ``sqrt(n_cells * min_I mass(I))``, the measured localized-basis constant,
    dimension flags against n, richness flags, and density bounds estimated
    on a grid.
    """
    log_n_sq = math.log(n) ** 2
    rows = []
    for i, model in enumerate(collection.models):
        quad = ModelQuadrature(model, truth)
        masses = quad.cell_masses()
        lower_reg = math.sqrt(model.n_cells * float(masses.min()))
        rows.append(
            ModelAssumptionRow(
                model_index=i,
                n_cells=model.n_cells,
                degree=model.degree,
                dimension=model.dimension,
                lower_regularity=lower_reg,
                basis_constant=model.localized_basis_constant(),
                dimension_ok=1 <= model.dimension <= n,
                dimension_ratio=model.dimension * log_n_sq / n,
            )
        )
    meta = collection.metadata
    mid, high = _richness_flags(collection.dimensions, n, meta.c_rich, meta.a_rich)
    grid = np.linspace(0.0, 1.0, SUP_GRID + 1)
    density = np.asarray(truth.density(grid), dtype=float)
    sigma_min = getattr(truth, "sigma_min", None)
    if sigma_min is None:
        sigma_min = float(np.min(truth.sigma(grid)))
    data_bound = getattr(truth, "data_bound", float("nan"))
    return AssumptionReport(
        n=n,
        cardinality=len(collection),
        complexity_ok=len(collection) <= c_m * n**alpha_m,
        c_m=c_m,
        alpha_m=alpha_m,
        has_mid_dimension_model=mid,
        has_high_dimension_model=high,
        c_rich=meta.c_rich,
        a_rich=meta.a_rich,
        density_min=float(density.min()),
        density_max=float(density.max()),
        sigma_min=float(sigma_min),
        data_bound=float(data_bound),
        rows=tuple(rows),
    )
