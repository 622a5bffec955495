"""Risk functionals for fitted partition models.

Everything here is exact algebra over one (model, sample, truth) triple: the
squared-error contrast, empirical risk, true excess risk under the design
density, and the full decomposition of the excess risk into bias, the two
halves of the ideal penalty (``p1``, ``p2``) and the centered cross term
``delta_bar``.  Integrals against the design density reuse the same per-cell
Gauss-Legendre rule as the projection, so the decomposition identity holds
to floating-point accuracy by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as _leg

from .models import (
    FittedFunction,
    ModelQuadrature,
    PartitionModel,
    _legendre_scale,
    fit_least_squares,
)

SUP_DEV_GRID = 4096


@dataclass(frozen=True, eq=False)
class Sample:
    """Design points in [0, 1] paired with responses.

    ``y_bound`` is optional; when set, responses are validated against it
    (the bounded-data assumption Ab').
    """

    x: np.ndarray
    y: np.ndarray
    y_bound: float | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
            raise ValueError("x and y must be 1-d vectors of equal length")
        if x.size == 0:
            raise ValueError("sample must be non-empty")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("design points must lie in [0, 1]")
        if self.y_bound is not None and np.any(np.abs(y) > self.y_bound):
            raise ValueError(
                f"|y| exceeds the declared bound {self.y_bound} (Ab')"
            )
        x = x.copy()
        y = y.copy()
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.size


@dataclass(frozen=True, eq=False)
class RiskBreakdown:
    """All risk functionals of one model on one sample.

    ``excess_risk = bias + p1`` and the decomposition
    ``excess_risk = empirical_risk + p1 + p2 - delta_bar - empirical_risk(s*)``
    hold as identities up to floating-point error.
    """

    empirical_risk: float
    bias: float
    p1: float
    p2: float
    delta_bar: float
    excess_risk: float
    ideal_penalty: float
    eps_n: float
    sup_dev: float
    k1_estimate: float

    def to_dict(self) -> dict:
        return {
            "empirical_risk": self.empirical_risk,
            "bias": self.bias,
            "p1": self.p1,
            "p2": self.p2,
            "delta_bar": self.delta_bar,
            "excess_risk": self.excess_risk,
            "ideal_penalty": self.ideal_penalty,
            "eps_n": self.eps_n,
            "sup_dev": self.sup_dev,
            "k1_estimate": self.k1_estimate,
        }


def contrast(fn: FittedFunction, x: float, y: float) -> float:
    """Squared-error contrast (y - s(x))^2 of a candidate at one point."""
    return float((y - fn.evaluate(x)) ** 2)


def empirical_risk(fn: FittedFunction, sample: Sample) -> float:
    """Mean squared-error contrast over the sample."""
    if sample.n == 0:
        raise ValueError("sample must be non-empty")
    return float(np.mean((sample.y - fn(sample.x)) ** 2))


def true_excess_risk(
    fn: FittedFunction, truth, quadrature: ModelQuadrature | None = None
) -> float:
    """Weighted squared distance to the true regression function.

    Equals the excess of the population risk of ``fn`` over the risk of the
    truth; computed by per-cell Gauss-Legendre quadrature.
    """
    quad = quadrature if quadrature is not None else ModelQuadrature(fn.model, truth)
    return quad.squared_error(fn)


def sup_deviation(fit: FittedFunction, other: FittedFunction) -> float:
    """Sup-norm distance between two members of the same model.

    Exact for histograms; for higher degrees it is a max over a dense grid
    per cell including both endpoints.
    """
    model = fit.model
    if other.model is not model and not np.array_equal(
        other.model.breakpoints, model.breakpoints
    ):
        raise ValueError("functions live on different models")
    diff = fit.coefficients - other.coefficients
    if model.degree == 0:
        return float(np.max(np.abs(diff[:, 0]) / np.sqrt(model.widths)))
    points = max(16, SUP_DEV_GRID // model.n_cells + 1)
    u = np.linspace(-1.0, 1.0, points)
    vander = _leg.legvander(u, model.degree) * _legendre_scale(model.degree)
    scaled = diff / np.sqrt(model.widths)[:, None]
    values = scaled @ vander.T
    return float(np.max(np.abs(values)))


def _epsilon_n(n: int, dimension: int, sup_dev: float) -> float:
    # Normalized deviation diagnostic; the leading proof constant is fixed
    # to 1, so only relative comparisons are meaningful.
    log_n = math.log(n)
    return max(
        (log_n / dimension) ** 0.25,
        (dimension * log_n / n) ** 0.25,
        math.sqrt(sup_dev),
    )


def risk_breakdown(
    model: PartitionModel,
    sample: Sample,
    truth,
    quadrature: ModelQuadrature | None = None,
) -> RiskBreakdown:
    """Fit, project, and decompose the excess risk of one model.

    ``p1`` is the excess of the estimator over the projection under the
    design density, ``p2`` the empirical excess of the projection over the
    estimator; their sum minus ``delta_bar`` is the ideal penalty shifted by
    the empirical risk of the truth.
    """
    if model.dimension > sample.n:
        raise ValueError(
            f"dimension bound violated (P2): D={model.dimension} exceeds n={sample.n}"
        )
    quad = quadrature if quadrature is not None else ModelQuadrature(model, truth)
    fit = fit_least_squares(model, sample)
    proj = quad.projection()

    bias = quad.squared_error(proj)
    excess = quad.squared_error(fit)
    p1 = excess - bias

    er_fit = empirical_risk(fit, sample)
    er_proj = empirical_risk(proj, sample)
    p2 = er_proj - er_fit

    er_star = float(np.mean((sample.y - truth.s_star(sample.x)) ** 2))
    delta_bar = er_proj - er_star - bias

    ideal = excess + quad.noise_second_moment() - er_fit
    dev = sup_deviation(fit, proj)
    p2_pos = max(p2, 0.0)
    k1 = 2.0 * math.sqrt(sample.n * p2_pos / model.dimension)
    return RiskBreakdown(
        empirical_risk=er_fit,
        bias=bias,
        p1=p1,
        p2=p2,
        delta_bar=delta_bar,
        excess_risk=excess,
        ideal_penalty=ideal,
        eps_n=_epsilon_n(sample.n, model.dimension, dev),
        sup_dev=dev,
        k1_estimate=k1,
    )


def diagnostics(
    model: PartitionModel,
    sample: Sample,
    truth,
    quadrature: ModelQuadrature | None = None,
):
    """(eps_n, sup_dev, k1_estimate) for one model on one sample."""
    breakdown = risk_breakdown(model, sample, truth, quadrature)
    return breakdown.eps_n, breakdown.sup_dev, breakdown.k1_estimate
