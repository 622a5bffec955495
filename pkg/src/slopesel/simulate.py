"""Synthetic heteroscedastic regression experiments.

The data-generating truth is described by registry names plus parameters so
that specs serialize to JSON and pickle cleanly.  Sampling is driven by a
counter-based generator keyed by ``seed XOR replicate``, which makes
replicates independent tasks: parallel and serial runs produce bit-identical
results, and aggregation is a deterministic fold in replicate order.

Experiments cover the three regimes of interest: penalties below the minimal
level (dimension blowup), penalties at twice the minimal level (near-oracle
selection), and the full data-driven calibration pipeline built on the
dimension jump.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import ndtr, ndtri

from .models import (
    ModelCollection,
    ModelQuadrature,
    fit_least_squares,
    _richness_flags,
)
from .risk import Sample, empirical_risk, sup_deviation
from .selection import (
    NoJumpError,
    PenaltyShape,
    SelectionPath,
    calibrate,
    compute_path,
    default_grid,
    detect_jump,
    linear_dimension_shape,
    select,
)

SCHEMA_VERSION = 1

_U64 = (1 << 64) - 1
_MINPEN_STREAM = 0x9E3779B97F4A7C15  # golden-ratio offset separating phases
_TWO_PI = 2.0 * math.pi
_SIGMA_FLOOR = 1e-6
_GRID_POINTS = 4097

S_STAR_NAMES = ("polynomial", "sine", "holder_cusp", "piecewise_smooth")
SIGMA_NAMES = ("constant", "affine", "sine_modulated")
DENSITY_NAMES = ("uniform", "affine")
NOISE_NAMES = ("uniform", "rademacher", "gaussian_truncated")


def _normalize(name: str) -> str:
    return name.replace("-", "_").strip().lower()


def _polyval(coefficients, x):
    return np.polynomial.polynomial.polyval(x, np.asarray(coefficients, dtype=float))


def _poly_sup(coefficients, lo: float, hi: float) -> float:
    """Exact sup of |polynomial| on [lo, hi] via critical points."""
    p = np.polynomial.Polynomial(np.asarray(coefficients, dtype=float))
    points = [lo, hi]
    if p.degree() >= 2:
        crit = p.deriv().roots()
        crit = crit[np.isreal(crit)].real if crit.size else crit.real
        points.extend(float(c) for c in crit if lo < c < hi)
    return float(np.max(np.abs(p(np.asarray(points, dtype=float)))))


@dataclass(frozen=True, eq=False)
class RegressionSpec:
    """Data-generating truth: regression function, noise level, design, noise law.

    The noise laws all have mean zero and unit variance and bounded support,
    so the generated responses satisfy a finite bound ``data_bound``.  The
    noise level must stay above a strictly positive floor (An) and the design
    density must be bounded away from zero and infinity (Ad_leb).
    """

    s_star_name: str
    s_star_params: Mapping = field(default_factory=dict)
    sigma_name: str = "constant"
    sigma_params: Mapping = field(default_factory=lambda: {"value": 1.0})
    density_name: str = "uniform"
    density_params: Mapping = field(default_factory=dict)
    noise_name: str = "uniform"
    noise_params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "s_star_name", _normalize(self.s_star_name))
        object.__setattr__(self, "sigma_name", _normalize(self.sigma_name))
        object.__setattr__(self, "density_name", _normalize(self.density_name))
        object.__setattr__(self, "noise_name", _normalize(self.noise_name))
        if self.s_star_name not in S_STAR_NAMES:
            raise ValueError(f"unknown regression function {self.s_star_name!r}; expected {S_STAR_NAMES}")
        if self.sigma_name not in SIGMA_NAMES:
            raise ValueError(f"unknown noise level {self.sigma_name!r}; expected {SIGMA_NAMES}")
        if self.density_name not in DENSITY_NAMES:
            raise ValueError(f"unknown design density {self.density_name!r}; expected {DENSITY_NAMES}")
        if self.noise_name not in NOISE_NAMES:
            raise ValueError(f"unknown noise law {self.noise_name!r}; expected {NOISE_NAMES}")
        if self.sigma_min < _SIGMA_FLOOR:
            raise ValueError(
                "noise level must be bounded below by a positive constant (An): "
                f"min sigma is {self.sigma_min}, required >= {_SIGMA_FLOOR}"
            )
        if self.density_name == "affine":
            slope = float(self.density_params.get("slope", 0.0))
            if abs(slope) > 1.9:
                raise ValueError(
                    "design density must stay bounded away from 0 (Ad_leb): |slope| <= 1.9"
                )
        if self.s_star_name == "holder_cusp":
            alpha = float(self.s_star_params.get("exponent", 0.5))
            if not 0.0 < alpha <= 1.0:
                raise ValueError("cusp exponent must lie in (0, 1]")
        if self.noise_name == "gaussian_truncated":
            t = float(self.noise_params.get("truncation", 3.0))
            if t <= 0.0:
                raise ValueError("truncation must be positive")

    @classmethod
    def from_config(cls, config: Mapping) -> "RegressionSpec":
        def block(key, default_name=None):
            raw = config.get(key)
            if raw is None:
                if default_name is None:
                    raise ValueError(f"truth config is missing {key!r}")
                return default_name, {}
            return raw["name"], dict(raw.get("params", {}))

        s_name, s_params = block("s_star")
        g_name, g_params = block("sigma")
        f_name, f_params = block("density", "uniform")
        e_name, e_params = block("noise", "uniform")
        return cls(s_name, s_params, g_name, g_params, f_name, f_params, e_name, e_params)

    def to_config(self) -> dict:
        return {
            "s_star": {"name": self.s_star_name, "params": dict(self.s_star_params)},
            "sigma": {"name": self.sigma_name, "params": dict(self.sigma_params)},
            "density": {"name": self.density_name, "params": dict(self.density_params)},
            "noise": {"name": self.noise_name, "params": dict(self.noise_params)},
        }

    # regression function -------------------------------------------------
    def s_star(self, x):
        x = np.asarray(x, dtype=float)
        p = self.s_star_params
        if self.s_star_name == "polynomial":
            return _polyval(p.get("coefficients", (0.0,)), x)
        if self.s_star_name == "sine":
            a = float(p.get("amplitude", 1.0))
            k = float(p.get("frequency", 1.0))
            return a * np.sin(_TWO_PI * k * x)
        if self.s_star_name == "holder_cusp":
            a = float(p.get("amplitude", 1.0))
            alpha = float(p.get("exponent", 0.5))
            return a * np.abs(x - 0.5) ** alpha
        b = float(p.get("break_point", 0.5))
        left = _polyval(p.get("left_coefficients", (0.0,)), x)
        right = _polyval(p.get("right_coefficients", (0.0,)), x)
        return np.where(x < b, left, right)

    @property
    def knots(self) -> tuple:
        """Interior points where the regression function is not smooth."""
        if self.s_star_name == "holder_cusp":
            return (0.5,)
        if self.s_star_name == "piecewise_smooth":
            return (float(self.s_star_params.get("break_point", 0.5)),)
        return ()

    @property
    def s_star_sup(self) -> float:
        p = self.s_star_params
        if self.s_star_name == "sine":
            return abs(float(p.get("amplitude", 1.0)))
        if self.s_star_name == "holder_cusp":
            a = abs(float(p.get("amplitude", 1.0)))
            alpha = float(p.get("exponent", 0.5))
            return a * 0.5**alpha
        if self.s_star_name == "polynomial":
            return _poly_sup(p.get("coefficients", (0.0,)), 0.0, 1.0)
        b = float(p.get("break_point", 0.5))
        return max(
            _poly_sup(p.get("left_coefficients", (0.0,)), 0.0, b),
            _poly_sup(p.get("right_coefficients", (0.0,)), b, 1.0),
        )

    # noise level ----------------------------------------------------------
    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        p = self.sigma_params
        if self.sigma_name == "constant":
            return np.full_like(x, float(p.get("value", 1.0)))
        if self.sigma_name == "affine":
            return float(p.get("intercept", 1.0)) + float(p.get("slope", 0.0)) * x
        return float(p.get("base", 1.0)) + float(p.get("amplitude", 0.0)) * np.sin(_TWO_PI * x)

    @property
    def sigma_min(self) -> float:
        p = self.sigma_params
        if self.sigma_name == "constant":
            return float(p.get("value", 1.0))
        if self.sigma_name == "affine":
            a, b = float(p.get("intercept", 1.0)), float(p.get("slope", 0.0))
            return min(a, a + b)
        return float(p.get("base", 1.0)) - abs(float(p.get("amplitude", 0.0)))

    @property
    def sigma_sup(self) -> float:
        p = self.sigma_params
        if self.sigma_name == "constant":
            return float(p.get("value", 1.0))
        if self.sigma_name == "affine":
            a, b = float(p.get("intercept", 1.0)), float(p.get("slope", 0.0))
            return max(a, a + b)
        return float(p.get("base", 1.0)) + abs(float(p.get("amplitude", 0.0)))

    # design density --------------------------------------------------------
    def density(self, x):
        x = np.asarray(x, dtype=float)
        if self.density_name == "uniform":
            return np.ones_like(x)
        slope = float(self.density_params.get("slope", 0.0))
        return 1.0 + slope * (x - 0.5)

    def density_icdf(self, u):
        """Closed-form inverse CDF of the design density."""
        u = np.asarray(u, dtype=float)
        if self.density_name == "uniform":
            return u
        c = float(self.density_params.get("slope", 0.0))
        if c == 0.0:
            return u
        # CDF is (c/2) x^2 + (1 - c/2) x; invert the quadratic, stable root.
        a = 0.5 * c
        b = 1.0 - 0.5 * c
        return (-b + np.sqrt(b * b + 4.0 * a * u)) / (2.0 * a)

    @property
    def density_bounds(self) -> tuple:
        if self.density_name == "uniform":
            return 1.0, 1.0
        c = abs(float(self.density_params.get("slope", 0.0)))
        return 1.0 - 0.5 * c, 1.0 + 0.5 * c

    # noise law --------------------------------------------------------------
    def noise(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Mean-zero unit-variance draws from the configured law."""
        if self.noise_name == "uniform":
            return math.sqrt(3.0) * (2.0 * rng.random(size) - 1.0)
        if self.noise_name == "rademacher":
            return rng.integers(0, 2, size).astype(float) * 2.0 - 1.0
        t = float(self.noise_params.get("truncation", 3.0))
        # Standard normal conditioned on |z| <= t, rescaled to unit variance.
        phi_t = ndtr(t)
        u = 1.0 - phi_t + rng.random(size) * (2.0 * phi_t - 1.0)
        z = ndtri(u)
        pdf_t = math.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
        variance = 1.0 - 2.0 * t * pdf_t / (2.0 * phi_t - 1.0)
        return z / math.sqrt(variance)

    @property
    def noise_bound(self) -> float:
        if self.noise_name == "uniform":
            return math.sqrt(3.0)
        if self.noise_name == "rademacher":
            return 1.0
        t = float(self.noise_params.get("truncation", 3.0))
        phi_t = ndtr(t)
        pdf_t = math.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
        variance = 1.0 - 2.0 * t * pdf_t / (2.0 * phi_t - 1.0)
        return t / math.sqrt(variance)

    @property
    def data_bound(self) -> float:
        """Numerical bound A with |Y| <= A (Ab')."""
        return self.s_star_sup + self.sigma_sup * self.noise_bound


def replicate_seed(seed: int, replicate: int) -> int:
    return (int(seed) ^ int(replicate)) & _U64


def min_penalty_seed(seed: int) -> int:
    return (int(seed) ^ _MINPEN_STREAM) & _U64


def generate_sample(spec: RegressionSpec, n: int, seed: int) -> Sample:
    """Draw n observations Y = s*(X) + sigma(X) eps, deterministically.

    X comes from the design density by inverse-CDF, eps from the configured
    unit-variance law; the generator is counter-based so the draw depends
    only on (spec, n, seed).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    key = np.array([int(seed) & _U64, 0], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    x = spec.density_icdf(rng.random(n))
    eps = spec.noise(rng, n)
    y = spec.s_star(x) + spec.sigma(x) * eps
    return Sample(x=x, y=y, y_bound=spec.data_bound * (1.0 + 1e-12))


@dataclass(frozen=True, eq=False)
class ReplicateBatch:
    """Per-replicate, per-model summaries of one simulated campaign."""

    emp_risk: np.ndarray   # (replicates, models) empirical risk of the fit
    p2: np.ndarray         # empirical excess of projection over fit
    excess: np.ndarray     # true excess risk of the fit
    sup_dev: np.ndarray    # sup-norm distance fit vs projection

    @property
    def replicates(self) -> int:
        return self.emp_risk.shape[0]


def _simulate_chunk(args) -> tuple:
    spec, collection, n, start, stop, seed = args
    quads = [ModelQuadrature(m, spec) for m in collection.models]
    projections = [q.projection() for q in quads]
    m = len(collection)
    count = stop - start
    emp = np.empty((count, m))
    p2 = np.empty((count, m))
    excess = np.empty((count, m))
    dev = np.empty((count, m))
    for i, r in enumerate(range(start, stop)):
        sample = generate_sample(spec, n, replicate_seed(seed, r))
        for j, model in enumerate(collection.models):
            fit = fit_least_squares(model, sample)
            er_fit = empirical_risk(fit, sample)
            er_proj = empirical_risk(projections[j], sample)
            emp[i, j] = er_fit
            p2[i, j] = er_proj - er_fit
            excess[i, j] = quads[j].squared_error(fit)
            dev[i, j] = sup_deviation(fit, projections[j])
    return emp, p2, excess, dev


def simulate_batch(
    spec: RegressionSpec,
    collection: ModelCollection,
    n: int,
    replicates: int,
    seed: int,
    threads: int = 1,
) -> ReplicateBatch:
    """Fit every model on every replicate sample.

    Replicates are independent; with ``threads > 1`` contiguous chunks run in
    worker processes and are folded back in replicate order, so the result is
    identical for every thread count.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    threads = max(1, int(threads))
    if threads == 1 or replicates == 1:
        parts = [_simulate_chunk((spec, collection, n, 0, replicates, seed))]
    else:
        threads = min(threads, replicates)
        edges = np.linspace(0, replicates, threads + 1).astype(int)
        payloads = [
            (spec, collection, n, int(lo), int(hi), seed)
            for lo, hi in zip(edges[:-1], edges[1:])
            if hi > lo
        ]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_simulate_chunk, payloads))
    emp, p2, excess, dev = (np.concatenate(arrs, axis=0) for arrs in zip(*parts))
    return ReplicateBatch(emp_risk=emp, p2=p2, excess=excess, sup_dev=dev)


def find_oracle(collection: ModelCollection, sample: Sample, truth) -> tuple:
    """Model minimizing the true excess risk; ties go to the smallest model."""
    best_index, best_risk, best_dim = -1, math.inf, -1
    for j, model in enumerate(collection.models):
        quad = ModelQuadrature(model, truth)
        risk = quad.squared_error(fit_least_squares(model, sample))
        if risk < best_risk or (risk == best_risk and model.dimension < best_dim):
            best_index, best_risk, best_dim = j, risk, model.dimension
    return best_index, best_risk


def _oracle_rows(collection: ModelCollection, excess: np.ndarray):
    dims = collection.dimensions
    perm = np.lexsort((np.arange(len(collection)), dims))
    rows = np.argmin(excess[:, perm], axis=1)
    idx = perm[rows]
    return idx, excess[np.arange(excess.shape[0]), idx]


def _ratio(selected_risk: float, oracle_risk: float) -> float:
    if selected_risk == oracle_risk:
        return 1.0
    if oracle_risk == 0.0:
        return math.inf
    return selected_risk / oracle_risk


def estimate_min_penalty(
    spec: RegressionSpec,
    collection: ModelCollection,
    n: int,
    replicates: int,
    seed: int,
    threads: int = 1,
) -> PenaltyShape:
    """Monte Carlo estimate of the minimal penalty shape.

    The minimal penalty of a model is the mean of its empirical excess risk;
    the estimate averages p2 over fresh samples and carries standard errors.
    Uses a seed stream distinct from the experiment replicates.
    """
    if replicates < 50:
        raise ValueError("minimal-penalty estimation needs at least 50 replicates")
    batch = simulate_batch(spec, collection, n, replicates, min_penalty_seed(seed), threads)
    means = batch.p2.mean(axis=0)
    se = batch.p2.std(axis=0, ddof=1) / math.sqrt(replicates)
    return PenaltyShape(np.maximum(means, 0.0), kind="oracle_mean_p2", stderr=se)


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    """Replicated experiment results plus deterministic aggregates."""

    kind: str
    n: int
    replicates: int
    seed: int
    model_cells: tuple
    model_degrees: tuple
    model_dimensions: tuple
    penalty_kind: str
    penalty_multiplier: float | None
    penalty_values: tuple
    penalty_stderr: tuple | None
    mean_p2: tuple
    se_p2: tuple
    per_replicate: tuple
    aggregates: dict
    path0: SelectionPath | None = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "n": self.n,
            "replicates": self.replicates,
            "seed": self.seed,
            "models": [
                {"model_id": i, "cells": c, "degree": d, "dimension": dim}
                for i, (c, d, dim) in enumerate(
                    zip(self.model_cells, self.model_degrees, self.model_dimensions)
                )
            ],
            "penalty": {
                "kind": self.penalty_kind,
                "multiplier": self.penalty_multiplier,
                "values": list(self.penalty_values),
                "stderr": list(self.penalty_stderr) if self.penalty_stderr else None,
            },
            "mean_p2": list(self.mean_p2),
            "se_p2": list(self.se_p2),
            "aggregates": self.aggregates,
            "per_replicate": list(self.per_replicate),
        }


def _model_table(collection: ModelCollection):
    cells = tuple(m.n_cells for m in collection.models)
    degrees = tuple(m.degree for m in collection.models)
    dims = tuple(int(d) for d in collection.dimensions)
    return cells, degrees, dims


def _require_richness(collection: ModelCollection, n: int) -> None:
    meta = collection.metadata
    mid, high = _richness_flags(collection.dimensions, n, meta.c_rich, meta.a_rich)
    if not (mid and high):
        raise ValueError(
            "collection fails the richness requirement (P3) for this n: "
            f"mid-dimension model present={mid}, high-dimension model present={high}"
        )


def default_dim_threshold(n: int) -> int:
    return max(1, int(n / (2.0 * math.log(n) ** 2)))


def _penalized_records(collection, batch, penalty_values):
    dims = collection.dimensions
    perm = np.lexsort((np.arange(len(collection)), dims))
    criterion = batch.emp_risk + penalty_values[None, :]
    rows = np.argmin(criterion[:, perm], axis=1)
    selected = perm[rows]
    oracle_idx, oracle_risk = _oracle_rows(collection, batch.excess)
    records = []
    for r in range(batch.replicates):
        s = int(selected[r])
        o = int(oracle_idx[r])
        srisk = float(batch.excess[r, s])
        orisk = float(oracle_risk[r])
        records.append(
            {
                "replicate": r,
                "selected_model_id": s,
                "selected_dimension": int(dims[s]),
                "selected_risk": srisk,
                "oracle_model_id": o,
                "oracle_dimension": int(dims[o]),
                "oracle_risk": orisk,
                "ratio": _ratio(srisk, orisk),
            }
        )
    return records


def _common_aggregates(records, dim_threshold):
    ratios = np.asarray([r["ratio"] for r in records], dtype=float)
    sel_dims = np.asarray([r["selected_dimension"] for r in records], dtype=float)
    orc_dims = np.asarray([r["oracle_dimension"] for r in records], dtype=float)
    return {
        "median_ratio": float(np.median(ratios)),
        "p90_ratio": float(np.quantile(ratios, 0.9)),
        "median_selected_dimension": float(np.median(sel_dims)),
        "median_oracle_dimension": float(np.median(orc_dims)),
        "frac_dim_ge_threshold": float(np.mean(sel_dims >= dim_threshold)),
        "dim_threshold": int(dim_threshold),
    }


def _resolve_min_penalty(spec, collection, n, seed, min_penalty, min_penalty_replicates, threads):
    if min_penalty is not None:
        return min_penalty
    return estimate_min_penalty(spec, collection, n, min_penalty_replicates, seed, threads)


def run_theorem1_experiment(
    spec: RegressionSpec,
    collection: ModelCollection,
    n: int,
    replicates: int,
    c_under: float,
    seed: int,
    *,
    min_penalty: PenaltyShape | None = None,
    min_penalty_replicates: int = 300,
    dim_threshold: int | None = None,
    threads: int = 1,
) -> ExperimentReport:
    """Underpenalized regime: pen = c_under * estimated minimal penalty.

    With c_under < 1 the selected dimension should blow up towards the top of
    the collection and the excess risk should be far above the oracle's.
    """
    if not 0.0 <= c_under < 1.0:
        raise ValueError("c_under must lie in [0, 1)")
    _require_richness(collection, n)
    shape = _resolve_min_penalty(spec, collection, n, seed,
                                 min_penalty, min_penalty_replicates, threads)
    batch = simulate_batch(spec, collection, n, replicates, seed, threads)
    records = _penalized_records(collection, batch, c_under * shape.values)
    threshold = dim_threshold if dim_threshold is not None else default_dim_threshold(n)
    aggregates = _common_aggregates(records, threshold)
    cells, degrees, dims = _model_table(collection)
    return ExperimentReport(
        kind="theorem1",
        n=n,
        replicates=replicates,
        seed=seed,
        model_cells=cells,
        model_degrees=degrees,
        model_dimensions=dims,
        penalty_kind=shape.kind,
        penalty_multiplier=c_under,
        penalty_values=tuple(float(v) for v in shape.values),
        penalty_stderr=tuple(float(v) for v in shape.stderr) if shape.stderr is not None else None,
        mean_p2=tuple(float(v) for v in batch.p2.mean(axis=0)),
        se_p2=tuple(float(v) for v in batch.p2.std(axis=0, ddof=1) / math.sqrt(replicates)),
        per_replicate=tuple(records),
        aggregates=aggregates,
    )


def run_theorem2_experiment(
    spec: RegressionSpec,
    collection: ModelCollection,
    n: int,
    replicates: int,
    c_over: float,
    seed: int,
    *,
    min_penalty: PenaltyShape | None = None,
    min_penalty_replicates: int = 300,
    dim_threshold: int | None = None,
    eta: float = 0.25,
    a_r: float = 1.0,
    threads: int = 1,
) -> ExperimentReport:
    """Near-optimal regime: pen = c_over * estimated minimal penalty.

    With c_over near 2 the selection should track the oracle.  Reports also
    include a dimension-band check with upper edge ``n**(1/2 + eta)`` and the
    band sup of the deviation diagnostic (the lower band constant is unknown
    at desk scale, so the lower edge defaults to 1).
    """
    if c_over <= 0.0:
        raise ValueError("c_over must be positive")
    _require_richness(collection, n)
    shape = _resolve_min_penalty(spec, collection, n, seed,
                                 min_penalty, min_penalty_replicates, threads)
    batch = simulate_batch(spec, collection, n, replicates, seed, threads)
    pen = c_over * shape.values
    records = _penalized_records(collection, batch, pen)
    threshold = dim_threshold if dim_threshold is not None else default_dim_threshold(n)
    aggregates = _common_aggregates(records, threshold)

    dims = collection.dimensions
    band_high = n ** (0.5 + eta)
    sel_dims = np.asarray([r["selected_dimension"] for r in records], dtype=float)
    aggregates.update(
        {
            "eta": eta,
            "band_high": float(band_high),
            "band_fraction": float(np.mean(sel_dims <= band_high)),
        }
    )
    # Deviation diagnostic over the mid-dimension band, per replicate.
    log_n = math.log(n)
    eps = np.maximum.reduce(
        [
            (log_n / dims[None, :]) ** 0.25 * np.ones_like(batch.sup_dev),
            (dims[None, :] * log_n / n) ** 0.25 * np.ones_like(batch.sup_dev),
            np.sqrt(batch.sup_dev),
        ]
    )
    in_band = (dims >= 1) & (dims <= band_high)
    if np.any(in_band):
        aggregates["eps_band_sup_median"] = float(np.median(eps[:, in_band].max(axis=1)))
    # Whether small-model penalties incidentally stay below a_r (ln n)^3 / n.
    small = dims <= threshold
    if np.any(small):
        implied = float(np.max(pen[small]) * n / log_n**3)
        aggregates["small_model_penalty_implied_ar"] = implied
        aggregates["small_model_penalty_ok"] = bool(implied <= a_r)

    cells, degrees, dims_t = _model_table(collection)
    return ExperimentReport(
        kind="theorem2",
        n=n,
        replicates=replicates,
        seed=seed,
        model_cells=cells,
        model_degrees=degrees,
        model_dimensions=dims_t,
        penalty_kind=shape.kind,
        penalty_multiplier=c_over,
        penalty_values=tuple(float(v) for v in shape.values),
        penalty_stderr=tuple(float(v) for v in shape.stderr) if shape.stderr is not None else None,
        mean_p2=tuple(float(v) for v in batch.p2.mean(axis=0)),
        se_p2=tuple(float(v) for v in batch.p2.std(axis=0, ddof=1) / math.sqrt(replicates)),
        per_replicate=tuple(records),
        aggregates=aggregates,
    )


def run_calibration_experiment(
    spec: RegressionSpec,
    collection: ModelCollection,
    n: int,
    replicates: int,
    shape_kind: str,
    seed: int,
    *,
    grid: np.ndarray | None = None,
    grid_points: int = 200,
    method: str = "max_jump",
    dim_threshold: int | None = None,
    min_penalty: PenaltyShape | None = None,
    min_penalty_replicates: int = 300,
    threads: int = 1,
) -> ExperimentReport:
    """Full slope-heuristics pipeline on every replicate.

    Per replicate: trace the multiplier path, detect the dimension jump,
    select at twice the detected multiplier.  The multiplier grid is shared
    across replicates (anchored at replicate 0) so the detected multipliers
    are comparable; the threshold-variant detector runs alongside the
    configured one for reporting.
    """
    if shape_kind not in ("linear_dimension", "oracle_mean_p2"):
        raise ValueError("shape_kind must be linear_dimension or oracle_mean_p2")
    _require_richness(collection, n)
    if shape_kind == "linear_dimension":
        shape = linear_dimension_shape(collection, n)
    else:
        shape = _resolve_min_penalty(spec, collection, n, seed,
                                     min_penalty, min_penalty_replicates, threads)
    batch = simulate_batch(spec, collection, n, replicates, seed, threads)
    if grid is None:
        grid = default_grid(batch.emp_risk[0], shape, num=grid_points)
    grid = np.asarray(grid, dtype=float)
    threshold = dim_threshold if dim_threshold is not None else default_dim_threshold(n)

    dims = collection.dimensions
    oracle_idx, oracle_risk = _oracle_rows(collection, batch.excess)
    perm = np.lexsort((np.arange(len(collection)), dims))

    records = []
    path0 = None
    for r in range(batch.replicates):
        risks = batch.emp_risk[r]
        path = compute_path(collection, risks, shape, grid)
        if r == 0:
            path0 = path
        record = {
            "replicate": r,
            "oracle_model_id": int(oracle_idx[r]),
            "oracle_dimension": int(dims[oracle_idx[r]]),
            "oracle_risk": float(oracle_risk[r]),
        }
        zero_sel = int(perm[np.argmin(risks[perm])])
        record["zero_penalty_ratio"] = _ratio(float(batch.excess[r, zero_sel]),
                                              float(oracle_risk[r]))
        try:
            result = calibrate(collection, risks, shape, grid,
                               method=method, dim_threshold=threshold)
        except NoJumpError:
            record.update(
                {
                    "nojump": 1,
                    "a_min_hat": math.nan,
                    "jump_from_dim": -1,
                    "jump_to_dim": -1,
                    "selected_model_id": -1,
                    "selected_dimension": -1,
                    "selected_risk": math.nan,
                    "ratio": math.nan,
                }
            )
        else:
            s = result.final_model_index
            srisk = float(batch.excess[r, s])
            record.update(
                {
                    "nojump": 0,
                    "a_min_hat": result.a_min_hat,
                    "jump_from_dim": result.jump_from_dim,
                    "jump_to_dim": result.jump_to_dim,
                    "selected_model_id": s,
                    "selected_dimension": int(dims[s]),
                    "selected_risk": srisk,
                    "ratio": _ratio(srisk, float(oracle_risk[r])),
                }
            )
        try:
            alt = detect_jump(path, method="threshold", dim_threshold=threshold)
            record["a_min_threshold"] = alt.a_min_hat
        except NoJumpError:
            record["a_min_threshold"] = math.nan
        records.append(record)

    ok = [r for r in records if r["nojump"] == 0]
    aggregates = {
        "nojump_count": len(records) - len(ok),
        "dim_threshold": int(threshold),
        "grid_lo": float(grid[0]),
        "grid_hi": float(grid[-1]),
        "grid_points": int(grid.size),
    }
    if ok:
        a_mins = np.asarray([r["a_min_hat"] for r in ok])
        ratios = np.asarray([r["ratio"] for r in ok])
        sel_dims = np.asarray([r["selected_dimension"] for r in ok], dtype=float)
        jumps = np.asarray([r["jump_from_dim"] - r["jump_to_dim"] for r in ok], dtype=float)
        aggregates.update(
            {
                "median_a_min": float(np.median(a_mins)),
                "q25_a_min": float(np.quantile(a_mins, 0.25)),
                "q75_a_min": float(np.quantile(a_mins, 0.75)),
                "median_ratio": float(np.median(ratios)),
                "p90_ratio": float(np.quantile(ratios, 0.9)),
                "median_selected_dimension": float(np.median(sel_dims)),
                "median_jump_magnitude": float(np.median(jumps)),
                "frac_calibrated_le_zero_penalty": float(
                    np.mean([r["ratio"] <= r["zero_penalty_ratio"] for r in ok])
                ),
            }
        )
        alt = np.asarray([r["a_min_threshold"] for r in ok], dtype=float)
        finite = alt[np.isfinite(alt)]
        if finite.size:
            aggregates["median_a_min_threshold_method"] = float(np.median(finite))

    cells, degrees, dims_t = _model_table(collection)
    return ExperimentReport(
        kind="calibration",
        n=n,
        replicates=replicates,
        seed=seed,
        model_cells=cells,
        model_degrees=degrees,
        model_dimensions=dims_t,
        penalty_kind=shape.kind,
        penalty_multiplier=None,
        penalty_values=tuple(float(v) for v in shape.values),
        penalty_stderr=tuple(float(v) for v in shape.stderr) if shape.stderr is not None else None,
        mean_p2=tuple(float(v) for v in batch.p2.mean(axis=0)),
        se_p2=tuple(float(v) for v in batch.p2.std(axis=0, ddof=1) / math.sqrt(replicates)),
        per_replicate=tuple(records),
        aggregates=aggregates,
        path0=path0,
    )


def run_min_penalty_experiment(
    spec: RegressionSpec,
    collection: ModelCollection,
    n: int,
    replicates: int,
    seed: int,
    threads: int = 1,
) -> ExperimentReport:
    """Emit the estimated minimal-penalty table as a report."""
    shape = estimate_min_penalty(spec, collection, n, replicates, seed, threads)
    batch = simulate_batch(spec, collection, n, replicates, min_penalty_seed(seed), threads)
    records = tuple(
        {"replicate": r, "model_id": j, "p2": float(batch.p2[r, j])}
        for r in range(batch.replicates)
        for j in range(len(collection))
    )
    cells, degrees, dims = _model_table(collection)
    return ExperimentReport(
        kind="minpen",
        n=n,
        replicates=replicates,
        seed=seed,
        model_cells=cells,
        model_degrees=degrees,
        model_dimensions=dims,
        penalty_kind=shape.kind,
        penalty_multiplier=None,
        penalty_values=tuple(float(v) for v in shape.values),
        penalty_stderr=tuple(float(v) for v in shape.stderr),
        mean_p2=tuple(float(v) for v in shape.values),
        se_p2=tuple(float(v) for v in shape.stderr),
        per_replicate=records,
        aggregates={"max_mean_p2": float(np.max(shape.values))},
    )


def compute_replicate_path(
    spec: RegressionSpec,
    collection: ModelCollection,
    n: int,
    replicate: int,
    seed: int,
    shape: PenaltyShape,
    grid: np.ndarray | None = None,
    grid_points: int = 200,
) -> SelectionPath:
    """Multiplier path of a single replicate.

    The default grid is anchored at replicate 0's risks, matching the grid
    used by the calibration experiment, so jump locations agree.
    """
    risks0 = _replicate_risks(spec, collection, n, 0, seed)
    if grid is None:
        grid = default_grid(risks0, shape, num=grid_points)
    risks = risks0 if replicate == 0 else _replicate_risks(spec, collection, n, replicate, seed)
    return compute_path(collection, risks, shape, grid)


def _replicate_risks(spec, collection, n, replicate, seed):
    sample = generate_sample(spec, n, replicate_seed(seed, replicate))
    return np.asarray(
        [empirical_risk(fit_least_squares(m, sample), sample) for m in collection.models]
    )


# ----------------------------------------------------------------------------
# Report serialization
# ----------------------------------------------------------------------------

_REPLICATE_COLUMNS = {
    "theorem1": (
        "replicate", "selected_model_id", "selected_dimension", "selected_risk",
        "oracle_model_id", "oracle_dimension", "oracle_risk", "ratio",
    ),
    "theorem2": (
        "replicate", "selected_model_id", "selected_dimension", "selected_risk",
        "oracle_model_id", "oracle_dimension", "oracle_risk", "ratio",
    ),
    "calibration": (
        "replicate", "nojump", "a_min_hat", "jump_from_dim", "jump_to_dim",
        "a_min_threshold", "selected_model_id", "selected_dimension",
        "selected_risk", "oracle_model_id", "oracle_dimension", "oracle_risk",
        "ratio", "zero_penalty_ratio",
    ),
    "minpen": ("replicate", "model_id", "p2"),
}


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _provenance_line(config_hash: str | None, seed: int) -> str:
    tag = config_hash if config_hash is not None else "none"
    return f"# schema_version={SCHEMA_VERSION} config_hash={tag} seed={seed}"


def write_report_json(report: ExperimentReport, file, config_hash: str | None = None) -> None:
    import json

    payload = report.to_dict()
    payload["config_hash"] = config_hash
    json.dump(payload, file, indent=2, sort_keys=True)
    file.write("\n")


def write_replicates_csv(report: ExperimentReport, file, config_hash: str | None = None) -> None:
    import csv as _csv

    columns = _REPLICATE_COLUMNS[report.kind]
    file.write(_provenance_line(config_hash, report.seed) + "\n")
    writer = _csv.writer(file, lineterminator="\n")
    writer.writerow(columns)
    for record in report.per_replicate:
        writer.writerow([_format_cell(record[c]) for c in columns])


def write_aggregates_csv(report: ExperimentReport, file, config_hash: str | None = None) -> None:
    import csv as _csv

    file.write(_provenance_line(config_hash, report.seed) + "\n")
    writer = _csv.writer(file, lineterminator="\n")
    writer.writerow(["key", "value"])
    for key in sorted(report.aggregates):
        writer.writerow([key, _format_cell(report.aggregates[key])])


def write_min_penalty_csv(report: ExperimentReport, file, config_hash: str | None = None) -> None:
    import csv as _csv

    file.write(_provenance_line(config_hash, report.seed) + "\n")
    writer = _csv.writer(file, lineterminator="\n")
    writer.writerow(["model_id", "D", "mean_p2", "se_p2"])
    for i, dim in enumerate(report.model_dimensions):
        writer.writerow(
            [i, dim, _format_cell(report.mean_p2[i]), _format_cell(report.se_p2[i])]
        )
