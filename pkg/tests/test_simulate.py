"""Data generation, oracles, minimal-penalty estimation, experiment reports."""

import io
import json
import math

import numpy as np
import pytest

from slopesel import (
    ModelCollection,
    PartitionModel,
    RegressionSpec,
    Sample,
    build_regular_collection,
    estimate_min_penalty,
    find_oracle,
    fit_least_squares,
    generate_sample,
    risk_breakdown,
    run_calibration_experiment,
    run_min_penalty_experiment,
    run_theorem1_experiment,
    run_theorem2_experiment,
    simulate_batch,
)
from slopesel.simulate import (
    _penalized_records,
    ReplicateBatch,
    write_aggregates_csv,
    write_min_penalty_csv,
    write_replicates_csv,
    write_report_json,
)

SINE = RegressionSpec("sine", {"amplitude": 1.0}, "constant", {"value": 0.3})


class TestRegressionSpec:
    def test_rejects_vanishing_noise_level(self):
        with pytest.raises(ValueError, match="An"):
            RegressionSpec("sine", {}, "constant", {"value": 0.0})
        with pytest.raises(ValueError, match="An"):
            RegressionSpec("sine", {}, "affine", {"intercept": 0.5, "slope": -0.5})

    def test_rejects_unknown_names(self):
        with pytest.raises(ValueError):
            RegressionSpec("mystery", {})
        with pytest.raises(ValueError):
            RegressionSpec("sine", {}, sigma_name="bogus")
        with pytest.raises(ValueError):
            RegressionSpec("sine", {}, density_name="bogus")
        with pytest.raises(ValueError):
            RegressionSpec("sine", {}, noise_name="bogus")

    def test_rejects_unbounded_density(self):
        with pytest.raises(ValueError, match="Ad_leb"):
            RegressionSpec("sine", {}, density_name="affine", density_params={"slope": 2.5})

    def test_hyphenated_names_normalize(self):
        spec = RegressionSpec("holder-cusp", {"exponent": 0.5}, noise_name="gaussian-truncated")
        assert spec.s_star_name == "holder_cusp"
        assert spec.noise_name == "gaussian_truncated"
        assert spec.knots == (0.5,)

    def test_config_round_trip(self):
        spec = RegressionSpec(
            "piecewise_smooth",
            {"break_point": 0.4, "left_coefficients": [0.0, 1.0], "right_coefficients": [2.0]},
            "sine_modulated",
            {"base": 1.0, "amplitude": 0.3},
            "affine",
            {"slope": 0.8},
        )
        again = RegressionSpec.from_config(spec.to_config())
        grid = np.linspace(0, 1, 101)
        assert np.array_equal(spec.s_star(grid), again.s_star(grid))
        assert np.array_equal(spec.sigma(grid), again.sigma(grid))
        assert spec.knots == again.knots == (0.4,)

    def test_density_icdf_inverts_cdf(self):
        spec = RegressionSpec("sine", {}, density_name="affine", density_params={"slope": 1.2})
        u = np.linspace(0.0, 1.0, 1001)
        x = spec.density_icdf(u)
        c = 1.2
        cdf = x + c * (x**2 - x) / 2.0
        assert np.max(np.abs(cdf - u)) <= 1e-12
        lo, hi = spec.density_bounds
        assert lo == pytest.approx(0.4)
        assert hi == pytest.approx(1.6)


class TestGenerateSample:
    def test_deterministic_given_seed(self):
        a = generate_sample(SINE, 256, 77)
        b = generate_sample(SINE, 256, 77)
        c = generate_sample(SINE, 256, 78)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
        assert not np.array_equal(a.y, c.y)

    def test_rademacher_values_exact(self):
        spec = RegressionSpec(
            "polynomial", {"coefficients": [0.0]}, "constant", {"value": 1.0},
            noise_name="rademacher",
        )
        sample = generate_sample(spec, 512, 5)
        assert set(np.unique(sample.y)) == {-1.0, 1.0}

    def test_bounded_data(self):
        for noise in ("uniform", "rademacher", "gaussian_truncated"):
            spec = RegressionSpec(
                "sine", {"amplitude": 0.7}, "affine",
                {"intercept": 0.3, "slope": 0.5}, noise_name=noise,
            )
            sample = generate_sample(spec, 4096, 11)
            assert np.max(np.abs(sample.y)) <= spec.data_bound * (1 + 1e-12)

    @pytest.mark.parametrize("noise", ["uniform", "rademacher", "gaussian_truncated"])
    def test_unit_variance_noise(self, noise):
        spec = RegressionSpec(
            "polynomial", {"coefficients": [0.0]}, "constant", {"value": 1.0},
            noise_name=noise,
        )
        sample = generate_sample(spec, 200_000, 123)
        assert sample.y.mean() == pytest.approx(0.0, abs=0.02)
        assert sample.y.var() == pytest.approx(1.0, abs=0.02)

    def test_affine_design_density(self):
        spec = RegressionSpec(
            "polynomial", {"coefficients": [0.0]}, "constant", {"value": 1.0},
            density_name="affine", density_params={"slope": 1.0},
        )
        sample = generate_sample(spec, 200_000, 9)
        # first moment of f(x) = 1 + (x - 1/2): E X = 1/2 + 1/12
        assert sample.x.mean() == pytest.approx(0.5 + 1.0 / 12.0, abs=0.01)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            generate_sample(SINE, 0, 1)


class TestFindOracle:
    def test_matches_exhaustive_breakdown(self):
        coll = build_regular_collection(300, {0}, 5)
        sample = generate_sample(SINE, 300, 33)
        idx, risk = find_oracle(coll, sample, SINE)
        risks = [risk_breakdown(m, sample, SINE).excess_risk for m in coll]
        assert idx == int(np.argmin(risks))
        assert risk == pytest.approx(min(risks), rel=1e-12)

    def test_noise_free_in_model_truth_tie_breaks_small(self):
        # a constant target lives in every histogram model; with a binary
        # fraction target all fits recover it exactly (dyadic widths are
        # exact), excess risks tie at 0.0, and the tie resolves to the
        # smallest dimension
        spec = RegressionSpec(
            "polynomial", {"coefficients": [0.5]}, "constant", {"value": 0.001}
        )
        coll = build_regular_collection(300, {0}, 4)
        x = np.linspace(0.001, 0.999, 64)
        sample = Sample(x, spec.s_star(x))
        idx, risk = find_oracle(coll, sample, spec)
        assert idx == 0
        assert risk == 0.0


class TestMinPenalty:
    def test_requires_replicates(self):
        coll = build_regular_collection(200, {0}, 3)
        with pytest.raises(ValueError):
            estimate_min_penalty(SINE, coll, 200, 10, 1)

    def test_homoscedastic_scale(self):
        spec = RegressionSpec(
            "polynomial", {"coefficients": [0.0]}, "constant", {"value": 0.6}
        )
        coll = build_regular_collection(400, {0}, 4)
        shape = estimate_min_penalty(spec, coll, 400, 400, 3)
        for d, mean, se in zip(coll.dimensions, shape.values, shape.stderr):
            assert abs(mean - 0.36 * d / 400) <= 3 * se

    def test_few_vs_many_replicates_agree(self):
        # base seeds sit in disjoint XOR blocks so the two campaigns share no
        # replicate seeds (seed XOR r permutes within an aligned block)
        spec = RegressionSpec(
            "polynomial", {"coefficients": [0.0]}, "constant", {"value": 0.6}
        )
        coll = build_regular_collection(200, {0}, 3)
        small = estimate_min_penalty(spec, coll, 200, 50, 64)
        large = estimate_min_penalty(spec, coll, 200, 5000, 8192)
        combined = np.sqrt(small.stderr**2 + large.stderr**2)
        assert np.all(np.abs(small.values - large.values) <= 3 * combined)

    def test_heteroscedastic_shape_not_proportional_to_dimension(self):
        # affine noise level and affine design: the two-cell mean p2 over the
        # one-cell mean p2 converges to 1.8, not 2 (closed form:
        # sum_I cellavg(sigma^2) with sigma^2 f = (0.5 + x)^3).
        spec = RegressionSpec(
            "polynomial", {"coefficients": [0.0]},
            "affine", {"intercept": 0.5, "slope": 1.0},
            "affine", {"slope": 1.0},
        )
        meta = build_regular_collection(500, {0}, 1).metadata
        coll = ModelCollection(
            (
                PartitionModel(np.array([0.0, 1.0]), 0),
                PartitionModel(np.array([0.0, 0.5, 1.0]), 0),
            ),
            meta,
        )
        shape = estimate_min_penalty(spec, coll, 500, 8000, 7)
        ratio = shape.values[1] / shape.values[0]
        assert abs(ratio - 1.8) <= 0.11  # 3 combined standard errors
        assert ratio <= 1.95


class TestSimulateBatch:
    def test_thread_count_never_changes_results(self):
        coll = build_regular_collection(400, {0}, 5)
        serial = simulate_batch(SINE, coll, 400, 20, 99, threads=1)
        parallel = simulate_batch(SINE, coll, 400, 20, 99, threads=3)
        for name in ("emp_risk", "p2", "excess", "sup_dev"):
            assert np.array_equal(getattr(serial, name), getattr(parallel, name))


@pytest.fixture(scope="module")
def small_setup():
    coll = build_regular_collection(400, {0}, 6)
    pen = estimate_min_penalty(SINE, coll, 400, 60, 99)
    return SINE, coll, pen


@pytest.fixture(scope="module")
def serialized_report():
    coll = build_regular_collection(300, {0}, 5)
    pen = estimate_min_penalty(SINE, coll, 300, 60, 5)
    return run_theorem2_experiment(SINE, coll, 300, 12, 2.0, 5, min_penalty=pen)


class TestExperiments:
    def test_zero_penalty_selects_erm(self, small_setup):
        spec, coll, pen = small_setup
        report = run_theorem1_experiment(
            spec, coll, 400, 40, 0.0, 99, min_penalty=pen
        )
        assert report.aggregates["median_selected_dimension"] == max(coll.dimensions)
        batch = simulate_batch(spec, coll, 400, 40, 99)
        for record in report.per_replicate:
            r = record["replicate"]
            assert record["selected_model_id"] == int(np.argmin(batch.emp_risk[r]))

    def test_oracle_dominance_and_ratios(self, small_setup):
        spec, coll, pen = small_setup
        report = run_theorem2_experiment(spec, coll, 400, 40, 2.0, 99, min_penalty=pen)
        for record in report.per_replicate:
            assert record["oracle_risk"] <= record["selected_risk"] + 1e-15
            assert record["ratio"] >= 1.0

    def test_median_dimension_non_increasing_in_multiplier(self, small_setup):
        spec, coll, pen = small_setup
        medians = []
        for c in (0.0, 0.5, 1.0, 1.5, 2.0, 3.0):
            runner = run_theorem1_experiment if c < 1.0 else run_theorem2_experiment
            report = runner(spec, coll, 400, 50, c, 99, min_penalty=pen)
            medians.append(report.aggregates["median_selected_dimension"])
        assert all(b <= a for a, b in zip(medians, medians[1:]))

    def test_two_pen_min_beats_three_pen_min(self):
        # pilot-calibrated configuration where tripling the minimal penalty
        # visibly overshoots one dyadic step
        spec = RegressionSpec("sine", {"amplitude": 0.894}, "constant", {"value": 0.4})
        coll = build_regular_collection(1000, {0}, 7)
        pen = estimate_min_penalty(spec, coll, 1000, 300, 31415)
        r2 = run_theorem2_experiment(spec, coll, 1000, 100, 2.0, 31415, min_penalty=pen)
        r3 = run_theorem2_experiment(spec, coll, 1000, 100, 3.0, 31415, min_penalty=pen)
        assert r2.aggregates["median_ratio"] <= r3.aggregates["median_ratio"]

    def test_equal_risk_rows_give_unit_ratio(self):
        # when every model attains the oracle risk the ratio is exactly 1
        coll = build_regular_collection(100, {0}, 2)
        m = len(coll)
        batch = ReplicateBatch(
            emp_risk=np.zeros((3, m)),
            p2=np.zeros((3, m)),
            excess=np.zeros((3, m)),
            sup_dev=np.zeros((3, m)),
        )
        records = _penalized_records(coll, batch, np.zeros(m))
        assert all(r["ratio"] == 1.0 for r in records)
        assert all(r["selected_dimension"] == 1 for r in records)

    def test_richness_precondition(self):
        spec = SINE
        coll = build_regular_collection(1000, {0}, 4)  # max D = 16 < n / ln(n)^2
        with pytest.raises(ValueError, match="P3"):
            run_theorem1_experiment(spec, coll, 1000, 10, 0.5, 1, min_penalty_replicates=50)

    def test_calibration_nojump_counted(self, small_setup):
        spec, coll, pen = small_setup
        report = run_calibration_experiment(
            spec, coll, 400, 10, "oracle_mean_p2", 99, min_penalty=pen
        )
        assert report.aggregates["nojump_count"] + sum(
            1 for r in report.per_replicate if r["nojump"] == 0
        ) == 10
        assert report.path0 is not None


class TestReportSerialization:
    def test_json_round_trip(self, serialized_report):
        report = serialized_report
        buffer = io.StringIO()
        write_report_json(report, buffer, config_hash="deadbeef")
        payload = json.loads(buffer.getvalue())
        assert payload["schema_version"] == 1
        assert payload["kind"] == "theorem2"
        assert payload["config_hash"] == "deadbeef"
        assert len(payload["per_replicate"]) == 12
        assert payload["penalty"]["kind"] == "oracle_mean_p2"

    def test_replicates_csv(self, serialized_report):
        report = serialized_report
        buffer = io.StringIO()
        write_replicates_csv(report, buffer, config_hash="deadbeef")
        lines = buffer.getvalue().splitlines()
        assert lines[0].startswith("# schema_version=1 config_hash=deadbeef")
        assert lines[1].split(",")[0] == "replicate"
        assert len(lines) == 2 + 12

    def test_aggregates_csv(self, serialized_report):
        report = serialized_report
        buffer = io.StringIO()
        write_aggregates_csv(report, buffer)
        lines = buffer.getvalue().splitlines()
        assert lines[1] == "key,value"
        keys = [line.split(",")[0] for line in lines[2:]]
        assert keys == sorted(keys)
        assert "median_ratio" in keys

    def test_min_penalty_csv(self):
        coll = build_regular_collection(300, {0}, 4)
        report = run_min_penalty_experiment(SINE, coll, 300, 60, 5)
        buffer = io.StringIO()
        write_min_penalty_csv(report, buffer)
        lines = buffer.getvalue().splitlines()
        assert lines[1] == "model_id,D,mean_p2,se_p2"
        assert len(lines) == 2 + len(coll)
        row = lines[2].split(",")
        assert int(row[0]) == 0 and int(row[1]) == 1
