import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threatshare.detector import WeightVector, fit_ensemble
from threatshare.features import FEATURE_NAMES, FeatureMatrix
from threatshare.sharing import (
    FeatureDistance,
    MomentSummary,
    PackageError,
    SharePackage,
    adapt_weights,
    aggregate_port_distance,
    compute_moments,
    emd_distance,
    emd_feature_distances,
    export_package,
    import_package,
    make_model_package,
    make_weights_moments_package,
    make_weights_package,
    moment_distance,
    package_to_dict,
)


def matrix_from_columns(cols: dict[str, list[float]], port=23) -> FeatureMatrix:
    n = len(next(iter(cols.values())))
    values = np.zeros((n, 35))
    for name, data in cols.items():
        values[:, FEATURE_NAMES.index(name)] = data
    return FeatureMatrix(port, 60.0 * np.arange(n), values, np.full(n, 2, np.int8))


class TestComputeMoments:
    def test_constant_column(self):
        m = compute_moments(matrix_from_columns({"n_conns": [4.0, 4.0, 4.0]}))
        j = FEATURE_NAMES.index("n_conns")
        assert (m.m1[j], m.m2[j], m.m3[j], m.m4[j]) == (4.0, 0.0, 0.0, 0.0)

    def test_zero_one_column(self):
        m = compute_moments(matrix_from_columns({"n_conns": [0.0, 1.0]}))
        j = FEATURE_NAMES.index("n_conns")
        assert m.m1[j] == 0.5
        assert m.m2[j] == 0.25
        assert m.m3[j] == 0.0
        assert m.m4[j] == 0.0625

    def test_symmetric_column_zero_skew(self):
        m = compute_moments(matrix_from_columns({"dur_mean": [-3.0, -1.0, 1.0, 3.0]}))
        j = FEATURE_NAMES.index("dur_mean")
        assert abs(m.m3[j]) <= 1e-12

    def test_empty_matrix_errors(self):
        empty = FeatureMatrix(23, np.zeros(0), np.zeros((0, 35)), np.zeros(0, np.int8))
        with pytest.raises(ValueError):
            compute_moments(empty)


def summary(vals, names=("f",)):
    m1, m2, m3, m4 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in vals)
    return MomentSummary(m1, m2, m3, m4, n=5, feature_names=tuple(names))


class TestMomentDistance:
    def test_identical_is_zero(self):
        a = summary(([1.5], [2.0], [-0.5], [4.0]))
        d = moment_distance(a, a)
        assert np.all(d.distances == 0.0)

    def test_hand_euclidean(self):
        a = summary(([0.0], [0.0], [0.0], [0.0]))
        b = summary(([3.0], [4.0], [0.0], [0.0]))
        assert moment_distance(a, b).distances[0] == pytest.approx(5.0, abs=1e-12)

    def test_scale_adjusted_roots(self):
        a = summary(([0.0], [0.0], [0.0], [0.0]))
        b = summary(([0.0], [9.0], [-8.0], [16.0]))
        d = moment_distance(a, b, "scale_adjusted").distances[0]
        # sqrt(9)=3, sign(-8)*|8|^(1/3)=-2, 16^(1/4)=2
        assert d == pytest.approx(np.sqrt(9.0 + 4.0 + 4.0), abs=1e-12)

    def test_feature_set_mismatch(self):
        a = summary(([0.0], [0.0], [0.0], [0.0]), names=("x",))
        b = summary(([0.0], [0.0], [0.0], [0.0]), names=("y",))
        with pytest.raises(ValueError):
            moment_distance(a, b)


moment_block = st.tuples(
    st.floats(-5, 5), st.floats(0, 10), st.floats(-10, 10), st.floats(0, 20))


@given(moment_block, moment_block, moment_block, st.sampled_from(["raw_moments", "scale_adjusted"]))
@settings(max_examples=150, deadline=None)
def test_moment_distance_is_pseudometric(ma, mb, mc, method):
    A, B, C = (summary([[v] for v in m]) for m in (ma, mb, mc))
    dab = moment_distance(A, B, method).distances[0]
    dba = moment_distance(B, A, method).distances[0]
    dac = moment_distance(A, C, method).distances[0]
    dbc = moment_distance(B, C, method).distances[0]
    assert dab >= 0
    assert dab == pytest.approx(dba, abs=1e-12)
    assert moment_distance(A, A, method).distances[0] == 0.0
    assert dac <= dab + dbc + 1e-9


class TestEmd:
    def test_identical(self):
        assert emd_distance([1.0, 2.0, 5.0], [1.0, 2.0, 5.0]) == 0.0

    def test_point_masses(self):
        assert emd_distance([0.0], [1.0]) == pytest.approx(1.0, abs=1e-12)

    def test_quantile_integral_by_hand(self):
        assert emd_distance([0.0, 0.0], [0.0, 2.0]) == pytest.approx(1.0, abs=1e-12)

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            emd_distance([], [1.0])

    def test_lp_oracle_agreement(self):
        from scipy.optimize import linprog

        def lp_emd(a, b):
            na, nb = len(a), len(b)
            cost = np.abs(np.subtract.outer(a, b)).ravel()
            A_eq = np.zeros((na + nb, na * nb))
            for i in range(na):
                A_eq[i, i * nb:(i + 1) * nb] = 1.0
            for j in range(nb):
                A_eq[na + j, j::nb] = 1.0
            b_eq = np.concatenate([np.full(na, 1.0 / na), np.full(nb, 1.0 / nb)])
            res = linprog(cost, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
            assert res.success
            return res.fun

        rng = np.random.default_rng(13)
        for _ in range(40):
            a = rng.uniform(-5, 5, rng.integers(1, 7))
            b = rng.uniform(-5, 5, rng.integers(1, 7))
            assert emd_distance(a, b) == pytest.approx(lp_emd(a, b), abs=1e-9)

    def test_feature_distances_mode(self):
        rng = np.random.default_rng(3)
        a = matrix_from_columns({"n_conns": list(rng.poisson(5, 20).astype(float))})
        b = matrix_from_columns({"n_conns": list(rng.poisson(9, 25).astype(float))})
        d = emd_feature_distances(a, b)
        assert d.method == "emd"
        assert d.distances[FEATURE_NAMES.index("n_conns")] > 0


def canonical_weights(first=()):
    v = np.zeros(35)
    v[:len(first)] = first
    return WeightVector(v / v.sum()) if v.sum() else WeightVector.uniform()


def canonical_distance(first=(), fill=100.0):
    d = np.full(35, fill)
    d[:len(first)] = first
    return FeatureDistance(d, "raw_moments")


class TestAdaptWeights:
    def test_keep_all_is_identity(self):
        w = canonical_weights((0.5, 0.3, 0.2))
        out = adapt_weights(w, canonical_distance(), k=35)
        assert np.allclose(out.values, w.values, atol=1e-12)

    def test_hand_renormalization(self):
        w = canonical_weights((0.5, 0.3, 0.2))
        d = canonical_distance((9.0, 1.0, 2.0))
        out = adapt_weights(w, d, k=2)
        expected = np.zeros(35)
        expected[1], expected[2] = 0.6, 0.4
        assert np.allclose(out.values, expected, atol=1e-12)

    def test_all_equal_distances_tie_breaks_to_heaviest(self):
        w = canonical_weights((0.1, 0.6, 0.3))
        out = adapt_weights(w, canonical_distance(fill=2.0), k=1)
        assert out.values[1] == 1.0

    def test_k_above_feature_count_clamps_with_warning(self):
        w = canonical_weights((0.5, 0.5))
        with pytest.warns(UserWarning, match="clamp"):
            out = adapt_weights(w, canonical_distance(), k=99)
        assert np.allclose(out.values, w.values, atol=1e-12)

    def test_at_most_k_nonzero_and_valid(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            raw = rng.random(35)
            w = WeightVector(raw / raw.sum())
            d = FeatureDistance(rng.random(35) * 10, "raw_moments")
            k = int(rng.integers(1, 36))
            out = adapt_weights(w, d, k)
            assert np.count_nonzero(out.values) <= k
            assert abs(out.values.sum() - 1.0) <= 1e-9
            assert np.all(out.values >= 0)

    def test_zero_weight_survivors_fall_back_uniform(self):
        w = canonical_weights((1.0,))  # all mass on feature 0
        d = canonical_distance((50.0,), fill=1.0)  # feature 0 is farthest
        with pytest.warns(UserWarning, match="zero shared weight"):
            out = adapt_weights(w, d, k=3)
        assert abs(out.values.sum() - 1.0) <= 1e-9
        assert np.count_nonzero(out.values) == 3


class TestAggregate:
    def test_constant(self):
        d = FeatureDistance(np.full(35, 2.5), "raw_moments")
        assert aggregate_port_distance(d) == pytest.approx(2.5)
        assert aggregate_port_distance(d, WeightVector.uniform()) == pytest.approx(2.5)

    def test_weighted_dot(self):
        d = canonical_distance((1.0, 3.0), fill=0.0)
        w = canonical_weights((0.75, 0.25))
        assert aggregate_port_distance(d, w) == pytest.approx(1.5, abs=1e-12)

    def test_one_hot(self):
        d = canonical_distance((4.0, 9.0), fill=0.0)
        w = canonical_weights((0.0, 1.0))
        assert aggregate_port_distance(d, w) == pytest.approx(9.0, abs=1e-12)


def sample_moments(rng) -> MomentSummary:
    m2 = rng.uniform(0, 10, 35)
    m4 = rng.uniform(0, 50, 35)
    return MomentSummary(rng.normal(0, 5, 35), m2, rng.normal(0, 3, 35), m4, n=17)


class TestPackages:
    def test_weights_round_trip(self):
        w = WeightVector.uniform()
        pkg = make_weights_package("net-a", 23, w)
        clone = import_package(export_package(pkg))
        assert clone.kind == "weights"
        assert clone.site_id == "net-a" and clone.port == 23
        assert np.array_equal(clone.payload.values, w.values)

    def test_weights_moments_round_trip(self):
        rng = np.random.default_rng(1)
        w = WeightVector(np.full(35, 1 / 35))
        m = sample_moments(rng)
        pkg = make_weights_moments_package("net-a", 445, w, m)
        clone = import_package(export_package(pkg))
        w2, m2 = clone.payload
        assert np.array_equal(w2.values, w.values)
        for attr in ("m1", "m2", "m3", "m4"):
            assert np.array_equal(getattr(m2, attr), getattr(m, attr))
        assert m2.n == m.n

    def test_model_round_trip_scores(self):
        rng = np.random.default_rng(2)
        matrix = FeatureMatrix(
            80, 60.0 * np.arange(12), np.abs(rng.normal(5, 2, (12, 35))),
            np.full(12, 2, np.int8))
        model = fit_ensemble(matrix)
        pkg = make_model_package("net-a", model)
        clone = import_package(export_package(pkg)).payload
        probe = np.abs(rng.normal(5, 3, (8, 35)))
        assert np.allclose(model.final_scores(probe), clone.final_scores(probe), atol=1e-12)

    def test_export_deterministic(self):
        w = WeightVector.uniform()
        m = sample_moments(np.random.default_rng(5))
        blob1 = export_package(make_weights_moments_package("a", 23, w, m))
        blob2 = export_package(make_weights_moments_package("a", 23, w, m))
        assert blob1 == blob2

    def test_tampered_weight_sum_rejected(self):
        doc = package_to_dict(make_weights_package("a", 23, WeightVector.uniform()))
        doc["payload"]["weights"]["n_conns"] += 0.2
        with pytest.raises(PackageError):
            import_package(json.dumps(doc))

    def test_kind_payload_mismatch_rejected(self):
        doc = package_to_dict(make_weights_package("a", 23, WeightVector.uniform()))
        doc["kind"] = "weights+moments"
        with pytest.raises(PackageError):
            import_package(json.dumps(doc))

    def test_negative_variance_rejected(self):
        doc = package_to_dict(make_weights_moments_package(
            "a", 23, WeightVector.uniform(), sample_moments(np.random.default_rng(0))))
        doc["payload"]["moments"]["features"]["n_conns"]["m2"] = -1.0
        with pytest.raises(PackageError):
            import_package(json.dumps(doc))

    def test_unknown_version_rejected(self):
        doc = package_to_dict(make_weights_package("a", 23, WeightVector.uniform()))
        doc["schema_version"] = "42"
        with pytest.raises(PackageError):
            import_package(json.dumps(doc))

    def test_garbage_rejected(self):
        with pytest.raises(PackageError):
            import_package(b"{not json")

    def test_construction_validates_kind(self):
        with pytest.raises(PackageError):
            SharePackage("a", 23, "telemetry", WeightVector.uniform())

    def test_construction_validates_payload_type(self):
        with pytest.raises(PackageError):
            SharePackage("a", 23, "model", WeightVector.uniform())
