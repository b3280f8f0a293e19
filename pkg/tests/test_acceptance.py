"""Acceptance suite.

Each test exercises one release criterion end to end and prints a single
PASS/FAIL line (visible with ``pytest -s`` or in captured output). Expected
values are frozen from independent oracles: direct kernel sums, a transport
LP, binomial/Poisson bounds, and the published top-60 reference table for the
slow-variant comparison.
"""

import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from threatshare.detector import AlertRanking, WeightVector, fit_ensemble, fit_kde
from threatshare.evaluation import recall_curve, truncate2_ratio
from threatshare.features import FEATURE_NAMES, FeatureMatrix
from threatshare.forest import ForestConfig, feature_weights, train_forest
from threatshare.presets import default_scenario
from threatshare.scenario import net_a_selfcheck, run_scenario, seeded
from threatshare.sharing import (
    MomentSummary,
    PackageError,
    emd_distance,
    export_package,
    import_package,
    make_model_package,
    make_weights_moments_package,
    make_weights_package,
    package_to_dict,
)
from threatshare.synth import slow_variant
from threatshare.connlog import RecordBatch

SQRT_2PI = math.sqrt(2.0 * math.pi)
SEEDS = (1, 2, 3, 4, 5)


@contextmanager
def criterion(num: int, name: str, budget: float | None = None):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"[criterion {num:02d}] FAIL {name}")
        raise
    dt = time.perf_counter() - t0
    print(f"[criterion {num:02d}] PASS {name} ({dt:.1f}s)")
    if budget is not None:
        assert dt < budget, f"runtime budget exceeded: {dt:.1f}s >= {budget}s"


# --- 1. top-60 reference-table cross-consistency ---------------------------

REFERENCE_PORTS = (80, 443, 22, 23, 445)
REFERENCE_PRECISION_TOP60 = {
    "model_sharing": (0.16, 0.0, 0.06, 0.86, 0.03),
    "weight_sharing": (0.35, 0.61, 0.06, 0.70, 0.70),
    "weight_adaptation": (1.0, 0.81, 0.96, 0.98, 0.76),
}
REFERENCE_FP_TOP60 = {
    "model_sharing": (50, 60, 56, 8, 58),
    "weight_sharing": (39, 23, 56, 18, 18),
    "weight_adaptation": (0, 11, 2, 1, 14),
}


def test_c01_reference_table_consistency():
    with criterion(1, "top-60 reference tables: precision == (60-FP)/60 truncated", budget=1.0):
        checked = 0
        for method, fps in REFERENCE_FP_TOP60.items():
            for port_idx, fp in enumerate(fps):
                expect = REFERENCE_PRECISION_TOP60[method][port_idx]
                assert truncate2_ratio(60 - fp, 60) == expect, (method, REFERENCE_PORTS[port_idx])
                checked += 1
        assert checked == 15


# --- 2. ideal-recall law ----------------------------------------------------


def test_c02_ideal_recall_law():
    with criterion(2, "oracle ranking gives recall@k = min(k/m, 1) exactly", budget=5.0):
        rng = np.random.default_rng(2024)
        n = 1440
        starts = 60.0 * np.arange(n)
        ks = np.arange(1, n + 1)
        for _ in range(200):
            m = int(rng.integers(1, 101))
            truth = rng.choice(starts, size=m, replace=False)
            rest = starts[~np.isin(starts, truth)]
            ranking = AlertRanking(
                23, np.concatenate([truth, rest]), np.linspace(1.0, 0.0, n))
            got = recall_curve(ranking, truth)
            expected = np.minimum(ks / m, 1.0)
            assert np.array_equal(got, expected)


# --- 3. KDE oracle equivalence ----------------------------------------------


def _kernel_sum(points, h, x):
    return math.fsum(
        math.exp(-0.5 * ((x - v) / h) ** 2) for v in points
    ) / (len(points) * h * SQRT_2PI)


def _grid_integral(model):
    lo = model.points.min() - 6.0 * model.bandwidth
    hi = model.points.max() + 6.0 * model.bandwidth
    n = int(min(max((hi - lo) / (model.bandwidth / 8.0), 1024), 300_000))
    xs = np.linspace(lo, hi, n)
    return float(np.trapezoid(model.density(xs), xs))


def test_c03_kde_oracle_equivalence():
    with criterion(3, "raw scores match direct kernel-sum oracle within 1e-12", budget=30.0):
        rng = np.random.default_rng(3)
        pairs = 0
        for trial in range(200):
            kind = trial % 4
            n = int(rng.integers(1, 401))
            if kind == 0:
                vals = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 4), n)
            elif kind == 1:
                vals = rng.uniform(-100, 100, n)
            elif kind == 2:
                vals = rng.poisson(rng.uniform(0.5, 20), n).astype(float)
            else:
                vals = np.full(n, rng.uniform(-3, 3)) + rng.normal(0, 1e-9, n)
            model = fit_kde(vals)
            span = vals.max() - vals.min() + 1.0
            queries = rng.uniform(vals.min() - 0.5 * span, vals.max() + 0.5 * span, 5)
            for x in queries:
                want = -math.log(max(_kernel_sum(model.points, model.bandwidth, x), model.eps))
                got = float(model.raw_scores(np.array([x]))[0])
                assert abs(got - want) <= 1e-12
                pairs += 1
            assert 0.99 <= _grid_integral(model) <= 1.001
        assert pairs == 1000


# --- 4. synthetic fast-variant detection ------------------------------------


def test_c04_fast_variant_detection():
    with criterion(4, "site-A self-check > 0.96 and site-B fast baseline recall@63 >= 0.95",
                   budget=600.0):
        base = default_scenario()
        base = replace(base, variants=("fast",), strategies=("baseline",))
        port23 = []
        for s in SEEDS:
            result = run_scenario(seeded(base, s))
            assert net_a_selfcheck(result), (
                f"seed {s}: site-A accuracy {result.accuracy_a}")
            report = next(
                r for r in result.reports
                if r.port == 23 and r.variant == "fast" and r.strategy == "baseline")
            port23.append(report.recall_at(63))
        mean_recall = float(np.mean(port23))
        print(f"    port-23 fast baseline recall@63 per seed: "
              f"{[round(r, 4) for r in port23]} (mean {mean_recall:.4f})")
        assert mean_recall >= 0.95


# --- 5. slow-variant strategy ordering --------------------------------------


def test_c05_slow_variant_strategy_ordering():
    with criterion(5, "slow variant: adaptation >= sharing >= baseline per port; "
                      "adaptation precision@60 >= 0.85", budget=900.0):
        base = default_scenario(shifted=True)
        base = replace(base, variants=("slow",),
                       strategies=("baseline", "weight_sharing", "weight_adaptation"))
        recalls: dict[tuple[int, str], list[float]] = {}
        precisions: list[float] = []
        for s in SEEDS:
            result = run_scenario(seeded(base, s))
            for r in result.reports:
                recalls.setdefault((r.port, r.strategy), []).append(r.recall_at(63))
                if r.strategy == "weight_adaptation":
                    precisions.append(r.precision_at[60])
        for port in base.attack.ports:
            b = float(np.mean(recalls[(port, "baseline")]))
            w = float(np.mean(recalls[(port, "weight_sharing")]))
            a = float(np.mean(recalls[(port, "weight_adaptation")]))
            print(f"    port {port}: baseline={b:.3f} sharing={w:.3f} adaptation={a:.3f}")
            assert a >= w >= b, f"ordering violated on port {port}"
        mean_precision = float(np.mean(precisions))
        print(f"    adaptation mean precision@60 = {mean_precision:.3f}")
        assert mean_precision >= 0.85


# --- 6. importance sanity ----------------------------------------------------


def test_c06_importance_sanity():
    with criterion(6, "forest importance: informative feature > 0.9, sums to 1, "
                      "null OOB near 0.5", budget=60.0):
        rng = np.random.default_rng(6)
        X = rng.normal(0, 1, (600, 35))
        y = (X[:, 12] > 0).astype(np.int8)
        weights = feature_weights(
            train_forest((X, y), ForestConfig(rng_seed=3, features_per_split=35)))
        assert weights.values[12] > 0.9

        for seed in range(5):
            Xs = rng.normal(0, 1, (150, 35))
            ys = (Xs[:, seed] > 0).astype(np.int8)
            w = feature_weights(train_forest((Xs, ys), ForestConfig(n_trees=40, rng_seed=seed)))
            assert abs(w.values.sum() - 1.0) <= 1e-9

        Xn = rng.normal(0, 1, (400, 10))
        yn = rng.integers(0, 2, 400).astype(np.int8)
        forest = train_forest((Xn, yn), ForestConfig(rng_seed=11))
        assert forest.oob_accuracy is not None
        assert 0.4 <= forest.oob_accuracy <= 0.6


# --- 7. sharing-protocol integrity -------------------------------------------


def _random_weights(rng) -> WeightVector:
    raw = rng.random(35) + 1e-6
    return WeightVector(raw / raw.sum())


def _random_moments(rng) -> MomentSummary:
    return MomentSummary(
        rng.normal(0, 5, 35), rng.uniform(0, 10, 35),
        rng.normal(0, 3, 35), rng.uniform(0, 40, 35),
        n=int(rng.integers(1, 10_000)))


def test_c07_sharing_protocol_integrity():
    with criterion(7, "1000 package round-trips lossless; invariant violations rejected",
                   budget=30.0):
        rng = np.random.default_rng(7)
        small_matrix = FeatureMatrix(
            23, 60.0 * np.arange(6), np.abs(rng.normal(4, 2, (6, 35))),
            np.full(6, 2, np.int8))
        model = fit_ensemble(small_matrix)
        probe = np.abs(rng.normal(4, 2, (4, 35)))
        model_scores = model.final_scores(probe)

        round_trips = 0
        for i in range(450):
            pkg = make_weights_package(f"site{i % 7}", int(rng.integers(0, 65536)),
                                       _random_weights(rng))
            clone = import_package(export_package(pkg))
            assert np.array_equal(clone.payload.values, pkg.payload.values)
            assert (clone.site_id, clone.port) == (pkg.site_id, pkg.port)
            round_trips += 1
        for i in range(450):
            pkg = make_weights_moments_package(
                "a", 23, _random_weights(rng), _random_moments(rng))
            clone = import_package(export_package(pkg))
            w, m = clone.payload
            assert np.array_equal(w.values, pkg.payload[0].values)
            for attr in ("m1", "m2", "m3", "m4"):
                assert np.array_equal(getattr(m, attr), getattr(pkg.payload[1], attr))
            round_trips += 1
        for _ in range(100):
            clone = import_package(export_package(make_model_package("a", model)))
            assert np.allclose(clone.payload.final_scores(probe), model_scores, atol=1e-12)
            round_trips += 1
        assert round_trips == 1000

        import json

        good = package_to_dict(make_weights_package("a", 23, _random_weights(rng)))
        bad_sum = json.loads(json.dumps(good))
        bad_sum["payload"]["weights"]["n_conns"] += 0.2
        bad_kind = json.loads(json.dumps(good))
        bad_kind["kind"] = "weights+moments"
        bad_version = json.loads(json.dumps(good))
        bad_version["schema_version"] = "0"
        wm = package_to_dict(make_weights_moments_package(
            "a", 23, _random_weights(rng), _random_moments(rng)))
        bad_var = json.loads(json.dumps(wm))
        bad_var["payload"]["moments"]["features"]["dur_mean"]["m2"] = -4.0
        for mutated in (bad_sum, bad_kind, bad_version, bad_var):
            with pytest.raises(PackageError):
                import_package(json.dumps(mutated))


# --- 8. slow-variant thinning -------------------------------------------------


def test_c08_thinning_binomial_bands():
    with criterion(8, "factor-128 retention within +-3 sigma over 20 seeds, "
                      "subsequence preserved", budget=10.0):
        n = 128_000
        base = RecordBatch.empty()
        ts = np.arange(n, dtype=float)
        trace = RecordBatch(
            ts=ts,
            orig_ip=np.arange(n, dtype=np.uint64),
            resp_ip=np.arange(n, dtype=np.uint64),
            orig_port=np.full(n, 1, np.uint32), resp_port=np.full(n, 23, np.uint32),
            proto=np.zeros(n, np.uint8), duration=np.zeros(n), orig_bytes=np.zeros(n),
            resp_bytes=np.zeros(n), orig_pkts=np.ones(n), resp_pkts=np.zeros(n),
            conn_state=np.zeros(n, np.uint8),
            orig_internal=np.ones(n, bool), resp_internal=np.zeros(n, bool),
        )
        p = 1.0 / 128.0
        mean, sigma = n * p, math.sqrt(n * p * (1 - p))
        for seed in range(20):
            out = slow_variant(trace, 128.0, rng_seed=seed)
            assert mean - 3 * sigma <= len(out) <= mean + 3 * sigma, f"seed {seed}"
            # subsequence: retained timestamps strictly increasing subset
            assert np.all(np.diff(out.ts) > 0)
            assert np.all(np.isin(out.ts, trace.ts))
        assert len(base) == 0


# --- 9. earth mover's distance oracle ----------------------------------------


def _lp_emd(a, b):
    from scipy.optimize import linprog

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
    return float(res.fun)


def test_c09_emd_transport_lp_oracle():
    with criterion(9, "1-D EMD matches brute-force transport LP within 1e-9", budget=60.0):
        rng = np.random.default_rng(9)
        for _ in range(500):
            a = rng.uniform(-10, 10, int(rng.integers(1, 7)))
            b = rng.uniform(-10, 10, int(rng.integers(1, 7)))
            assert abs(emd_distance(a, b) - _lp_emd(a, b)) <= 1e-9


# --- 10. whole-scenario determinism -------------------------------------------


def _file_tree(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def test_c10_scenario_determinism(tmp_path):
    with criterion(10, "two identical default-scenario runs produce byte-identical reports"):
        config = default_scenario()
        run_scenario(config, out_dir=tmp_path / "run1")
        run_scenario(config, out_dir=tmp_path / "run2")
        t1, t2 = _file_tree(tmp_path / "run1"), _file_tree(tmp_path / "run2")
        assert t1.keys() == t2.keys()
        diffs = [name for name in t1 if t1[name] != t2[name]]
        assert diffs == [], f"files differ between runs: {diffs}"
        assert any(name.startswith("reports") for name in t1)
