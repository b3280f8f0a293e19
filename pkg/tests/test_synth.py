import numpy as np
import pytest
from scipy import stats

from threatshare.connlog import CONN_STATES, STATE_INDEX, ConnRecord, SiteConfig
from threatshare.features import featurize
from threatshare.synth import (
    BenignProfile,
    PortActivity,
    ScanProfile,
    attack_intervals,
    gen_benign,
    gen_benign_port,
    gen_scan,
    inject,
    load_profile,
    profile_from_dict,
    slow_variant,
)


def profile(rate=60.0, amplitude=0.0, **kw):
    return BenignProfile(
        ports={23: PortActivity(rate_per_min=rate, diurnal_amplitude=amplitude, **kw)},
        rng_seed=kw.pop("seed", 7) if "seed" in kw else 7,
    )


class TestGenBenign:
    def test_poisson_band_for_total_count(self):
        b = gen_benign_port(profile(rate=60.0), 23, (0.0, 600.0), "s")
        lo = stats.poisson.ppf(0.0005, 600)
        hi = stats.poisson.ppf(0.9995, 600)
        assert lo <= len(b) <= hi

    def test_deterministic_per_seed(self):
        b1 = gen_benign_port(profile(), 23, (0.0, 1800.0), "s")
        b2 = gen_benign_port(profile(), 23, (0.0, 1800.0), "s")
        for col in b1._COLS:
            a1, a2 = getattr(b1, col), getattr(b2, col)
            assert np.array_equal(a1, a2, equal_nan=(a1.dtype.kind == "f"))

    def test_different_sites_differ(self):
        b1 = gen_benign_port(profile(), 23, (0.0, 1800.0), "site-a")
        b2 = gen_benign_port(profile(), 23, (0.0, 1800.0), "site-b")
        assert len(b1) != len(b2) or not np.array_equal(b1.ts, b2.ts)

    def test_zero_amplitude_dispersion(self):
        b = gen_benign_port(profile(rate=30.0), 23, (0.0, 600 * 60.0), "s")
        counts = np.bincount((b.ts // 60).astype(int), minlength=600)
        n = len(counts)
        dispersion = (n - 1) * counts.var(ddof=1) / counts.mean()
        assert stats.chi2.ppf(0.0005, n - 1) <= dispersion <= stats.chi2.ppf(0.9995, n - 1)

    def test_time_sorted_and_in_range(self):
        b = gen_benign_port(profile(amplitude=0.5), 23, (120.0, 720.0), "s")
        assert np.all(np.diff(b.ts) >= 0)
        assert b.ts.min() >= 120.0 and b.ts.max() < 720.0

    def test_empty_time_range_errors(self):
        with pytest.raises(ValueError):
            gen_benign_port(profile(), 23, (100.0, 100.0), "s")

    def test_merged_ports_sorted(self):
        prof = BenignProfile(
            ports={23: PortActivity(rate_per_min=20.0), 80: PortActivity(rate_per_min=20.0)},
            rng_seed=1,
        )
        b = gen_benign(prof, (0.0, 600.0), "s")
        assert np.all(np.diff(b.ts) >= 0)
        assert set(np.unique(b.resp_port)) == {23, 80}

    def test_state_mix_roughly_matches_profile(self):
        act = PortActivity(rate_per_min=200.0, diurnal_amplitude=0.0)
        prof = BenignProfile(ports={23: act}, rng_seed=3)
        b = gen_benign_port(prof, 23, (0.0, 3600.0 * 4), "s")
        frac_sf = np.mean(b.conn_state == STATE_INDEX["SF"])
        assert abs(frac_sf - act.state_probs["SF"]) < 0.02


class TestGenScan:
    def test_expected_volume_and_shape(self):
        scan = gen_scan(ScanProfile(port=23, rate_per_min=750.0, n_windows=63, rng_seed=2))
        expect = 750 * 63
        lo = stats.poisson.ppf(0.0005, expect)
        hi = stats.poisson.ppf(0.9995, expect)
        assert lo <= len(scan) <= hi
        assert np.all(scan.conn_state == STATE_INDEX["S0"])
        assert np.all(scan.resp_bytes == 0.0)
        assert np.all(scan.resp_port == 23)

    def test_distinct_victims_saturate_pool(self):
        scan = gen_scan(ScanProfile(
            port=23, rate_per_min=600.0, n_windows=3, victim_space=100, rng_seed=4))
        cfg = SiteConfig(monitored_ports=(23,))
        m = featurize(scan, cfg)[23]
        assert m.column("n_distinct_external_ips").max() == 100.0

    def test_single_window(self):
        scan = gen_scan(ScanProfile(port=23, rate_per_min=100.0, n_windows=1,
                                    start=600.0, rng_seed=5))
        assert np.all((scan.ts >= 600.0) & (scan.ts < 660.0))


class TestSlowVariant:
    def test_identity_at_factor_one(self):
        scan = gen_scan(ScanProfile(port=23, rate_per_min=100.0, n_windows=5, rng_seed=6))
        out = slow_variant(scan, 1.0, rng_seed=9)
        assert len(out) == len(scan)
        assert np.array_equal(out.ts, scan.ts)

    def test_binomial_band(self):
        scan = gen_scan(ScanProfile(port=23, rate_per_min=2000.0, n_windows=64, rng_seed=7))
        n = len(scan)
        p = 1.0 / 128.0
        mean, sigma = n * p, np.sqrt(n * p * (1 - p))
        out = slow_variant(scan, 128.0, rng_seed=11)
        assert mean - 3 * sigma <= len(out) <= mean + 3 * sigma

    def test_subsequence_of_input(self):
        scan = gen_scan(ScanProfile(port=23, rate_per_min=200.0, n_windows=4, rng_seed=8))
        out = slow_variant(scan, 4.0, rng_seed=12)
        # every retained (ts, resp_ip) pair appears in order in the input
        idx = np.searchsorted(scan.ts, out.ts)
        assert np.array_equal(scan.ts[idx], out.ts)
        assert np.array_equal(scan.resp_ip[idx], out.resp_ip)

    def test_huge_factor_empties(self):
        scan = gen_scan(ScanProfile(port=23, rate_per_min=200.0, n_windows=4, rng_seed=8))
        out = slow_variant(scan, len(scan) * 1e6, rng_seed=13)
        assert len(out) <= 2

    def test_factor_below_one_rejected(self):
        scan = gen_scan(ScanProfile(port=23, rate_per_min=10.0, n_windows=1, rng_seed=1))
        with pytest.raises(ValueError):
            slow_variant(scan, 0.5)

    def test_record_list_variant(self):
        recs = [
            ConnRecord(ts=float(i), uid=f"u{i}", orig_ip="10.0.0.1", resp_ip="1.2.3.4",
                       orig_port=1, resp_port=23, proto="tcp", conn_state="S0")
            for i in range(1000)
        ]
        kept = slow_variant(recs, 10.0, rng_seed=3)
        assert 50 <= len(kept) <= 180
        assert all(k in recs for k in kept[:10])


class TestInject:
    def test_empty_attack(self):
        benign = gen_benign_port(profile(), 23, (0.0, 600.0), "s")
        empty = gen_scan(ScanProfile(port=23, rate_per_min=5.0, n_windows=1, rng_seed=1))
        empty = empty.take(np.zeros(len(empty), dtype=bool))
        merged, intervals = inject(benign, empty)
        assert len(merged) == len(benign)
        assert intervals == []

    def test_63_window_attack_marks_63_windows(self):
        benign = gen_benign_port(profile(rate=30.0), 23, (0.0, 1440 * 60.0), "s")
        scan = gen_scan(ScanProfile(port=23, rate_per_min=750.0, n_windows=63,
                                    start=600 * 60.0, rng_seed=2))
        merged, intervals = inject(benign, scan)
        assert len(merged) == len(benign) + len(scan)
        assert np.all(np.diff(merged.ts) >= 0)
        total = sum(int((e - s) / 60) for s, e in intervals)
        assert total == 63
        assert intervals[0][0] == 600 * 60.0

    def test_offset_shifts_intervals(self):
        benign = gen_benign_port(profile(), 23, (0.0, 7200.0), "s")
        scan = gen_scan(ScanProfile(port=23, rate_per_min=100.0, n_windows=2,
                                    start=0.0, rng_seed=3))
        merged, intervals = inject(benign, scan, offset=3600.0)
        assert intervals[0][0] == 3600.0

    def test_outside_range_warns(self):
        benign = gen_benign_port(profile(), 23, (0.0, 600.0), "s")
        scan = gen_scan(ScanProfile(port=23, rate_per_min=100.0, n_windows=2,
                                    start=10_000.0, rng_seed=3))
        with pytest.warns(UserWarning, match="outside"):
            inject(benign, scan)

    def test_record_path(self):
        recs = [
            ConnRecord(ts=float(i * 30), uid=f"b{i}", orig_ip="10.0.0.1", resp_ip="9.9.9.9",
                       orig_port=1, resp_port=23, proto="tcp", conn_state="SF")
            for i in range(10)
        ]
        attack = [
            ConnRecord(ts=5.0, uid="a0", orig_ip="10.0.0.2", resp_ip="8.8.8.8",
                       orig_port=1, resp_port=23, proto="tcp", conn_state="S0")
        ]
        merged, intervals = inject(recs, attack, offset=60.0)
        assert len(merged) == 11
        assert intervals == [(60.0, 120.0)]
        assert [r.ts for r in merged] == sorted(r.ts for r in merged)


def test_attack_intervals_merge_consecutive():
    ts = np.array([5.0, 65.0, 300.0])
    assert attack_intervals(ts, 60.0) == [(0.0, 120.0), (300.0, 360.0)]


class TestProfileFiles:
    def test_benign_toml_round_trip(self, tmp_path):
        text = """
kind = "benign"
seed = 21

[ports.23]
rate_per_min = 12.5
diurnal_amplitude = 0.1
duration_lognorm = [2.0, 0.5]
state_probs = {SF = 0.9, S0 = 0.1}
internal_hosts = 10
external_hosts = 50
new_external_prob = 0.05
"""
        path = tmp_path / "p.toml"
        path.write_text(text)
        prof = load_profile(path)
        assert isinstance(prof, BenignProfile)
        assert prof.rng_seed == 21
        act = prof.ports[23]
        assert act.rate_per_min == 12.5
        assert act.duration_lognorm == (2.0, 0.5)
        assert act.state_probs["SF"] == 0.9

    def test_scan_toml(self, tmp_path):
        path = tmp_path / "scan.toml"
        path.write_text('kind = "scan"\nport = 445\nrate_per_min = 99.0\nn_windows = 5\nseed = 3\n')
        prof = load_profile(path)
        assert isinstance(prof, ScanProfile)
        assert prof.port == 445 and prof.rate_per_min == 99.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            profile_from_dict({"kind": "replay"})

    def test_state_probs_must_sum_to_one(self):
        with pytest.raises(ValueError):
            PortActivity(state_probs={"SF": 0.5, "S0": 0.1})
