"""Ready-made two-network scenario configurations.

The default pair of site profiles differs mildly (seeds, rates, volume
scales); the "shifted" variant moves site B's duration/byte/packet
distributions far from site A's while keeping the structural traffic shape
(state mix, rates, endpoint churn) comparable, which is the regime where
distance-based weight adaptation pays off.
"""

from __future__ import annotations

from dataclasses import replace

from .scenario import AttackConfig, ScenarioConfig, SiteSetup
from .synth import DEFAULT_STATE_PROBS, BenignProfile, PortActivity

MONITORED_PORTS = (23, 445, 22, 80, 443)

_BASE_RATES = {23: 40.0, 445: 50.0, 22: 45.0, 80: 70.0, 443: 75.0}

_BASE_STATE_PROBS = {
    "SF": 0.90, "S0": 0.008, "S1": 0.015, "REJ": 0.008, "S2": 0.008,
    "S3": 0.008, "RSTO": 0.012, "RSTR": 0.012, "RSTOS0": 0.005, "RSTRH": 0.004,
    "SH": 0.004, "SHR": 0.004, "OTH": 0.012,
}

_SHIFTED_STATE_PROBS = {
    "SF": 0.875, "S0": 0.01, "S1": 0.018, "REJ": 0.01, "S2": 0.01,
    "S3": 0.01, "RSTO": 0.015, "RSTR": 0.015, "RSTOS0": 0.006, "RSTRH": 0.005,
    "SH": 0.005, "SHR": 0.005, "OTH": 0.016,
}


def _activity(port: int, **over) -> PortActivity:
    base = dict(
        rate_per_min=_BASE_RATES[port],
        diurnal_amplitude=0.25,
        diurnal_phase=0.3 * (port % 7),
        duration_lognorm=(3.0, 1.0),
        orig_bytes_lognorm=(6.0, 1.2),
        resp_bytes_lognorm=(7.0, 1.5),
        orig_pkts_lognorm=(2.0, 0.8),
        resp_pkts_lognorm=(2.3, 0.9),
        state_probs=dict(_BASE_STATE_PROBS),
        internal_hosts=500,
        external_hosts=2000,
        new_external_prob=0.008,
    )
    base.update(over)
    return PortActivity(**base)


def net_a_profile(seed: int = 11) -> BenignProfile:
    return BenignProfile(
        ports={p: _activity(p) for p in MONITORED_PORTS}, rng_seed=seed)


def net_b_profile(seed: int = 511, shifted: bool = False) -> BenignProfile:
    ports = {}
    for p in MONITORED_PORTS:
        if shifted:
            ports[p] = _activity(
                p,
                rate_per_min=_BASE_RATES[p] * 1.05,
                diurnal_phase=0.3 * (p % 7) + 1.1,
                duration_lognorm=(4.1, 1.7),
                orig_bytes_lognorm=(6.9, 2.0),
                resp_bytes_lognorm=(8.0, 2.3),
                orig_pkts_lognorm=(2.5, 1.2),
                resp_pkts_lognorm=(2.8, 1.4),
                state_probs=dict(_SHIFTED_STATE_PROBS),
                internal_hosts=700,
                external_hosts=2500,
                new_external_prob=0.009,
            )
        else:
            ports[p] = _activity(
                p,
                rate_per_min=_BASE_RATES[p] * 1.08,
                diurnal_phase=0.3 * (p % 7) + 0.4,
                duration_lognorm=(3.15, 1.05),
                orig_bytes_lognorm=(6.2, 1.25),
                resp_bytes_lognorm=(7.2, 1.55),
                internal_hosts=550,
                external_hosts=2200,
            )
    return BenignProfile(ports=ports, rng_seed=seed)


def default_scenario(shifted: bool = False, **overrides) -> ScenarioConfig:
    """One week of training, one test day, fast attack at A, fast and 128x
    slowed attacks at B, all four strategies on five monitored ports."""
    cfg = ScenarioConfig(
        net_a=SiteSetup(profile=net_a_profile(), seed=11, site_id="net-a"),
        net_b=SiteSetup(profile=net_b_profile(shifted=shifted), seed=511, site_id="net-b"),
        attack=AttackConfig(ports=MONITORED_PORTS),
    )
    return replace(cfg, **overrides) if overrides else cfg
