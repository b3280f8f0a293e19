"""Synthetic two-network traffic: benign background generation, scan-phase
attack traces, rate-slowing by connection subsampling, and trace injection.

Generation is columnar (RecordBatch) and deterministic per seed. Benign
traffic per port follows a diurnally modulated Poisson arrival process with
log-normal duration/byte/packet marks and a configurable connection-state
mix; scans hammer one port with unanswered (S0) connections to previously
unseen destinations.
"""

from __future__ import annotations

import math
import sys
import warnings
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .connlog import CONN_STATES, PROTO_INDEX, ConnRecord, RecordBatch, STATE_INDEX

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DAY = 86400.0

# Address layout for generated ids: low 32 bits render as IPv4, externals are
# namespaced by port in the high bits so per-port novelty stays independent.
_INTERNAL_BASE = 0x0A000000  # 10.0.0.0/8
_EXTERNAL_BASE = 0xCB000000  # 203.0.0.0/8
_VICTIM_BASE = 0xC6000000    # 198.0.0.0/8

DEFAULT_STATE_PROBS: dict[str, float] = {
    "SF": 0.85, "S0": 0.02, "S1": 0.02, "REJ": 0.02, "S2": 0.01, "S3": 0.01,
    "RSTO": 0.02, "RSTR": 0.02, "RSTOS0": 0.005, "RSTRH": 0.005,
    "SH": 0.005, "SHR": 0.005, "OTH": 0.01,
}


@dataclass(frozen=True)
class PortActivity:
    """Benign traffic shape for one monitored port."""

    rate_per_min: float = 60.0
    diurnal_amplitude: float = 0.3
    diurnal_phase: float = 0.0
    duration_lognorm: tuple[float, float] = (3.4, 1.0)
    orig_bytes_lognorm: tuple[float, float] = (6.0, 1.2)
    resp_bytes_lognorm: tuple[float, float] = (7.0, 1.5)
    orig_pkts_lognorm: tuple[float, float] = (2.0, 0.8)
    resp_pkts_lognorm: tuple[float, float] = (2.3, 0.9)
    state_probs: Mapping[str, float] = field(
        default_factory=lambda: dict(DEFAULT_STATE_PROBS))
    internal_hosts: int = 500
    external_hosts: int = 2000
    new_external_prob: float = 0.02
    proto: str = "tcp"

    def __post_init__(self):
        if not self.rate_per_min > 0:
            raise ValueError("rate_per_min must be positive")
        if not 0 <= self.diurnal_amplitude <= 1:
            raise ValueError("diurnal_amplitude must be in [0, 1]")
        if self.internal_hosts < 1 or self.external_hosts < 1:
            raise ValueError("host pools must be >= 1")
        unknown = set(self.state_probs) - set(CONN_STATES)
        if unknown:
            raise ValueError(f"unknown states in state_probs: {sorted(unknown)}")
        total = sum(self.state_probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"state probabilities must sum to 1 (got {total})")
        if not 0 <= self.new_external_prob <= 1:
            raise ValueError("new_external_prob must be a probability")

    def state_prob_vector(self) -> np.ndarray:
        return np.array([self.state_probs.get(s, 0.0) for s in CONN_STATES])


@dataclass(frozen=True)
class BenignProfile:
    """Per-port benign activity plus the generator seed."""

    ports: Mapping[int, PortActivity]
    rng_seed: int = 0

    def __post_init__(self):
        if not self.ports:
            raise ValueError("profile must cover at least one port")
        object.__setattr__(self, "ports", dict(self.ports))


@dataclass(frozen=True)
class ScanProfile:
    """Scan-phase attack trace shape (unanswered connections, fresh victims)."""

    port: int
    rate_per_min: float = 750.0
    n_infected: int = 10
    victim_space: int = 60000
    state: str = "S0"
    scan_duration: float = 3.0
    start: float = 0.0
    n_windows: int = 63
    window_seconds: int = 60
    rng_seed: int = 0

    def __post_init__(self):
        if not self.rate_per_min > 0:
            raise ValueError("rate_per_min must be positive")
        if self.n_windows < 1:
            raise ValueError("n_windows must be >= 1")
        if self.n_infected < 1 or self.victim_space < 1:
            raise ValueError("host pools must be >= 1")
        if self.state not in STATE_INDEX:
            raise ValueError(f"unknown state {self.state!r}")


def _site_key(site_id: str) -> int:
    return zlib.crc32(site_id.encode("utf-8"))


def _empty_like(n: int, port: int, proto: str) -> RecordBatch:
    return RecordBatch(
        ts=np.empty(n),
        orig_ip=np.empty(n, np.uint64), resp_ip=np.empty(n, np.uint64),
        orig_port=np.empty(n, np.uint32),
        resp_port=np.full(n, port, np.uint32),
        proto=np.full(n, PROTO_INDEX[proto], np.uint8),
        duration=np.empty(n), orig_bytes=np.empty(n), resp_bytes=np.empty(n),
        orig_pkts=np.empty(n), resp_pkts=np.empty(n),
        conn_state=np.empty(n, np.uint8),
        orig_internal=np.ones(n, bool), resp_internal=np.zeros(n, bool),
    )


def gen_benign_port(
    profile: BenignProfile, port: int, time_range: tuple[float, float], site_id: str
) -> RecordBatch:
    """Benign traffic for one port over [t0, t1), time-sorted, seed-determined."""
    t0, t1 = time_range
    if not t1 > t0:
        raise ValueError("time range must be non-empty")
    act = profile.ports[port]
    rng = np.random.default_rng(
        np.random.SeedSequence([profile.rng_seed, _site_key(site_id), port, 0xBE]))

    w = 60.0
    n_windows = int(math.ceil((t1 - t0) / w))
    starts = t0 + w * np.arange(n_windows)
    lam = act.rate_per_min * (
        1.0 + act.diurnal_amplitude * np.sin(
            2.0 * math.pi * (starts % DAY) / DAY + act.diurnal_phase)
    )
    counts = rng.poisson(np.maximum(lam, 0.0))
    n = int(counts.sum())
    b = _empty_like(n, port, act.proto)

    ts = np.repeat(starts, counts) + rng.uniform(0.0, w, n)
    np.minimum(ts, np.nextafter(t1, -np.inf), out=ts)
    order = np.argsort(ts, kind="stable")
    b.ts[:] = ts[order]

    b.orig_port[:] = rng.integers(1024, 65536, n)
    b.orig_ip[:] = _INTERNAL_BASE + rng.integers(0, act.internal_hosts, n)

    # External pool grows by churn: each connection is brand-new with small
    # probability, otherwise drawn from the pool as grown so far.
    new_mask = rng.random(n) < act.new_external_prob
    grown = act.external_hosts + np.cumsum(new_mask)
    pool_idx = rng.integers(0, np.maximum(grown - new_mask, 1))
    ext_idx = np.where(new_mask, grown - 1, pool_idx)
    b.resp_ip[:] = (np.uint64(port) << np.uint64(32)) | (
        np.uint64(_EXTERNAL_BASE) + ext_idx.astype(np.uint64))

    states = rng.choice(len(CONN_STATES), size=n, p=act.state_prob_vector())
    b.conn_state[:] = states.astype(np.uint8)

    b.duration[:] = rng.lognormal(*act.duration_lognorm, n)
    b.orig_bytes[:] = np.round(rng.lognormal(*act.orig_bytes_lognorm, n))
    b.resp_bytes[:] = np.round(rng.lognormal(*act.resp_bytes_lognorm, n))
    b.orig_pkts[:] = np.maximum(1, np.round(rng.lognormal(*act.orig_pkts_lognorm, n)))
    b.resp_pkts[:] = np.maximum(1, np.round(rng.lognormal(*act.resp_pkts_lognorm, n)))

    s0 = b.conn_state == STATE_INDEX["S0"]
    rej = b.conn_state == STATE_INDEX["REJ"]
    b.duration[s0 | rej] = np.nan
    b.orig_bytes[s0 | rej] = 0.0
    b.resp_bytes[s0] = np.nan
    b.resp_bytes[rej] = 0.0
    b.orig_pkts[s0 | rej] = 1.0
    b.resp_pkts[s0] = 0.0
    b.resp_pkts[rej] = 1.0
    return b


def gen_benign(
    profile: BenignProfile, time_range: tuple[float, float], site_id: str = "site"
) -> RecordBatch:
    """All monitored ports' benign traffic merged into one time-sorted batch."""
    parts = [
        gen_benign_port(profile, port, time_range, site_id)
        for port in sorted(profile.ports)
    ]
    return RecordBatch.concat(parts).sorted_by_ts()


def gen_scan(profile: ScanProfile) -> RecordBatch:
    """Scan trace: Poisson(rate) connections per window for n_windows, victims
    drawn without replacement until the space is exhausted."""
    rng = np.random.default_rng(
        np.random.SeedSequence([profile.rng_seed, profile.port, 0x5C]))
    w = float(profile.window_seconds)
    starts = profile.start + w * np.arange(profile.n_windows)
    counts = rng.poisson(profile.rate_per_min * (w / 60.0), profile.n_windows)
    n = int(counts.sum())
    b = _empty_like(n, profile.port, "tcp")

    ts = np.repeat(starts, counts) + rng.uniform(0.0, w, n)
    b.ts[:] = np.sort(ts, kind="stable")

    victims = np.empty(n, np.int64)
    filled = 0
    while filled < n:
        perm = rng.permutation(profile.victim_space)
        take = min(n - filled, profile.victim_space)
        victims[filled:filled + take] = perm[:take]
        filled += take
    b.resp_ip[:] = (np.uint64(profile.port) << np.uint64(32)) | (
        np.uint64(_VICTIM_BASE) + victims.astype(np.uint64))

    b.orig_ip[:] = _INTERNAL_BASE + rng.integers(0, profile.n_infected, n)
    b.orig_port[:] = rng.integers(1024, 65536, n)
    b.conn_state[:] = STATE_INDEX[profile.state]
    b.duration[:] = profile.scan_duration
    b.orig_bytes[:] = 0.0
    b.resp_bytes[:] = 0.0
    b.orig_pkts[:] = 1.0
    b.resp_pkts[:] = 0.0
    return b


BatchOrRecords = Union[RecordBatch, Sequence[ConnRecord]]


def slow_variant(trace: BatchOrRecords, factor: float, rng_seed: int = 0) -> BatchOrRecords:
    """Retain each connection independently with probability 1/factor.

    Timestamps are unchanged; the output is a subsequence of the input."""
    if factor < 1:
        raise ValueError("slowdown factor must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x51]))
    if isinstance(trace, RecordBatch):
        keep = rng.random(len(trace)) < 1.0 / factor
        return trace.take(keep)
    records = list(trace)
    keep = rng.random(len(records)) < 1.0 / factor
    return [r for r, k in zip(records, keep) if k]


def attack_intervals(ts: np.ndarray, window_seconds: float) -> list[tuple[float, float]]:
    """Maximal [start, end) window intervals containing at least one record."""
    if len(ts) == 0:
        return []
    w = float(window_seconds)
    ws = np.unique(np.floor(ts / w) * w)
    breaks = np.flatnonzero(np.diff(ws) > w)
    bounds = np.concatenate([[0], breaks + 1, [len(ws)]])
    return [
        (float(ws[bounds[i]]), float(ws[bounds[i + 1] - 1] + w))
        for i in range(len(bounds) - 1)
    ]


def inject(
    benign: BatchOrRecords,
    attack: BatchOrRecords,
    offset: float = 0.0,
    window_seconds: float = 60.0,
) -> tuple[BatchOrRecords, list[tuple[float, float]]]:
    """Merge an attack trace (timestamps shifted by ``offset``) into benign
    traffic; returns the merged, time-sorted stream and the window intervals
    that contain at least one attack record."""
    if isinstance(benign, RecordBatch):
        shifted = attack.take(slice(None))
        shifted.ts = shifted.ts + offset
        if len(benign) and len(shifted):
            if shifted.ts.min() < benign.ts.min() or shifted.ts.max() > benign.ts.max():
                warnings.warn("attack trace extends outside the benign time range",
                              stacklevel=2)
        merged = RecordBatch.concat([benign, shifted]).sorted_by_ts()
        return merged, attack_intervals(shifted.ts, window_seconds)

    benign_list = list(benign)
    attack_list = [replace(r, ts=r.ts + offset) for r in attack]
    if benign_list and attack_list:
        b_ts = [r.ts for r in benign_list]
        a_ts = [r.ts for r in attack_list]
        if min(a_ts) < min(b_ts) or max(a_ts) > max(b_ts):
            warnings.warn("attack trace extends outside the benign time range",
                          stacklevel=2)
    merged_list = sorted(benign_list + attack_list, key=lambda r: r.ts)
    return merged_list, attack_intervals(
        np.array([r.ts for r in attack_list]), window_seconds)


# ---------------------------------------------------------------------------
# Declarative profile files (TOML)


def _activity_from_table(tbl: Mapping) -> PortActivity:
    kwargs = dict(tbl)
    for key in ("duration_lognorm", "orig_bytes_lognorm", "resp_bytes_lognorm",
                "orig_pkts_lognorm", "resp_pkts_lognorm"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return PortActivity(**kwargs)


def profile_from_dict(doc: Mapping) -> Union[BenignProfile, ScanProfile]:
    kind = doc.get("kind", "benign")
    if kind == "benign":
        ports = {
            int(p): _activity_from_table(tbl)
            for p, tbl in doc.get("ports", {}).items()
        }
        return BenignProfile(ports=ports, rng_seed=int(doc.get("seed", 0)))
    if kind == "scan":
        fields = {k: doc[k] for k in (
            "port", "rate_per_min", "n_infected", "victim_space", "state",
            "scan_duration", "start", "n_windows", "window_seconds",
        ) if k in doc}
        return ScanProfile(rng_seed=int(doc.get("seed", 0)), **fields)
    raise ValueError(f"unknown profile kind: {kind!r}")


def load_profile(path) -> Union[BenignProfile, ScanProfile]:
    with open(path, "rb") as fh:
        return profile_from_dict(tomllib.load(fh))
