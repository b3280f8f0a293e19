"""Per-port, per-minute traffic featurization of connection records.

Each monitored port gets one row per time window holding 35 statistics:
traffic volume and endpoint-novelty counts, duration aggregates, byte/packet
aggregates, and per-connection-state counts. The column order below is a wire
contract shared by models, weight vectors, and moment summaries.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np

from .connlog import (
    CONN_STATES,
    ConnRecord,
    IpNamespace,
    RecordBatch,
    SiteConfig,
    records_to_batch,
)

# Canonical feature order (wire contract).
FEATURE_NAMES: tuple[str, ...] = (
    # traffic
    "n_conns",
    "n_distinct_internal_ips",
    "n_distinct_external_ips",
    "n_new_external_ips",
    # duration
    "dur_max",
    "dur_min",
    "dur_var",
    "dur_mean",
    # bytes / packets
    "orig_bytes_max", "orig_bytes_var", "orig_bytes_mean",
    "resp_bytes_max", "resp_bytes_var", "resp_bytes_mean",
    "orig_pkts_max", "orig_pkts_var", "orig_pkts_mean",
    "resp_pkts_max", "resp_pkts_var", "resp_pkts_mean",
    "n_conns_zero_resp_bytes",
    # connection states
    *(f"state_{s}" for s in CONN_STATES),
    "n_failed_conns",
)
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 35
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}

# Zeek states counted as failed: unanswered, rejected, reset or half-open.
FAILED_STATES = ("S0", "REJ", "RSTO", "RSTR", "RSTOS0", "RSTRH", "SH", "SHR")
_FAILED_IDX = np.array([CONN_STATES.index(s) for s in FAILED_STATES])

LABEL_BENIGN, LABEL_MALICIOUS, LABEL_UNLABELED = 0, 1, 2
LABEL_NAMES = ("benign", "malicious", "unlabeled")


@dataclass(frozen=True)
class FeatureVector:
    """Feature values for one (port, window) pair."""

    port: int
    window_start: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} features, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", v)

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_INDEX[name]])


@dataclass
class FeatureMatrix:
    """Row-per-window feature table for one port, sorted by window start."""

    port: int
    window_starts: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    window_seconds: int = 60

    def __post_init__(self):
        self.window_starts = np.asarray(self.window_starts, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        n = len(self.window_starts)
        if self.values.shape != (n, N_FEATURES):
            raise ValueError(f"values shape {self.values.shape} != ({n}, {N_FEATURES})")
        if self.labels.shape != (n,):
            raise ValueError("labels length mismatch")
        if n > 1:
            d = np.diff(self.window_starts)
            if not np.all(d > 0):
                raise ValueError("window_starts must be strictly increasing")

    def __len__(self) -> int:
        return len(self.window_starts)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, FEATURE_INDEX[name]]

    def vector(self, i: int) -> FeatureVector:
        return FeatureVector(self.port, float(self.window_starts[i]), self.values[i])

    def with_labels(self, labels: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(
            self.port, self.window_starts.copy(), self.values.copy(),
            np.asarray(labels, dtype=np.int8), self.window_seconds,
        )

    @classmethod
    def concat(cls, parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        port = parts[0].port
        w = parts[0].window_seconds
        if any(p.port != port or p.window_seconds != w for p in parts):
            raise ValueError("mismatched port or window size")
        return cls(
            port,
            np.concatenate([p.window_starts for p in parts]),
            np.vstack([p.values for p in parts]),
            np.concatenate([p.labels for p in parts]),
            w,
        )


@dataclass
class FeaturizerState:
    """Carry-over state between featurize calls on one stream.

    Tracks, per port, the set of external IP ids already observed (novelty
    horizon spans the whole stream, training history included) and the next
    window expected, so chunked featurization matches a single pass when
    chunk boundaries fall on window boundaries.
    """

    seen_external: dict[int, np.ndarray] = field(default_factory=dict)
    next_window: Optional[float] = None
    namespace: Optional[IpNamespace] = None

    def seen(self, port: int) -> np.ndarray:
        return self.seen_external.get(port, np.empty(0, np.uint64))

    def copy(self) -> "FeaturizerState":
        st = FeaturizerState(
            {p: a.copy() for p, a in self.seen_external.items()},
            self.next_window,
            self.namespace,
        )
        return st


Source = Union[RecordBatch, Iterable[ConnRecord]]


def featurize(
    source: Source,
    config: SiteConfig,
    state: Optional[FeaturizerState] = None,
    time_range: Optional[tuple[float, float]] = None,
    reorder_buffer: float = 300.0,
) -> dict[int, FeatureMatrix]:
    """Aggregate records into one FeatureMatrix per monitored port.

    All ports share the same row range: every window in ``time_range``
    (default: [min ts, max ts] of the stream, or continuing from
    ``state.next_window``) gets a row, all-zero when the port saw no traffic.
    Raises ``ValueError`` when input is out of order beyond ``reorder_buffer``
    seconds, naming the offending timestamp.
    """
    if state is None:
        state = FeaturizerState()
    if isinstance(source, RecordBatch):
        batch = source
    else:
        if state.namespace is None:
            state.namespace = IpNamespace(config)
        batch = records_to_batch(source, state.namespace)

    w = float(config.window_seconds)
    batch = _check_order(batch, reorder_buffer)

    if time_range is not None:
        t0 = math.floor(time_range[0] / w) * w
        n_windows = max(0, math.ceil((time_range[1] - t0) / w))
    elif len(batch):
        lo = float(batch.ts.min())
        if state.next_window is not None:
            lo = min(lo, state.next_window)
        t0 = math.floor(lo / w) * w
        t_last = math.floor(float(batch.ts.max()) / w) * w
        n_windows = int(round((t_last - t0) / w)) + 1
    elif state.next_window is not None:
        t0, n_windows = state.next_window, 0
    else:
        t0, n_windows = 0.0, 0

    if state.next_window is not None and len(batch):
        bad = batch.ts < state.next_window
        if np.any(bad):
            ts_bad = float(batch.ts[bad][0])
            raise ValueError(
                f"record at ts={ts_bad} precedes already-emitted windows "
                f"(next window starts at {state.next_window})"
            )

    out: dict[int, FeatureMatrix] = {}
    for port in config.monitored_ports:
        sub = batch.take(batch.resp_port == np.uint32(port)) if len(batch) else batch
        if time_range is not None and len(sub):
            inside = (sub.ts >= t0) & (sub.ts < t0 + n_windows * w)
            sub = sub.take(inside)
        values, seen = _port_features(sub, t0, w, n_windows, state.seen(port))
        state.seen_external[port] = seen
        starts = t0 + w * np.arange(n_windows)
        out[port] = FeatureMatrix(
            port, starts, values,
            np.full(n_windows, LABEL_UNLABELED, np.int8), int(w),
        )
    state.next_window = t0 + n_windows * w if n_windows else state.next_window
    return out


def _check_order(batch: RecordBatch, reorder_buffer: float) -> RecordBatch:
    if len(batch) < 2:
        return batch
    ts = batch.ts
    running_max = np.maximum.accumulate(ts)
    lag = running_max - ts
    if np.any(lag > reorder_buffer):
        i = int(np.argmax(lag > reorder_buffer))
        raise ValueError(
            f"record at ts={ts[i]} is {lag[i]:.1f}s out of order "
            f"(reorder buffer {reorder_buffer}s)"
        )
    if np.any(np.diff(ts) < 0):
        batch = batch.sorted_by_ts()
    return batch


def _port_features(
    batch: RecordBatch, t0: float, w: float, n_windows: int, seen: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-window statistics for one port's records."""
    F = np.zeros((n_windows, N_FEATURES))
    n = len(batch)
    if n == 0 or n_windows == 0:
        return F, seen

    widx = np.floor((batch.ts - t0) / w).astype(np.int64)
    counts = np.bincount(widx, minlength=n_windows).astype(float)
    F[:, FEATURE_INDEX["n_conns"]] = counts

    # Endpoint distinctness: consider both sides of each connection.
    ips = np.concatenate([batch.orig_ip, batch.resp_ip])
    internal = np.concatenate([batch.orig_internal, batch.resp_internal])
    wd = np.concatenate([widx, widx])

    F[:, FEATURE_INDEX["n_distinct_internal_ips"]] = _distinct_per_window(
        ips[internal], wd[internal], n_windows)
    ext_ips, ext_wd = ips[~internal], wd[~internal]
    F[:, FEATURE_INDEX["n_distinct_external_ips"]] = _distinct_per_window(
        ext_ips, ext_wd, n_windows)

    new_counts, seen = _new_externals(ext_ips, ext_wd, n_windows, seen)
    F[:, FEATURE_INDEX["n_new_external_ips"]] = new_counts

    for prefix, col in (
        ("dur", batch.duration),
        ("orig_bytes", batch.orig_bytes), ("resp_bytes", batch.resp_bytes),
        ("orig_pkts", batch.orig_pkts), ("resp_pkts", batch.resp_pkts),
    ):
        vals = np.nan_to_num(col, nan=0.0)
        mx, mn, var, mean = _window_stats(vals, widx, counts, n_windows)
        F[:, FEATURE_INDEX[f"{prefix}_max"]] = mx
        if prefix == "dur":
            F[:, FEATURE_INDEX["dur_min"]] = mn
        F[:, FEATURE_INDEX[f"{prefix}_var"]] = var
        F[:, FEATURE_INDEX[f"{prefix}_mean"]] = mean

    resp0 = np.nan_to_num(batch.resp_bytes, nan=0.0) == 0
    F[:, FEATURE_INDEX["n_conns_zero_resp_bytes"]] = np.bincount(
        widx[resp0], minlength=n_windows)

    state_counts = np.bincount(
        widx * len(CONN_STATES) + batch.conn_state,
        minlength=n_windows * len(CONN_STATES),
    ).reshape(n_windows, len(CONN_STATES))
    s0_col = FEATURE_INDEX["state_S0"]
    F[:, s0_col:s0_col + len(CONN_STATES)] = state_counts
    F[:, FEATURE_INDEX["n_failed_conns"]] = state_counts[:, _FAILED_IDX].sum(axis=1)
    return F, seen


def _window_stats(vals, widx, counts, n_windows):
    """Max, min, population variance and mean per window; zeros when empty.

    Values are sorted within each window first so results do not depend on
    record order or chunk boundaries.
    """
    order = np.lexsort((vals, widx))
    sv = vals[order]
    counts_int = counts.astype(np.int64)
    ends = np.cumsum(counts_int)
    seg_start = ends - counts_int
    nonempty = np.flatnonzero(counts_int > 0)
    mx = np.zeros(n_windows)
    mn = np.zeros(n_windows)
    mean = np.zeros(n_windows)
    var = np.zeros(n_windows)
    if len(nonempty):
        lo = seg_start[nonempty]
        hi = ends[nonempty] - 1
        mx[nonempty] = sv[hi]
        mn[nonempty] = sv[lo]
        sums = np.add.reduceat(sv, lo)
        sumsq = np.add.reduceat(sv * sv, lo)
        c = counts[nonempty]
        m = sums / c
        mean[nonempty] = m
        var[nonempty] = np.maximum(sumsq / c - m * m, 0.0)
    return mx, mn, var, mean


def _distinct_per_window(ips, wd, n_windows):
    if len(ips) == 0:
        return np.zeros(n_windows)
    order = np.lexsort((ips, wd))
    si, sw = ips[order], wd[order]
    first = np.ones(len(si), dtype=bool)
    first[1:] = (si[1:] != si[:-1]) | (sw[1:] != sw[:-1])
    return np.bincount(sw[first], minlength=n_windows).astype(float)


def _new_externals(ips, wd, n_windows, seen):
    """Count externals first observed in each window, given prior history."""
    if len(ips) == 0:
        return np.zeros(n_windows), seen
    order = np.lexsort((wd, ips))
    si, sw = ips[order], wd[order]
    first = np.ones(len(si), dtype=bool)
    first[1:] = si[1:] != si[:-1]
    cand_ips, cand_wd = si[first], sw[first]
    if len(seen):
        novel = ~np.isin(cand_ips, seen)
        cand_ips, cand_wd = cand_ips[novel], cand_wd[novel]
    new_counts = np.bincount(cand_wd, minlength=n_windows).astype(float)
    updated = np.union1d(seen, si[first]) if len(seen) else si[first].astype(np.uint64)
    return new_counts, updated


def assign_labels(
    matrix: FeatureMatrix, intervals: Iterable[tuple[float, float]]
) -> FeatureMatrix:
    """Label rows whose window intersects any [start, end) interval malicious;
    all other rows benign. Intervals with no overlap draw a warning."""
    labels = np.full(len(matrix), LABEL_BENIGN, np.int8)
    w = matrix.window_seconds
    ws = matrix.window_starts
    for start, end in intervals:
        hit = (ws + w > start) & (ws < end)
        if not np.any(hit):
            warnings.warn(
                f"interval [{start}, {end}) lies outside the matrix time range; ignored",
                stacklevel=2,
            )
            continue
        labels[hit] = LABEL_MALICIOUS
    return matrix.with_labels(labels)


# ---------------------------------------------------------------------------
# CSV persistence

CSV_HEADER = "window_start,port,label," + ",".join(FEATURE_NAMES)


def save_matrix_csv(matrices: Union[FeatureMatrix, dict, Sequence], out: IO[str]) -> None:
    if isinstance(matrices, FeatureMatrix):
        parts = [matrices]
    elif isinstance(matrices, dict):
        parts = [matrices[k] for k in sorted(matrices)]
    else:
        parts = list(matrices)
    out.write(CSV_HEADER + "\n")
    for m in parts:
        for i in range(len(m)):
            vals = ",".join(repr(float(v)) for v in m.values[i])
            out.write(f"{float(m.window_starts[i])!r},{m.port},{LABEL_NAMES[m.labels[i]]},{vals}\n")


def load_matrix_csv(src: IO[str]) -> dict[int, FeatureMatrix]:
    header = src.readline().rstrip("\n")
    if header != CSV_HEADER:
        raise ValueError("unrecognized feature CSV header")
    rows: dict[int, list] = {}
    for line in src:
        line = line.rstrip("\n")
        if not line:
            continue
        cells = line.split(",")
        port = int(cells[1])
        rows.setdefault(port, []).append(cells)
    out = {}
    for port, cells in rows.items():
        starts = np.array([float(c[0]) for c in cells])
        labels = np.array([LABEL_NAMES.index(c[2]) for c in cells], np.int8)
        values = np.array([[float(x) for x in c[3:]] for c in cells])
        order = np.argsort(starts)
        starts, labels, values = starts[order], labels[order], values[order]
        wsec = 60
        if len(starts) > 1:
            wsec = int(np.min(np.diff(starts)))
        out[port] = FeatureMatrix(port, starts, values, labels, wsec)
    return out
