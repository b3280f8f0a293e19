"""Connection-log ingestion: canonical records, Zeek TSV / JSON-lines parsing,
serialization back to Zeek TSV, and internal/external endpoint classification.

Two representations are used throughout the toolkit:

* ``ConnRecord`` -- one immutable connection entry, used on file and CLI paths.
* ``RecordBatch`` -- columnar numpy arrays for the same fields, used by the
  synthetic-traffic harness and the featurizer fast path.
"""

from __future__ import annotations

import ipaddress
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Union

import numpy as np

# Zeek connection lifecycle summaries, in canonical (wire) order.
CONN_STATES = (
    "S0", "S1", "SF", "REJ", "S2", "S3", "RSTO", "RSTR",
    "RSTOS0", "RSTRH", "SH", "SHR", "OTH",
)
STATE_INDEX = {s: i for i, s in enumerate(CONN_STATES)}

PROTOCOLS = ("tcp", "udp", "icmp")
PROTO_INDEX = {p: i for i, p in enumerate(PROTOCOLS)}


class FormatError(ValueError):
    """Input stream is not in a recognized connection-log format."""


@dataclass(frozen=True, slots=True)
class ConnRecord:
    """One connection-log entry. Absent numeric fields stay ``None``."""

    ts: float
    uid: str
    orig_ip: str
    resp_ip: str
    orig_port: int
    resp_port: int
    proto: str
    conn_state: str
    duration: Optional[float] = None
    orig_bytes: Optional[int] = None
    resp_bytes: Optional[int] = None
    orig_pkts: Optional[int] = None
    resp_pkts: Optional[int] = None

    def __post_init__(self):
        if not (0 <= self.orig_port <= 65535 and 0 <= self.resp_port <= 65535):
            raise ValueError(f"port out of range: {self.orig_port}/{self.resp_port}")
        if self.proto not in PROTO_INDEX:
            raise ValueError(f"unknown protocol: {self.proto!r}")
        if self.conn_state not in STATE_INDEX:
            raise ValueError(f"unknown conn_state: {self.conn_state!r}")
        if self.duration is not None and not (self.duration >= 0):
            raise ValueError(f"negative duration: {self.duration}")
        for name in ("orig_bytes", "resp_bytes", "orig_pkts", "resp_pkts"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"negative {name}: {v}")


@dataclass(frozen=True)
class SiteConfig:
    """Per-site monitoring configuration.

    ``internal_prefixes`` holds CIDR prefixes; for anonymized logs an explicit
    ``internal_tokens`` set replaces prefix matching.
    """

    monitored_ports: tuple[int, ...]
    internal_prefixes: tuple[str, ...] = ()
    internal_tokens: Optional[frozenset[str]] = None
    window_seconds: int = 60

    def __post_init__(self):
        if not self.monitored_ports:
            raise ValueError("monitored_ports must be non-empty")
        if self.window_seconds <= 0:
            raise ValueError("window_seconds must be positive")
        object.__setattr__(self, "monitored_ports", tuple(int(p) for p in self.monitored_ports))
        object.__setattr__(self, "internal_prefixes", tuple(self.internal_prefixes))
        nets = tuple(ipaddress.ip_network(p) for p in self.internal_prefixes)
        object.__setattr__(self, "_networks", nets)


def is_internal(ip: str, config: SiteConfig) -> bool:
    """True iff ``ip`` matches an internal prefix (or token, in token mode).

    Never raises on parsed records: tokens that are not valid addresses are
    classified external under prefix matching.
    """
    if config.internal_tokens is not None:
        return ip in config.internal_tokens
    try:
        addr = ipaddress.ip_address(ip)
    except ValueError:
        return False
    return any(addr in net for net in config._networks)


# ---------------------------------------------------------------------------
# Parsing


class ConnLogReader:
    """Lazy record iterator over a parsed log; counts skipped malformed lines."""

    def __init__(self, lines: Iterator[str], fmt: str):
        self._lines = lines
        self.format = fmt
        self.skipped = 0

    def __iter__(self) -> Iterator[ConnRecord]:
        if self.format == "tsv":
            yield from self._iter_tsv()
        else:
            yield from self._iter_jsonl()

    def _iter_tsv(self) -> Iterator[ConnRecord]:
        sep = "\t"
        unset, empty = "-", "(empty)"
        fields: Optional[list[str]] = None
        for line in self._lines:
            line = line.rstrip("\r\n")
            if not line:
                continue
            if line.startswith("#"):
                head = line[1:].split(sep)
                if head[0] == "separator" and len(head) > 1:
                    raw = head[1]
                    sep = chr(int(raw[2:], 16)) if raw.startswith("\\x") else raw
                elif head[0] == "unset_field" and len(head) > 1:
                    unset = head[1]
                elif head[0] == "empty_field" and len(head) > 1:
                    empty = head[1]
                elif head[0] == "fields":
                    fields = head[1:]
                continue
            if fields is None:
                raise FormatError("Zeek TSV data before a #fields header")
            cols = line.split(sep)
            rec = self._record_from_map(
                dict(zip(fields, cols)), unset=unset, empty=empty
            )
            if rec is None:
                self.skipped += 1
            else:
                yield rec

    def _iter_jsonl(self) -> Iterator[ConnRecord]:
        for line in self._lines:
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not an object")
            except ValueError:
                self.skipped += 1
                continue
            rec = self._record_from_map(obj, unset=None, empty=None)
            if rec is None:
                self.skipped += 1
            else:
                yield rec

    @staticmethod
    def _record_from_map(m: dict, unset, empty) -> Optional[ConnRecord]:
        def get(key):
            v = m.get(key)
            if v is None or v == unset:
                return None
            if v == empty:
                return ""
            return v

        try:
            ts = float(get("ts"))
            duration = get("duration")
            kwargs = dict(
                ts=ts,
                uid=str(get("uid") or ""),
                orig_ip=str(get("id.orig_h")),
                resp_ip=str(get("id.resp_h")),
                orig_port=int(get("id.orig_p")),
                resp_port=int(get("id.resp_p")),
                proto=str(get("proto")),
                conn_state=str(get("conn_state")),
                duration=None if duration is None else float(duration),
            )
            for name in ("orig_bytes", "resp_bytes", "orig_pkts", "resp_pkts"):
                v = get(name)
                kwargs[name] = None if v is None else int(v)
            if get("id.orig_h") is None or get("id.resp_h") is None:
                return None
            if not math.isfinite(ts):
                return None
            return ConnRecord(**kwargs)
        except (TypeError, ValueError):
            return None


def parse_conn_log(
    source: Union[str, Path, IO], fmt: str = "auto"
) -> ConnLogReader:
    """Open a Zeek conn log (TSV or JSON-lines) as a lazy record stream.

    ``fmt`` is ``auto`` (detect by first byte: ``#`` means TSV), ``tsv`` or
    ``jsonl``. Unreadable sources raise ``OSError``; an unrecognizable format
    raises :class:`FormatError`. Malformed data lines are skipped and counted
    on the returned reader.
    """
    if isinstance(source, (str, Path)):
        fh: IO = open(source, "r", encoding="utf-8", errors="replace")
    elif hasattr(source, "read"):
        fh = source
    else:
        raise TypeError(f"unsupported source: {type(source)!r}")

    lines = _text_lines(fh)
    if fmt == "auto":
        first = next(lines, None)
        if first is None:
            return ConnLogReader(iter(()), "tsv")
        stripped = first.lstrip()
        if stripped.startswith("#"):
            fmt = "tsv"
        elif stripped.startswith("{"):
            fmt = "jsonl"
        else:
            raise FormatError(
                "cannot detect log format (expected '#' for Zeek TSV or '{' for JSON lines)"
            )
        lines = _chain_first(first, lines)
    elif fmt not in ("tsv", "jsonl"):
        raise FormatError(f"unknown format: {fmt!r}")
    return ConnLogReader(lines, fmt)


def _text_lines(fh: IO) -> Iterator[str]:
    for line in fh:
        if isinstance(line, bytes):
            yield line.decode("utf-8", errors="replace")
        else:
            yield line


def _chain_first(first: str, rest: Iterator[str]) -> Iterator[str]:
    yield first
    yield from rest


# ---------------------------------------------------------------------------
# Serialization

_TSV_FIELDS = (
    "ts", "uid", "id.orig_h", "id.orig_p", "id.resp_h", "id.resp_p", "proto",
    "duration", "orig_bytes", "resp_bytes", "conn_state", "orig_pkts", "resp_pkts",
)
_TSV_TYPES = (
    "time", "string", "addr", "port", "addr", "port", "enum",
    "interval", "count", "count", "string", "count", "count",
)


def _fmt_num(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_zeek_tsv(records: Iterable[ConnRecord], out: IO[str]) -> int:
    """Write records as Zeek-style TSV; returns the number of rows written.

    Uses shortest round-trip float formatting so parse(serialize(x)) == x.
    """
    out.write("#separator \\x09\n")
    out.write("#unset_field\t-\n")
    out.write("#empty_field\t(empty)\n")
    out.write("#fields\t" + "\t".join(_TSV_FIELDS) + "\n")
    out.write("#types\t" + "\t".join(_TSV_TYPES) + "\n")
    n = 0
    for r in records:
        row = (
            repr(r.ts), r.uid if r.uid else "(empty)", r.orig_ip, str(r.orig_port),
            r.resp_ip, str(r.resp_port), r.proto, _fmt_num(r.duration),
            _fmt_num(r.orig_bytes), _fmt_num(r.resp_bytes), r.conn_state,
            _fmt_num(r.orig_pkts), _fmt_num(r.resp_pkts),
        )
        out.write("\t".join(row) + "\n")
        n += 1
    return n


# ---------------------------------------------------------------------------
# Columnar batches


@dataclass
class RecordBatch:
    """Columnar view of connection records.

    IP columns hold opaque integer identifiers (any consistent per-stream
    numbering); ``*_internal`` flags carry the endpoint classification.
    Absent duration/bytes/packets are NaN.
    """

    ts: np.ndarray
    orig_ip: np.ndarray
    resp_ip: np.ndarray
    orig_port: np.ndarray
    resp_port: np.ndarray
    proto: np.ndarray
    duration: np.ndarray
    orig_bytes: np.ndarray
    resp_bytes: np.ndarray
    orig_pkts: np.ndarray
    resp_pkts: np.ndarray
    conn_state: np.ndarray
    orig_internal: np.ndarray
    resp_internal: np.ndarray

    _COLS = (
        "ts", "orig_ip", "resp_ip", "orig_port", "resp_port", "proto",
        "duration", "orig_bytes", "resp_bytes", "orig_pkts", "resp_pkts",
        "conn_state", "orig_internal", "resp_internal",
    )

    def __len__(self) -> int:
        return len(self.ts)

    def take(self, index) -> "RecordBatch":
        return RecordBatch(**{c: getattr(self, c)[index] for c in self._COLS})

    def sorted_by_ts(self) -> "RecordBatch":
        order = np.argsort(self.ts, kind="stable")
        return self.take(order)

    @classmethod
    def empty(cls) -> "RecordBatch":
        z = np.zeros(0)
        return cls(
            ts=z, orig_ip=np.zeros(0, np.uint64), resp_ip=np.zeros(0, np.uint64),
            orig_port=np.zeros(0, np.uint32), resp_port=np.zeros(0, np.uint32),
            proto=np.zeros(0, np.uint8), duration=z.copy(), orig_bytes=z.copy(),
            resp_bytes=z.copy(), orig_pkts=z.copy(), resp_pkts=z.copy(),
            conn_state=np.zeros(0, np.uint8), orig_internal=np.zeros(0, bool),
            resp_internal=np.zeros(0, bool),
        )

    @classmethod
    def concat(cls, batches: Iterable["RecordBatch"]) -> "RecordBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty()
        return cls(**{
            c: np.concatenate([getattr(b, c) for b in batches]) for c in cls._COLS
        })


class IpNamespace:
    """Stable string-token to integer-id mapping with cached classification."""

    def __init__(self, config: SiteConfig):
        self.config = config
        self._ids: dict[str, int] = {}
        self._internal: dict[str, bool] = {}
        self._tokens: list[str] = []

    def lookup(self, token: str) -> tuple[int, bool]:
        got = self._ids.get(token)
        if got is None:
            got = len(self._tokens)
            self._ids[token] = got
            self._tokens.append(token)
            self._internal[token] = is_internal(token, self.config)
        return got, self._internal[token]

    def token(self, ip_id: int) -> str:
        return self._tokens[ip_id]


def records_to_batch(records: Iterable[ConnRecord], namespace: IpNamespace) -> RecordBatch:
    """Convert records to a columnar batch using ``namespace`` for IP ids."""
    recs = list(records)
    n = len(recs)
    nan = float("nan")
    b = RecordBatch(
        ts=np.empty(n), orig_ip=np.empty(n, np.uint64), resp_ip=np.empty(n, np.uint64),
        orig_port=np.empty(n, np.uint32), resp_port=np.empty(n, np.uint32),
        proto=np.empty(n, np.uint8), duration=np.empty(n), orig_bytes=np.empty(n),
        resp_bytes=np.empty(n), orig_pkts=np.empty(n), resp_pkts=np.empty(n),
        conn_state=np.empty(n, np.uint8), orig_internal=np.empty(n, bool),
        resp_internal=np.empty(n, bool),
    )
    for i, r in enumerate(recs):
        oid, oint = namespace.lookup(r.orig_ip)
        rid, rint = namespace.lookup(r.resp_ip)
        b.ts[i] = r.ts
        b.orig_ip[i] = oid
        b.resp_ip[i] = rid
        b.orig_port[i] = r.orig_port
        b.resp_port[i] = r.resp_port
        b.proto[i] = PROTO_INDEX[r.proto]
        b.duration[i] = nan if r.duration is None else r.duration
        b.orig_bytes[i] = nan if r.orig_bytes is None else r.orig_bytes
        b.resp_bytes[i] = nan if r.resp_bytes is None else r.resp_bytes
        b.orig_pkts[i] = nan if r.orig_pkts is None else r.orig_pkts
        b.resp_pkts[i] = nan if r.resp_pkts is None else r.resp_pkts
        b.conn_state[i] = STATE_INDEX[r.conn_state]
        b.orig_internal[i] = oint
        b.resp_internal[i] = rint
    return b


def batch_to_records(
    batch: RecordBatch,
    ip_formatter=None,
    uid_prefix: str = "C",
) -> list[ConnRecord]:
    """Materialize ConnRecords from a batch. ``ip_formatter(id)`` renders IPs;
    the default prints the low 32 bits as dotted IPv4."""
    if ip_formatter is None:
        ip_formatter = lambda i: str(ipaddress.IPv4Address(int(i) & 0xFFFFFFFF))

    def opt(arr, i, cast):
        v = arr[i]
        return None if np.isnan(v) else cast(v)

    out = []
    for i in range(len(batch)):
        out.append(ConnRecord(
            ts=float(batch.ts[i]),
            uid=f"{uid_prefix}{i}",
            orig_ip=ip_formatter(batch.orig_ip[i]),
            resp_ip=ip_formatter(batch.resp_ip[i]),
            orig_port=int(batch.orig_port[i]),
            resp_port=int(batch.resp_port[i]),
            proto=PROTOCOLS[batch.proto[i]],
            conn_state=CONN_STATES[batch.conn_state[i]],
            duration=opt(batch.duration, i, float),
            orig_bytes=opt(batch.orig_bytes, i, int),
            resp_bytes=opt(batch.resp_bytes, i, int),
            orig_pkts=opt(batch.orig_pkts, i, int),
            resp_pkts=opt(batch.resp_pkts, i, int),
        ))
    return out
