"""Top-k alert metrics and strategy comparison tables.

Rankings are scored against ground truth given as the set of malicious window
starts. Metrics are the usual alert-triage trio: recall@k (fraction of all
malicious windows in the top k), precision@k, and the false-positive count in
the top k.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Optional, Sequence

import numpy as np

from .detector import AlertRanking

STRATEGIES = ("baseline", "model_sharing", "weight_sharing", "weight_adaptation")
VARIANTS = ("fast", "slow")


def _truth_array(truth) -> np.ndarray:
    arr = np.asarray(sorted(truth), dtype=float)
    if arr.ndim != 1:
        raise ValueError("truth must be a flat collection of window starts")
    return arr


def hit_mask(ranking: AlertRanking, truth) -> np.ndarray:
    """Boolean per ranked entry: is this window malicious?"""
    t = _truth_array(truth)
    if len(t) == 0:
        raise ValueError("truth contains no malicious windows")
    mask = np.isin(ranking.window_starts, t)
    return mask


def recall_at_k(ranking: AlertRanking, truth, k: int) -> float:
    """|malicious in top k| / m."""
    if not 0 < k <= len(ranking):
        raise ValueError(f"k must be in [1, {len(ranking)}]")
    m = len(_truth_array(truth))
    tp = int(np.count_nonzero(hit_mask(ranking, truth)[:k]))
    return tp / m


def precision_fp_at_k(ranking: AlertRanking, truth, k: int) -> tuple[float, int]:
    """(TP@k / k, k - TP@k)."""
    if k <= 0:
        raise ValueError("k must be positive")
    k = min(k, len(ranking))
    tp = int(np.count_nonzero(hit_mask(ranking, truth)[:k]))
    return tp / k, k - tp


def recall_curve(ranking: AlertRanking, truth) -> np.ndarray:
    """recall@k for every k = 1..N."""
    mask = hit_mask(ranking, truth)
    m = len(_truth_array(truth))
    return np.cumsum(mask) / m


def truncate2_ratio(num: int, den: int) -> float:
    """num/den truncated (not rounded) to 2 decimals, exactly."""
    if den <= 0:
        raise ValueError("denominator must be positive")
    return (100 * num // den) / 100


def truncate2(x: float) -> float:
    """Truncate to 2 decimals; a tiny epsilon absorbs float dust on exact ratios."""
    return np.floor(x * 100 + 1e-9) / 100


@dataclass
class EvalReport:
    """Metrics of one (strategy, port, variant, seed) ranking."""

    port: int
    strategy: str
    variant: str
    seed: int
    m: int
    recall_curve: np.ndarray
    precision_at: dict[int, float]
    fp_at: dict[int, int]

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy: {self.strategy!r}")
        self.recall_curve = np.asarray(self.recall_curve, dtype=float)
        if self.m < 1:
            raise ValueError("m must be >= 1")

    def recall_at(self, k: int) -> float:
        return float(self.recall_curve[k - 1])


def make_report(
    ranking: AlertRanking,
    truth,
    strategy: str,
    variant: str = "fast",
    seed: int = 0,
    ks: Sequence[int] = (60,),
) -> EvalReport:
    curve = recall_curve(ranking, truth)
    precision_at, fp_at = {}, {}
    for k in ks:
        p, fp = precision_fp_at_k(ranking, truth, k)
        precision_at[k] = p
        fp_at[k] = fp
    return EvalReport(
        port=ranking.port, strategy=strategy, variant=variant, seed=seed,
        m=len(_truth_array(truth)), recall_curve=curve,
        precision_at=precision_at, fp_at=fp_at,
    )


@dataclass
class ComparisonTable:
    """Per-port and averaged rows for each (variant, strategy), plus mean
    recall-curve series in the style of per-port recall-vs-k plots."""

    rows: list[dict]
    curves: dict[tuple[str, str, int], np.ndarray]  # (variant, strategy, port) -> curve
    k_table: int

    def precision_table(self, variant: str) -> dict[str, dict[int, float]]:
        out: dict[str, dict[int, float]] = {}
        for row in self.rows:
            if row["variant"] == variant and row["port"] != "mean":
                out.setdefault(row["strategy"], {})[row["port"]] = row[f"precision_at_{self.k_table}"]
        return out

    def fp_table(self, variant: str) -> dict[str, dict[int, float]]:
        out: dict[str, dict[int, float]] = {}
        for row in self.rows:
            if row["variant"] == variant and row["port"] != "mean":
                out.setdefault(row["strategy"], {})[row["port"]] = row[f"fp_at_{self.k_table}"]
        return out

    def write_csv(self, out: IO[str]) -> None:
        cols = (
            "variant", "strategy", "port", "seeds", "m",
            f"recall_at_m", f"precision_at_{self.k_table}", f"fp_at_{self.k_table}",
        )
        out.write(",".join(cols) + "\n")
        for row in self.rows:
            out.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                               for c in cols) + "\n")


def compare_strategies(reports: Sequence[EvalReport], k_table: int = 60) -> ComparisonTable:
    """Aggregate reports over seeds into per-port and averaged comparison rows."""
    if not reports:
        raise ValueError("no reports to compare")
    n_curve = {len(r.recall_curve) for r in reports}
    if len(n_curve) != 1:
        raise ValueError("reports cover different ranking lengths")
    groups: dict[tuple[str, str], dict[int, list[EvalReport]]] = {}
    for r in reports:
        if k_table not in r.precision_at:
            raise ValueError(f"report lacks precision@{k_table}")
        groups.setdefault((r.variant, r.strategy), {}).setdefault(r.port, []).append(r)

    port_sets = {key: frozenset(by_port) for key, by_port in groups.items()}
    if len(set(port_sets.values())) != 1:
        raise ValueError("strategies cover different port sets")
    seed_sets = {
        key: frozenset((p, rep.seed) for p, reps in by_port.items() for rep in reps)
        for key, by_port in groups.items()
    }
    if len(set(seed_sets.values())) != 1:
        raise ValueError("strategies cover different seed sets")

    rows: list[dict] = []
    curves: dict[tuple[str, str, int], np.ndarray] = {}
    for (variant, strategy), by_port in sorted(groups.items()):
        port_rows = []
        for port, reps in sorted(by_port.items()):
            curve = np.mean([r.recall_curve for r in reps], axis=0)
            curves[(variant, strategy, port)] = curve
            row = {
                "variant": variant, "strategy": strategy, "port": port,
                "seeds": len(reps),
                "m": float(np.mean([r.m for r in reps])),
                "recall_at_m": float(np.mean([r.recall_at(r.m) for r in reps])),
                f"precision_at_{k_table}": float(np.mean([r.precision_at[k_table] for r in reps])),
                f"fp_at_{k_table}": float(np.mean([r.fp_at[k_table] for r in reps])),
            }
            rows.append(row)
            port_rows.append(row)
        mean_row = {
            "variant": variant, "strategy": strategy, "port": "mean",
            "seeds": port_rows[0]["seeds"],
            "m": float(np.mean([r["m"] for r in port_rows])),
            "recall_at_m": float(np.mean([r["recall_at_m"] for r in port_rows])),
            f"precision_at_{k_table}": float(np.mean([r[f"precision_at_{k_table}"] for r in port_rows])),
            f"fp_at_{k_table}": float(np.mean([r[f"fp_at_{k_table}"] for r in port_rows])),
        }
        rows.append(mean_row)
    return ComparisonTable(rows=rows, curves=curves, k_table=k_table)


def write_curve_csv(curve: np.ndarray, out: IO[str], m: Optional[int] = None) -> None:
    """Recall-vs-k series; the malicious-count marker is included as a comment."""
    if m is not None:
        out.write(f"# m={m}\n")
    out.write("k,recall\n")
    for k, r in enumerate(curve, start=1):
        out.write(f"{k},{float(r)!r}\n")
