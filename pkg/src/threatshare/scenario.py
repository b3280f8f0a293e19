"""End-to-end two-network experiment.

One declarative config drives: benign traffic generation at both sites, a
fast scan attack at site A, A's unsupervised detection and labeling, weight
derivation and moment summaries, package building, fast and slowed attacks at
site B, and evaluation of the four strategies (baseline, model sharing,
weight sharing, weight adaptation) against ground truth.

Everything is deterministic for a fixed config; ports run in parallel
processes without affecting results.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .connlog import SiteConfig
from .detector import (
    AlertRanking,
    EnsembleModel,
    WeightVector,
    fit_ensemble,
    label_by_detection,
    rank_alerts,
    save_ranking_csv,
)
from .evaluation import (
    STRATEGIES,
    EvalReport,
    compare_strategies,
    make_report,
    write_curve_csv,
)
from .features import LABEL_BENIGN, LABEL_MALICIOUS, FeaturizerState, assign_labels, featurize
from .forest import ForestConfig, feature_weights, train_forest
from .sharing import (
    adapt_weights,
    compute_moments,
    export_package,
    import_package,
    make_model_package,
    make_weights_moments_package,
    make_weights_package,
    moment_distance,
)
from .synth import BenignProfile, ScanProfile, gen_benign_port, gen_scan, inject, slow_variant

DAY = 86400.0


@dataclass(frozen=True)
class SiteSetup:
    profile: BenignProfile
    seed: int
    site_id: str


@dataclass(frozen=True)
class AttackConfig:
    ports: tuple[int, ...] = (23, 445, 22, 80, 443)
    fast_rate: float = 750.0
    slow_factor: float = 128.0
    n_windows: int = 63
    start_offset: float = 600 * 60.0  # seconds into the test day
    n_infected: int = 10
    victim_space: int = 60000
    scan_duration: float = 3.0

    def __post_init__(self):
        if self.slow_factor < 1:
            raise ValueError("slow_factor must be >= 1")
        if self.n_windows < 1:
            raise ValueError("attack must span at least one window")


@dataclass(frozen=True)
class ScenarioConfig:
    net_a: SiteSetup
    net_b: SiteSetup
    attack: AttackConfig = AttackConfig()
    train_days: int = 7
    test_days: int = 1
    strategies: tuple[str, ...] = STRATEGIES
    variants: tuple[str, ...] = ("fast", "slow")
    adapt_k: int = 10
    rf_seed: int = 7
    label_quantile: float = 0.999
    distance_method: str = "raw_moments"
    start_ts: float = 0.0
    eval_ks: tuple[int, ...] = (60,)
    n_workers: Optional[int] = None

    def __post_init__(self):
        if self.train_days < 1 or self.test_days < 1:
            raise ValueError("need at least one training day and one test day")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies: {sorted(unknown)}")
        if set(self.variants) - {"fast", "slow"}:
            raise ValueError("variants must be drawn from {fast, slow}")
        for site in (self.net_a, self.net_b):
            missing = set(self.attack.ports) - set(site.profile.ports)
            if missing:
                raise ValueError(
                    f"attack ports {sorted(missing)} not covered by "
                    f"{site.site_id}'s profile"
                )
        off = self.attack.start_offset + self.attack.n_windows * 60.0
        if off > self.test_days * DAY:
            raise ValueError("attack does not fit inside the test range")

    @property
    def train_range(self) -> tuple[float, float]:
        return (self.start_ts, self.start_ts + self.train_days * DAY)

    @property
    def test_range(self) -> tuple[float, float]:
        t1 = self.start_ts + self.train_days * DAY
        return (t1, t1 + self.test_days * DAY)


def seeded(config: ScenarioConfig, run_seed: int) -> ScenarioConfig:
    """Variant of the config with all stochastic seeds derived from run_seed."""
    return replace(
        config,
        net_a=replace(config.net_a, seed=run_seed),
        net_b=replace(config.net_b, seed=run_seed + 500),
        rf_seed=run_seed + 900,
    )


@dataclass
class PortOutcome:
    port: int
    accuracy_a: float
    reports: list[EvalReport]
    rankings: dict[tuple[str, str], AlertRanking]
    packages: dict[str, bytes]
    diagnostics: list[str]


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    config_digest: str
    reports: list[EvalReport]
    accuracy_a: dict[int, float]
    rankings: dict[tuple[int, str, str], AlertRanking]
    packages: dict[int, dict[str, bytes]]
    diagnostics: list[str]


def net_a_selfcheck(result: ScenarioResult, threshold: float = 0.96) -> bool:
    """True iff site A's window-level accuracy on its own fast attack exceeds
    the threshold on every attacked port."""
    return bool(result.accuracy_a) and all(
        acc > threshold for acc in result.accuracy_a.values()
    )


def config_to_dict(config: ScenarioConfig) -> dict:
    doc = asdict(config)
    for site in ("net_a", "net_b"):
        ports = doc[site]["profile"]["ports"]
        doc[site]["profile"]["ports"] = {str(p): ports[p] for p in sorted(ports)}
    return doc


def config_digest(config: ScenarioConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Per-port pipeline


def _ranking_from_scores(port, window_starts, scores) -> AlertRanking:
    order = np.lexsort((window_starts, -scores))
    return AlertRanking(port, window_starts[order], scores[order])


def _run_port(config: ScenarioConfig, port: int) -> PortOutcome:
    w = 60.0
    site_cfg = SiteConfig(monitored_ports=(port,), window_seconds=int(w))
    train_range, test_range = config.train_range, config.test_range
    attack = config.attack
    attack_start = test_range[0] + attack.start_offset
    diagnostics: list[str] = []

    def site_matrices(setup: SiteSetup, attack_batches: dict):
        profile = replace(setup.profile, rng_seed=setup.seed)
        benign = gen_benign_port(profile, port, (train_range[0], test_range[1]), setup.site_id)
        train = benign.take(benign.ts < train_range[1])
        test_benign = benign.take(benign.ts >= train_range[1])
        state = FeaturizerState()
        m_train = featurize(train, site_cfg, state, time_range=train_range)[port]
        tests = {}
        for name, trace in attack_batches.items():
            merged, intervals = inject(test_benign, trace, 0.0, w)
            m_test = featurize(merged, site_cfg, state.copy(), time_range=test_range)[port]
            tests[name] = assign_labels(m_test, intervals)
        return m_train, tests

    # --- site A: fast attack, detect, label, derive shared artifacts
    scan_a = gen_scan(ScanProfile(
        port=port, rate_per_min=attack.fast_rate, n_infected=attack.n_infected,
        victim_space=attack.victim_space, scan_duration=attack.scan_duration,
        start=attack_start, n_windows=attack.n_windows, rng_seed=config.net_a.seed,
    ))
    m_train_a, tests_a = site_matrices(config.net_a, {"fast": scan_a})
    m_test_a = tests_a["fast"]
    truth_a = m_test_a.window_starts[m_test_a.labels == LABEL_MALICIOUS]

    model_a = fit_ensemble(m_train_a)
    ranking_a = rank_alerts(model_a, m_test_a)
    detected = label_by_detection(model_a, ranking_a, config.label_quantile)
    detected_windows = ranking_a.window_starts[detected]
    actual = np.isin(m_test_a.window_starts, truth_a)
    predicted = np.isin(m_test_a.window_starts, detected_windows)
    accuracy_a = float(np.mean(actual == predicted))

    packages: dict[str, bytes] = {}
    need_model = "model_sharing" in config.strategies
    need_weights = "weight_sharing" in config.strategies
    need_adapt = "weight_adaptation" in config.strategies
    if need_model:
        packages["model"] = export_package(
            make_model_package(config.net_a.site_id, model_a))
    if need_weights or need_adapt:
        if not np.any(predicted):
            diagnostics.append(
                f"port {port}: site A detected no malicious windows; "
                "weight sharing and adaptation skipped"
            )
        elif np.all(predicted):
            diagnostics.append(
                f"port {port}: site A labeled every window malicious; "
                "weight sharing and adaptation skipped"
            )
        else:
            det_labels = np.where(predicted, LABEL_MALICIOUS, LABEL_BENIGN).astype(np.int8)
            forest = train_forest(
                m_test_a.with_labels(det_labels), ForestConfig(rng_seed=config.rf_seed))
            weights_a = feature_weights(forest)
            if need_weights:
                packages["weights"] = export_package(
                    make_weights_package(config.net_a.site_id, port, weights_a))
            if need_adapt:
                moments_a = compute_moments(m_train_a)
                packages["weights+moments"] = export_package(
                    make_weights_moments_package(
                        config.net_a.site_id, port, weights_a, moments_a))

    # --- site B: fast and slowed attacks, four strategies
    scan_b = gen_scan(ScanProfile(
        port=port, rate_per_min=attack.fast_rate, n_infected=attack.n_infected,
        victim_space=attack.victim_space, scan_duration=attack.scan_duration,
        start=attack_start, n_windows=attack.n_windows, rng_seed=config.net_b.seed,
    ))
    attacks_b = {}
    for variant in config.variants:
        if variant == "fast":
            attacks_b["fast"] = scan_b
        else:
            attacks_b["slow"] = slow_variant(
                scan_b, attack.slow_factor,
                rng_seed=config.net_b.seed + 7919 * port,
            )
    m_train_b, tests_b = site_matrices(config.net_b, attacks_b)
    model_b = fit_ensemble(m_train_b)

    shared_weights = shared_adapted = None
    if "weights" in packages:
        shared_weights = import_package(packages["weights"]).payload
    if "weights+moments" in packages:
        w_in, moments_in = import_package(packages["weights+moments"]).payload
        dist = moment_distance(
            moments_in, compute_moments(m_train_b), config.distance_method)
        shared_adapted = adapt_weights(w_in, dist, config.adapt_k)
    shared_model = import_package(packages["model"]).payload if "model" in packages else None

    run_seed = config.net_a.seed
    reports: list[EvalReport] = []
    rankings: dict[tuple[str, str], AlertRanking] = {}
    for variant, m_test in tests_b.items():
        truth = m_test.window_starts[m_test.labels == LABEL_MALICIOUS]
        if len(truth) == 0:
            diagnostics.append(f"port {port}/{variant}: slowed attack left no records")
            continue
        norm_b = model_b.normalized_scores(m_test.values)
        for strategy in config.strategies:
            if strategy == "baseline":
                ranking = _ranking_from_scores(
                    port, m_test.window_starts, norm_b @ WeightVector.uniform().values)
            elif strategy == "model_sharing":
                ranking = rank_alerts(shared_model, m_test)
            elif strategy == "weight_sharing":
                if shared_weights is None:
                    continue
                ranking = _ranking_from_scores(
                    port, m_test.window_starts, norm_b @ shared_weights.values)
            else:  # weight_adaptation
                if shared_adapted is None:
                    continue
                ranking = _ranking_from_scores(
                    port, m_test.window_starts, norm_b @ shared_adapted.values)
            rankings[(variant, strategy)] = ranking
            reports.append(make_report(
                ranking, truth, strategy, variant, seed=run_seed, ks=config.eval_ks))
    return PortOutcome(port, accuracy_a, reports, rankings, packages, diagnostics)


def _worker(args) -> PortOutcome:
    config, port = args
    return _run_port(config, port)


def run_scenario(
    config: ScenarioConfig, out_dir: Optional[Path] = None
) -> ScenarioResult:
    """Execute the full scenario; optionally write a run directory."""
    ports = list(config.attack.ports)
    n_workers = config.n_workers or os.cpu_count() or 1
    if n_workers > 1 and len(ports) > 1:
        with ProcessPoolExecutor(max_workers=min(n_workers, len(ports))) as pool:
            outcomes = list(pool.map(_worker, [(config, p) for p in ports]))
    else:
        outcomes = [_run_port(config, p) for p in ports]

    outcomes.sort(key=lambda o: ports.index(o.port))
    result = ScenarioResult(
        config=config,
        config_digest=config_digest(config),
        reports=[r for o in outcomes for r in o.reports],
        accuracy_a={o.port: o.accuracy_a for o in outcomes},
        rankings={(o.port, v, s): r for o in outcomes for (v, s), r in o.rankings.items()},
        packages={o.port: o.packages for o in outcomes},
        diagnostics=[d for o in outcomes for d in o.diagnostics],
    )
    if out_dir is not None:
        write_run_dir(result, Path(out_dir))
    return result


def write_run_dir(result: ScenarioResult, out_dir: Path) -> None:
    """Emit manifest, per-report metrics, recall curves, comparison tables,
    rankings, and package files. Content is byte-stable for identical configs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    manifest = {
        "tool_version": __version__,
        "config_digest": result.config_digest,
        "config": config_to_dict(cfg),
        "seeds": {"net_a": cfg.net_a.seed, "net_b": cfg.net_b.seed, "rf": cfg.rf_seed},
        "ports": list(cfg.attack.ports),
        "strategies": list(cfg.strategies),
        "variants": list(cfg.variants),
        "accuracy_a": {str(p): result.accuracy_a[p] for p in sorted(result.accuracy_a)},
        "diagnostics": result.diagnostics,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    k_table = cfg.eval_ks[0] if cfg.eval_ks else 60
    with open(out_dir / "reports.csv", "w", encoding="utf-8") as fh:
        fh.write(f"variant,strategy,port,seed,m,recall_at_m,precision_at_{k_table},fp_at_{k_table}\n")
        for r in sorted(result.reports, key=lambda r: (r.variant, r.strategy, r.port)):
            fh.write(
                f"{r.variant},{r.strategy},{r.port},{r.seed},{r.m},"
                f"{r.recall_at(r.m)!r},{r.precision_at[k_table]!r},{r.fp_at[k_table]}\n"
            )

    curve_dir = out_dir / "curves"
    curve_dir.mkdir(exist_ok=True)
    for r in result.reports:
        name = f"{r.variant}_{r.strategy}_port{r.port}.csv"
        with open(curve_dir / name, "w", encoding="utf-8") as fh:
            write_curve_csv(r.recall_curve, fh, m=r.m)

    rank_dir = out_dir / "rankings"
    rank_dir.mkdir(exist_ok=True)
    for (port, variant, strategy), ranking in sorted(result.rankings.items()):
        with open(rank_dir / f"{variant}_{strategy}_port{port}.csv", "w", encoding="utf-8") as fh:
            save_ranking_csv(ranking, fh)

    if result.reports:
        table_dir = out_dir / "tables"
        table_dir.mkdir(exist_ok=True)
        table = compare_strategies(result.reports, k_table=k_table)
        with open(table_dir / "comparison.csv", "w", encoding="utf-8") as fh:
            table.write_csv(fh)

    pkg_dir = out_dir / "packages"
    pkg_dir.mkdir(exist_ok=True)
    for port in sorted(result.packages):
        for kind, blob in sorted(result.packages[port].items()):
            safe = kind.replace("+", "_")
            (pkg_dir / f"port{port}_{safe}.json").write_bytes(blob)
