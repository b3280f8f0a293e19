"""Per-feature KDE anomaly models and their weighted ensembles.

A port's detector holds one Gaussian-kernel KDE per feature, trained on that
feature's values over benign training windows. A window's anomaly score per
feature is the negative log density (floored), min-max normalized against the
training score range; the ensemble combines the 35 normalized scores with a
weight vector (uniform for the Mean Ensemble).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Mapping, Optional, Sequence, Union

import numpy as np

from .features import FEATURE_INDEX, FEATURE_NAMES, N_FEATURES, FeatureMatrix, FeatureVector

SQRT_2PI = math.sqrt(2.0 * math.pi)
MIN_BANDWIDTH = 1e-6
DEFAULT_EPS = 1e-12
DEFAULT_SUBSAMPLE_CAP = 50_000
MODEL_FORMAT_VERSION = "1"

# Dense kernel evaluation is chunked to bound temporary memory.
_CHUNK_ELEMS = 4_000_000


class WeightVectorError(ValueError):
    """Weight vector violates non-negativity or normalization."""


@dataclass(frozen=True)
class WeightVector:
    """Non-negative per-feature ensemble weights summing to 1."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (N_FEATURES,):
            raise WeightVectorError(f"expected {N_FEATURES} weights, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise WeightVectorError("weights must be finite")
        if np.any(v < 0):
            raise WeightVectorError("weights must be non-negative")
        if abs(float(v.sum()) - 1.0) > 1e-9:
            raise WeightVectorError(f"weights must sum to 1 (got {v.sum()!r})")
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls) -> "WeightVector":
        return cls(np.full(N_FEATURES, 1.0 / N_FEATURES))

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "WeightVector":
        missing = set(FEATURE_NAMES) - set(d)
        if missing:
            raise WeightVectorError(f"missing weights for: {sorted(missing)}")
        return cls(np.array([d[name] for name in FEATURE_NAMES]))

    def to_dict(self) -> dict[str, float]:
        return {name: float(w) for name, w in zip(FEATURE_NAMES, self.values)}

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_INDEX[name]])


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), floored at 1e-6."""
    v = np.asarray(values, dtype=float)
    sigma = float(np.std(v))
    q75, q25 = np.percentile(v, [75, 25])
    a = min(sigma, (q75 - q25) / 1.34)
    h = 0.9 * a * len(v) ** (-0.2)
    return max(h, MIN_BANDWIDTH)


@dataclass
class KdeModel:
    """Gaussian-kernel density estimate over one feature's training values."""

    feature: str
    points: np.ndarray
    bandwidth: float
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or len(pts) == 0:
            raise ValueError("KDE requires a non-empty 1-D training sample")
        if not np.all(np.isfinite(pts)):
            raise ValueError("KDE training values must be finite")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.eps > 0:
            raise ValueError("score floor must be positive")
        self.points = pts
        # Weighted evaluation over unique values when the sample is discrete.
        uv, uc = np.unique(pts, return_counts=True)
        if len(uv) <= max(64, len(pts) // 3):
            self._uv, self._uc = uv, uc.astype(float)
        else:
            self._uv = self._uc = None

    def density(self, xs) -> np.ndarray:
        """Density at each query point (scalar in, 0-d array out)."""
        q = np.asarray(xs, dtype=float)
        scalar = q.ndim == 0
        q = np.atleast_1d(q)
        if not np.all(np.isfinite(q)):
            raise ValueError("query points must be finite")
        uq, inv = np.unique(q, return_inverse=True)
        if len(uq) <= 0.8 * len(q):
            dens = self._density_unique(uq)[inv]
        else:
            dens = self._density_unique(q)
        return dens[0] if scalar else dens

    def _density_unique(self, q: np.ndarray) -> np.ndarray:
        h = self.bandwidth
        n = len(self.points)
        if self._uv is not None:
            pts, wts = self._uv, self._uc
        else:
            pts, wts = self.points, None
        out = np.empty(len(q))
        step = max(1, _CHUNK_ELEMS // max(len(pts), 1))
        for i in range(0, len(q), step):
            k = _kernel_block(q[i:i + step], pts, h)
            out[i:i + step] = k @ wts if wts is not None else k.sum(axis=1)
        return out / (n * h * SQRT_2PI)

    def raw_scores(self, xs) -> np.ndarray:
        """Negative log density, floored: -log(max(density, eps))."""
        dens = self.density(xs)
        return -np.log(np.maximum(dens, self.eps))

    def self_raw_scores(self) -> np.ndarray:
        """Raw scores of the training points themselves (symmetry-accelerated)."""
        dens = _self_densities(self.points, self.bandwidth, self._uv, self._uc)
        return -np.log(np.maximum(dens, self.eps))


def _kernel_block(x: np.ndarray, y: np.ndarray, h: float) -> np.ndarray:
    """exp(-((x_i - y_j) / h)^2 / 2) computed with in-place passes."""
    z = np.subtract.outer(x, y)
    z /= h
    np.multiply(z, z, out=z)
    z *= -0.5
    return np.exp(z, out=z)


def _self_densities(pts, h, uv, uc) -> np.ndarray:
    n = len(pts)
    if uv is not None:
        dens_u = _kernel_block(uv, uv, h) @ uc / (n * h * SQRT_2PI)
        idx = np.searchsorted(uv, pts)
        return dens_u[idx]
    block = max(1, int(math.isqrt(_CHUNK_ELEMS)))
    sums = np.zeros(n)
    for i0 in range(0, n, block):
        xi = pts[i0:i0 + block]
        sums[i0:i0 + block] += _kernel_block(xi, xi, h).sum(axis=1)
        for j0 in range(i0 + block, n, block):
            xj = pts[j0:j0 + block]
            k = _kernel_block(xi, xj, h)
            sums[i0:i0 + block] += k.sum(axis=1)
            sums[j0:j0 + block] += k.sum(axis=0)
    return sums / (n * h * SQRT_2PI)


def fit_kde(
    values,
    feature: str = "",
    eps: float = DEFAULT_EPS,
    subsample_cap: int = DEFAULT_SUBSAMPLE_CAP,
) -> KdeModel:
    """Fit a Gaussian KDE with Silverman bandwidth to one feature's values."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or len(v) == 0:
        raise ValueError("fit_kde requires a non-empty 1-D sample")
    if not np.all(np.isfinite(v)):
        raise ValueError("fit_kde requires finite values")
    if subsample_cap and len(v) > subsample_cap:
        # Deterministic thinning for pathological inputs: evenly strided order stats.
        idx = np.linspace(0, len(v) - 1, subsample_cap).round().astype(int)
        v = np.sort(v)[idx]
    return KdeModel(feature=feature, points=v, bandwidth=silverman_bandwidth(v), eps=eps)


def raw_score(model: KdeModel, x: float) -> float:
    """Anomaly score of a single value under one feature's KDE."""
    return float(model.raw_scores(x))


# ---------------------------------------------------------------------------
# Ensembles


@dataclass
class AlertRanking:
    """Test windows ordered by final score, descending; ties by earlier window."""

    port: int
    window_starts: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.window_starts = np.asarray(self.window_starts, dtype=float)
        self.scores = np.asarray(self.scores, dtype=float)
        if self.window_starts.shape != self.scores.shape:
            raise ValueError("window/score length mismatch")

    def __len__(self) -> int:
        return len(self.scores)

    def entries(self) -> list[tuple[float, float]]:
        return [(float(w), float(s)) for w, s in zip(self.window_starts, self.scores)]

    def top(self, k: int) -> np.ndarray:
        return self.window_starts[:k]


class EnsembleError(ValueError):
    pass


@dataclass
class EnsembleModel:
    """Per-port ensemble: 35 KDEs, training-score normalization, weights."""

    port: int
    kdes: list[KdeModel]
    norm_bounds: np.ndarray  # (35, 2): raw-score (min, max) on the training set
    weights: WeightVector
    train_scores: Optional[np.ndarray] = None
    score_norm: str = "minmax"

    def __post_init__(self):
        if len(self.kdes) != N_FEATURES:
            raise EnsembleError(f"need {N_FEATURES} per-feature models")
        names = [k.feature for k in self.kdes]
        if names != list(FEATURE_NAMES):
            raise EnsembleError("per-feature models out of canonical order")
        self.norm_bounds = np.asarray(self.norm_bounds, dtype=float)
        if self.norm_bounds.shape != (N_FEATURES, 2):
            raise EnsembleError("normalization bounds must be (35, 2)")
        if self.score_norm == "minmax" and np.any(self.norm_bounds[:, 0] > self.norm_bounds[:, 1]):
            raise EnsembleError("normalization bounds must satisfy min <= max")

    def _normalize(self, raw: np.ndarray) -> np.ndarray:
        a, b = self.norm_bounds[:, 0], self.norm_bounds[:, 1]
        if self.score_norm == "minmax":
            span = b - a
            out = np.zeros_like(raw)
            ok = span > 0
            out[:, ok] = np.clip((raw[:, ok] - a[ok]) / span[ok], 0.0, 1.0)
            return out
        if self.score_norm == "zscore":
            sd = np.where(b > 0, b, 1.0)
            return (raw - a) / sd
        raise EnsembleError(f"unknown score normalization: {self.score_norm!r}")

    def raw_score_matrix(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        raw = np.empty_like(values)
        for j, kde in enumerate(self.kdes):
            raw[:, j] = kde.raw_scores(values[:, j])
        return raw

    def normalized_scores(self, values: np.ndarray) -> np.ndarray:
        return self._normalize(self.raw_score_matrix(values))

    def final_scores(self, values: np.ndarray, weights: Optional[WeightVector] = None) -> np.ndarray:
        w = (weights or self.weights).values
        return self.normalized_scores(values) @ w

    def with_weights(self, weights: WeightVector) -> "EnsembleModel":
        """Same trained KDEs and bounds under different ensemble weights."""
        return EnsembleModel(
            self.port, self.kdes, self.norm_bounds, weights,
            train_scores=None, score_norm=self.score_norm,
        )


def fit_ensemble(
    matrix: FeatureMatrix,
    weights: Optional[WeightVector] = None,
    eps: float = DEFAULT_EPS,
    subsample_cap: int = DEFAULT_SUBSAMPLE_CAP,
    score_norm: str = "minmax",
) -> EnsembleModel:
    """Train one KDE per feature on the matrix rows and fix normalization
    bounds and training final scores from the same rows."""
    if len(matrix) == 0:
        raise EnsembleError("cannot fit on an empty matrix")
    weights = weights or WeightVector.uniform()
    kdes = []
    raw = np.empty((len(matrix), N_FEATURES))
    for j, name in enumerate(FEATURE_NAMES):
        kde = fit_kde(matrix.values[:, j], feature=name, eps=eps, subsample_cap=subsample_cap)
        kdes.append(kde)
        raw[:, j] = kde.self_raw_scores()
    if score_norm == "minmax":
        bounds = np.stack([raw.min(axis=0), raw.max(axis=0)], axis=1)
    elif score_norm == "zscore":
        bounds = np.stack([raw.mean(axis=0), raw.std(axis=0)], axis=1)
    else:
        raise EnsembleError(f"unknown score normalization: {score_norm!r}")
    model = EnsembleModel(matrix.port, kdes, bounds, weights, score_norm=score_norm)
    model.train_scores = model._normalize(raw) @ weights.values
    return model


def ensemble_score(model: EnsembleModel, vector: Union[FeatureVector, Mapping[str, float]]) -> float:
    """Final weighted score of one window's feature vector."""
    if isinstance(vector, FeatureVector):
        values = vector.values
    else:
        missing = set(FEATURE_NAMES) - set(vector)
        if missing:
            raise EnsembleError(f"missing features: {sorted(missing)}")
        values = np.array([vector[name] for name in FEATURE_NAMES], dtype=float)
    return float(model.final_scores(values[None, :])[0])


def rank_alerts(model: EnsembleModel, matrix: FeatureMatrix) -> AlertRanking:
    """Score every row and sort by score descending, earlier window first on ties."""
    if matrix.port != model.port:
        raise EnsembleError(f"model is for port {model.port}, matrix for port {matrix.port}")
    scores = model.final_scores(matrix.values)
    order = np.lexsort((matrix.window_starts, -scores))
    return AlertRanking(matrix.port, matrix.window_starts[order], scores[order])


def label_by_detection(model: EnsembleModel, ranking: AlertRanking, q: float = 0.999) -> np.ndarray:
    """Boolean malicious mask aligned with the ranking: final score strictly
    above the q-quantile of the model's training-window scores."""
    if not 0 < q <= 1:
        raise ValueError("quantile must be in (0, 1]")
    if model.train_scores is None:
        raise EnsembleError("model stores no training scores; refit before labeling")
    threshold = float(np.quantile(model.train_scores, q))
    return ranking.scores > threshold


# ---------------------------------------------------------------------------
# Persistence (versioned structured-text model documents)


def model_to_dict(model: EnsembleModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "port": model.port,
        "score_norm": model.score_norm,
        "features": [
            {
                "name": kde.feature,
                "points": kde.points.tolist(),
                "bandwidth": kde.bandwidth,
                "eps": kde.eps,
                "norm": model.norm_bounds[j].tolist(),
            }
            for j, kde in enumerate(model.kdes)
        ],
        "weights": model.weights.to_dict(),
        "train_scores": None if model.train_scores is None else model.train_scores.tolist(),
    }


def model_from_dict(doc: Mapping) -> EnsembleModel:
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise EnsembleError(f"unrecognized model format version: {version!r}")
    feats = doc["features"]
    if [f["name"] for f in feats] != list(FEATURE_NAMES):
        raise EnsembleError("model features do not match the canonical feature list")
    kdes = [
        KdeModel(f["name"], np.asarray(f["points"], dtype=float), float(f["bandwidth"]), float(f["eps"]))
        for f in feats
    ]
    bounds = np.array([f["norm"] for f in feats], dtype=float)
    weights = WeightVector.from_dict(doc["weights"])
    train = doc.get("train_scores")
    model = EnsembleModel(
        int(doc["port"]), kdes, bounds, weights,
        train_scores=None if train is None else np.asarray(train, dtype=float),
        score_norm=doc.get("score_norm", "minmax"),
    )
    return model


def save_model(model: EnsembleModel, dest: Union[str, Path, IO[str]]) -> None:
    doc = model_to_dict(model)
    if hasattr(dest, "write"):
        json.dump(doc, dest, sort_keys=True, separators=(",", ":"))
    else:
        with open(dest, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_model(src: Union[str, Path, IO[str]]) -> EnsembleModel:
    if hasattr(src, "read"):
        doc = json.load(src)
    else:
        with open(src, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    return model_from_dict(doc)


def save_ranking_csv(ranking: AlertRanking, out: IO[str]) -> None:
    out.write("window_start,score\n")
    for w, s in zip(ranking.window_starts, ranking.scores):
        out.write(f"{float(w)!r},{float(s)!r}\n")


def load_ranking_csv(src: IO[str], port: int = 0) -> AlertRanking:
    header = src.readline().strip()
    if header != "window_start,score":
        raise ValueError("unrecognized ranking CSV header")
    ws, sc = [], []
    for line in src:
        line = line.strip()
        if not line:
            continue
        a, b = line.split(",")
        ws.append(float(a))
        sc.append(float(b))
    return AlertRanking(port, np.array(ws), np.array(sc))
