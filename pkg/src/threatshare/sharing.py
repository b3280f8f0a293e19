"""Cross-network sharing: package building/serialization, moment summaries,
feature distances, and distance-based weight adaptation.

Three package kinds travel between sites: a full ensemble model, a bare
weight vector, or weights plus per-feature moment summaries. The receiving
site may adapt shared weights by keeping only the k features whose moment
summaries are closest to its own.
"""

from __future__ import annotations

import importlib.resources
import json
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

import jsonschema
import numpy as np

from .detector import EnsembleModel, WeightVector, model_from_dict, model_to_dict
from .features import FEATURE_NAMES, FeatureMatrix

SCHEMA_VERSION = "1"
PACKAGE_KINDS = ("model", "weights", "weights+moments")
DISTANCE_METHODS = ("raw_moments", "scale_adjusted", "emd")


class PackageError(ValueError):
    """Share package is malformed or violates an invariant."""


@dataclass(frozen=True)
class MomentSummary:
    """First four population central moments of each feature, plus sample count."""

    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    m4: np.ndarray
    n: int
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        for name in ("m1", "m2", "m3", "m4"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (len(self.feature_names),):
                raise ValueError(f"{name} must have one entry per feature")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)
        if np.any(self.m2 < 0):
            raise ValueError("variance (m2) must be non-negative")
        if np.any(self.m4 < 0):
            raise ValueError("fourth central moment must be non-negative")
        if self.n < 1:
            raise ValueError("sample count must be >= 1")

    def stacked(self) -> np.ndarray:
        return np.stack([self.m1, self.m2, self.m3, self.m4], axis=1)


@dataclass(frozen=True)
class FeatureDistance:
    """Per-feature non-negative distances between two sites' summaries."""

    distances: np.ndarray
    method: str
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=float)
        if d.shape != (len(self.feature_names),):
            raise ValueError("one distance per feature required")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("distances must be finite and non-negative")
        if self.method not in DISTANCE_METHODS:
            raise ValueError(f"unknown distance method: {self.method!r}")
        object.__setattr__(self, "distances", d)


def compute_moments(matrix: FeatureMatrix) -> MomentSummary:
    """Population central moments m1..m4 of every feature column."""
    if len(matrix) == 0:
        raise ValueError("cannot summarize an empty matrix")
    v = matrix.values
    m1 = v.mean(axis=0)
    d = v - m1
    m2 = np.mean(d * d, axis=0)
    m3 = np.mean(d ** 3, axis=0)
    m4 = np.mean(d ** 4, axis=0)
    return MomentSummary(m1, m2, m3, m4, len(matrix))


def _scale_adjust(stacked: np.ndarray) -> np.ndarray:
    """Map (m1, m2, m3, m4) to common scale: (m1, m2^1/2, sgn(m3)|m3|^1/3, m4^1/4)."""
    out = np.empty_like(stacked)
    out[:, 0] = stacked[:, 0]
    out[:, 1] = np.sqrt(stacked[:, 1])
    out[:, 2] = np.sign(stacked[:, 2]) * np.abs(stacked[:, 2]) ** (1.0 / 3.0)
    out[:, 3] = stacked[:, 3] ** 0.25
    return out


def moment_distance(a: MomentSummary, b: MomentSummary, method: str = "raw_moments") -> FeatureDistance:
    """Per-feature Euclidean distance between two moment summaries."""
    if a.feature_names != b.feature_names:
        raise ValueError("summaries cover different feature sets")
    if method not in ("raw_moments", "scale_adjusted"):
        raise ValueError(f"moment_distance supports raw_moments/scale_adjusted, not {method!r}")
    sa, sb = a.stacked(), b.stacked()
    if method == "scale_adjusted":
        sa, sb = _scale_adjust(sa), _scale_adjust(sb)
    d = np.sqrt(np.sum((sa - sb) ** 2, axis=1))
    return FeatureDistance(d, method, a.feature_names)


def emd_distance(samples_a, samples_b) -> float:
    """1-D Wasserstein-1 distance between two empirical distributions,
    via the integral of |CDF_a - CDF_b|."""
    a = np.sort(np.asarray(samples_a, dtype=float))
    b = np.sort(np.asarray(samples_b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be non-empty")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("samples must be finite")
    grid = np.sort(np.concatenate([a, b]))
    deltas = np.diff(grid)
    cdf_a = np.searchsorted(a, grid[:-1], side="right") / len(a)
    cdf_b = np.searchsorted(b, grid[:-1], side="right") / len(b)
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def emd_feature_distances(a: FeatureMatrix, b: FeatureMatrix) -> FeatureDistance:
    """Offline analysis variant: per-feature EMD between two sites' columns.

    Not part of any share package; it would require moving raw distributions."""
    d = np.array([
        emd_distance(a.values[:, j], b.values[:, j]) for j in range(a.values.shape[1])
    ])
    return FeatureDistance(d, "emd")


def adapt_weights(weights: WeightVector, distance: FeatureDistance, k: int = 10) -> WeightVector:
    """Keep the k features with smallest distance (ties: larger shared weight,
    then canonical order), zero the rest, renormalize survivors to sum 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    nf = len(distance.feature_names)
    if distance.feature_names != FEATURE_NAMES:
        raise ValueError("distance must cover the canonical feature set")
    if k > nf:
        warnings.warn(f"k={k} exceeds feature count; clamping to {nf}", stacklevel=2)
        k = nf
    order = np.lexsort((np.arange(nf), -weights.values, distance.distances))
    keep = order[:k]
    out = np.zeros(nf)
    out[keep] = weights.values[keep]
    total = out.sum()
    if total == 0.0:
        # every surviving shared weight is zero; fall back to uniform over survivors
        warnings.warn(
            "selected features all carry zero shared weight; using uniform weights over them",
            stacklevel=2,
        )
        out[keep] = 1.0 / k
    else:
        out /= total
    return WeightVector(out)


def aggregate_port_distance(distance: FeatureDistance, weights: Optional[WeightVector] = None) -> float:
    """Single per-port distance: plain average, or importance-weighted average."""
    if weights is None:
        return float(np.mean(distance.distances))
    if len(weights.values) != len(distance.distances):
        raise ValueError("weights and distances cover different feature sets")
    return float(weights.values @ distance.distances)


# ---------------------------------------------------------------------------
# Packages

Payload = Union[EnsembleModel, WeightVector, tuple[WeightVector, MomentSummary]]


@dataclass
class SharePackage:
    """Versioned transfer artifact produced by one site for another."""

    site_id: str
    port: int
    kind: str
    payload: Payload
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in PACKAGE_KINDS:
            raise PackageError(f"unknown package kind: {self.kind!r}")
        if self.schema_version != SCHEMA_VERSION:
            raise PackageError(f"unrecognized schema version: {self.schema_version!r}")
        ok = (
            (self.kind == "model" and isinstance(self.payload, EnsembleModel))
            or (self.kind == "weights" and isinstance(self.payload, WeightVector))
            or (
                self.kind == "weights+moments"
                and isinstance(self.payload, tuple)
                and len(self.payload) == 2
                and isinstance(self.payload[0], WeightVector)
                and isinstance(self.payload[1], MomentSummary)
            )
        )
        if not ok:
            raise PackageError(f"payload does not match declared kind {self.kind!r}")


def _moments_to_dict(m: MomentSummary) -> dict:
    return {
        "n": int(m.n),
        "features": {
            name: {"m1": float(m.m1[i]), "m2": float(m.m2[i]),
                   "m3": float(m.m3[i]), "m4": float(m.m4[i])}
            for i, name in enumerate(m.feature_names)
        },
    }


def _moments_from_dict(doc: Mapping) -> MomentSummary:
    feats = doc["features"]
    missing = set(FEATURE_NAMES) - set(feats)
    if missing:
        raise PackageError(f"moments missing features: {sorted(missing)}")
    cols = {k: np.array([feats[name][k] for name in FEATURE_NAMES]) for k in ("m1", "m2", "m3", "m4")}
    return MomentSummary(cols["m1"], cols["m2"], cols["m3"], cols["m4"], int(doc["n"]))


def package_to_dict(pkg: SharePackage) -> dict:
    if pkg.kind == "model":
        payload = {"model": model_to_dict(pkg.payload)}
    elif pkg.kind == "weights":
        payload = {"weights": pkg.payload.to_dict()}
    else:
        w, m = pkg.payload
        payload = {"weights": w.to_dict(), "moments": _moments_to_dict(m)}
    return {
        "schema_version": pkg.schema_version,
        "site_id": pkg.site_id,
        "port": pkg.port,
        "kind": pkg.kind,
        "payload": payload,
    }


def export_package(pkg: SharePackage) -> bytes:
    """Serialize to canonical JSON bytes (stable key order, compact separators)."""
    doc = package_to_dict(pkg)
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


_SCHEMA = None


def package_schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        text = (
            importlib.resources.files("threatshare")
            .joinpath("schemas/share_package.schema.json")
            .read_text(encoding="utf-8")
        )
        _SCHEMA = json.loads(text)
    return _SCHEMA


_EXPECTED_PAYLOAD_KEYS = {
    "model": {"model"},
    "weights": {"weights"},
    "weights+moments": {"weights", "moments"},
}


def import_package(raw: Union[bytes, str, Mapping]) -> SharePackage:
    """Parse and fully validate a package; raises PackageError with a reason."""
    if isinstance(raw, (bytes, str)):
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as e:
            raise PackageError(f"not valid JSON: {e}") from e
    else:
        doc = dict(raw)
    try:
        jsonschema.validate(doc, package_schema())
    except jsonschema.ValidationError as e:
        raise PackageError(f"schema violation: {e.message}") from e
    if doc["schema_version"] != SCHEMA_VERSION:
        raise PackageError(f"unrecognized schema version: {doc['schema_version']!r}")
    kind = doc["kind"]
    payload_doc = doc["payload"]
    if set(payload_doc) != _EXPECTED_PAYLOAD_KEYS.get(kind, set()):
        raise PackageError(
            f"payload keys {sorted(payload_doc)} do not match kind {kind!r}"
        )
    try:
        if kind == "model":
            payload: Payload = model_from_dict(payload_doc["model"])
        elif kind == "weights":
            payload = WeightVector.from_dict(payload_doc["weights"])
        else:
            payload = (
                WeightVector.from_dict(payload_doc["weights"]),
                _moments_from_dict(payload_doc["moments"]),
            )
    except PackageError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise PackageError(f"invalid payload: {e}") from e
    return SharePackage(
        site_id=str(doc["site_id"]),
        port=int(doc["port"]),
        kind=kind,
        payload=payload,
        schema_version=doc["schema_version"],
    )


def make_model_package(site_id: str, model: EnsembleModel) -> SharePackage:
    return SharePackage(site_id, model.port, "model", model)


def make_weights_package(site_id: str, port: int, weights: WeightVector) -> SharePackage:
    return SharePackage(site_id, port, "weights", weights)


def make_weights_moments_package(
    site_id: str, port: int, weights: WeightVector, moments: MomentSummary
) -> SharePackage:
    return SharePackage(site_id, port, "weights+moments", (weights, moments))
