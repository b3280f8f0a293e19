"""Collaborative threat detection over connection-log traffic features.

Per-port KDE ensembles detect self-propagating-malware scanning in one-minute
traffic windows; sites improve each other's detectors by sharing models,
ensemble feature weights, or weights plus feature-distribution moments.
"""

__version__ = "0.1.0"

from .connlog import ConnRecord, SiteConfig, is_internal, parse_conn_log  # noqa: F401
from .detector import (  # noqa: F401
    AlertRanking,
    EnsembleModel,
    KdeModel,
    WeightVector,
    ensemble_score,
    fit_ensemble,
    fit_kde,
    label_by_detection,
    rank_alerts,
    raw_score,
)
from .evaluation import EvalReport, precision_fp_at_k, recall_at_k  # noqa: F401
from .features import FEATURE_NAMES, FeatureMatrix, FeatureVector, assign_labels, featurize  # noqa: F401
from .forest import ForestConfig, feature_weights, train_forest  # noqa: F401
from .sharing import (  # noqa: F401
    FeatureDistance,
    MomentSummary,
    SharePackage,
    adapt_weights,
    aggregate_port_distance,
    compute_moments,
    emd_distance,
    export_package,
    import_package,
    moment_distance,
)
from .synth import BenignProfile, ScanProfile, gen_benign, gen_scan, inject, slow_variant  # noqa: F401
