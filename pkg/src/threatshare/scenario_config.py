"""Declarative scenario configuration files (TOML).

A scenario file holds both sites (inline profile tables or references to
standalone profile files), the attack shape, and run parameters. See
``configs/`` in this repository for complete examples.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Mapping, Optional, Union

from .scenario import AttackConfig, ScenarioConfig, SiteSetup
from .synth import BenignProfile, profile_from_dict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _site_from_table(tbl: Mapping, name: str, base_dir: Optional[Path]) -> SiteSetup:
    if "profile" not in tbl:
        raise ValueError(f"[{name}] needs a profile (inline table or file path)")
    raw = tbl["profile"]
    if isinstance(raw, str):
        path = Path(raw)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        with open(path, "rb") as fh:
            profile = profile_from_dict(tomllib.load(fh))
    else:
        profile = profile_from_dict(dict(raw))
    if not isinstance(profile, BenignProfile):
        raise ValueError(f"[{name}] profile must be a benign profile")
    return SiteSetup(
        profile=profile,
        seed=int(tbl.get("seed", profile.rng_seed)),
        site_id=str(tbl.get("site_id", name)),
    )


def scenario_from_dict(doc: Mapping, base_dir: Optional[Path] = None) -> ScenarioConfig:
    net_a = _site_from_table(doc["net_a"], "net_a", base_dir)
    net_b = _site_from_table(doc["net_b"], "net_b", base_dir)
    attack_tbl = dict(doc.get("attack", {}))
    if "ports" in attack_tbl:
        attack_tbl["ports"] = tuple(int(p) for p in attack_tbl["ports"])
    attack = AttackConfig(**attack_tbl)
    kwargs = {}
    for key in ("train_days", "test_days", "adapt_k", "rf_seed"):
        if key in doc:
            kwargs[key] = int(doc[key])
    for key in ("label_quantile", "start_ts"):
        if key in doc:
            kwargs[key] = float(doc[key])
    if "distance_method" in doc:
        kwargs["distance_method"] = str(doc["distance_method"])
    if "strategies" in doc:
        kwargs["strategies"] = tuple(doc["strategies"])
    if "variants" in doc:
        kwargs["variants"] = tuple(doc["variants"])
    if "eval_ks" in doc:
        kwargs["eval_ks"] = tuple(int(k) for k in doc["eval_ks"])
    if "n_workers" in doc:
        kwargs["n_workers"] = int(doc["n_workers"])
    return ScenarioConfig(net_a=net_a, net_b=net_b, attack=attack, **kwargs)


def load_scenario_config(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return scenario_from_dict(doc, base_dir=path.parent)
