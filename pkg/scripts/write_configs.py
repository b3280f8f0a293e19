#!/usr/bin/env python3
"""Regenerate the TOML files in configs/ from the built-in presets."""

from pathlib import Path

from threatshare.presets import default_scenario, net_a_profile, net_b_profile
from threatshare.synth import BenignProfile

ROOT = Path(__file__).resolve().parent.parent / "configs"


def fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(fmt(x) for x in v) + "]"
    raise TypeError(type(v))


def profile_toml(profile: BenignProfile) -> str:
    lines = ['kind = "benign"', f"seed = {profile.rng_seed}", ""]
    for port in sorted(profile.ports):
        act = profile.ports[port]
        lines.append(f"[ports.{port}]")
        for key in (
            "rate_per_min", "diurnal_amplitude", "diurnal_phase",
            "duration_lognorm", "orig_bytes_lognorm", "resp_bytes_lognorm",
            "orig_pkts_lognorm", "resp_pkts_lognorm", "internal_hosts",
            "external_hosts", "new_external_prob", "proto",
        ):
            lines.append(f"{key} = {fmt(getattr(act, key))}")
        probs = ", ".join(f"{s} = {p!r}" for s, p in act.state_probs.items())
        lines.append("state_probs = {" + probs + "}")
        lines.append("")
    return "\n".join(lines)


def scenario_toml(shifted: bool) -> str:
    cfg = default_scenario(shifted=shifted)
    b_profile = "net_b_shifted.toml" if shifted else "net_b.toml"
    return f"""# Two-network scenario: one week of training and one test day per site,
# fast scan at site A, fast and {int(cfg.attack.slow_factor)}x slowed scans at site B.
train_days = {cfg.train_days}
test_days = {cfg.test_days}
strategies = {fmt(cfg.strategies)}
variants = {fmt(cfg.variants)}
adapt_k = {cfg.adapt_k}
rf_seed = {cfg.rf_seed}
label_quantile = {cfg.label_quantile!r}
distance_method = "{cfg.distance_method}"

[net_a]
profile = "net_a.toml"
seed = {cfg.net_a.seed}
site_id = "{cfg.net_a.site_id}"

[net_b]
profile = "{b_profile}"
seed = {cfg.net_b.seed}
site_id = "{cfg.net_b.site_id}"

[attack]
ports = {fmt(cfg.attack.ports)}
fast_rate = {cfg.attack.fast_rate!r}
slow_factor = {cfg.attack.slow_factor!r}
n_windows = {cfg.attack.n_windows}
start_offset = {cfg.attack.start_offset!r}
n_infected = {cfg.attack.n_infected}
victim_space = {cfg.attack.victim_space}
scan_duration = {cfg.attack.scan_duration!r}
"""


SCAN_EXAMPLE = """# Telnet scan trace in the shape used by the experiments:
# unanswered S0 connections at a fixed rate toward fresh victims.
kind = "scan"
seed = 1
port = 23
rate_per_min = 750.0
n_infected = 10
victim_space = 60000
state = "S0"
scan_duration = 3.0
start = 640800.0
n_windows = 63
"""


def main() -> None:
    ROOT.mkdir(exist_ok=True)
    (ROOT / "net_a.toml").write_text(profile_toml(net_a_profile()))
    (ROOT / "net_b.toml").write_text(profile_toml(net_b_profile()))
    (ROOT / "net_b_shifted.toml").write_text(profile_toml(net_b_profile(shifted=True)))
    (ROOT / "scan_telnet.toml").write_text(SCAN_EXAMPLE)
    (ROOT / "scenario_default.toml").write_text(scenario_toml(False))
    (ROOT / "scenario_shifted.toml").write_text(scenario_toml(True))
    print(f"wrote configs under {ROOT}")


if __name__ == "__main__":
    main()
