import json
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from hskip.errors import ConfigParse
from hskip.experiments import ScenarioConfig

REQUIRED_TOP_LEVEL_KEYS = ["scenarios", "output"]
SIMULATION_KEYS = {"max_queued", "fairness_factor", "cap", "check_invariants"}


@dataclass(frozen=True)
class CampaignFile:
    scenarios: list[ScenarioConfig]
    csv: str
    summary: str | None = None
    seed: int = 0
    raw: dict[str, Any] = field(default_factory=dict, repr=False)


def load_config(path: str = "config.yaml") -> dict[str, Any]:
    """Load a JSON or YAML campaign, inject env overrides, and validate."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")

    with open(path, encoding="utf-8") as f:
        try:
            cfg = json.load(f) if path.endswith(".json") else yaml.safe_load(f)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigParse(f"Cannot parse {path}: {e}") from e
    cfg = cfg or {}
    if not isinstance(cfg, dict):
        raise ConfigParse(f"{path} must hold a mapping at the top level")

    # Fallback seed from the environment
    env_seed = os.getenv("HSKIP_SEED")
    if env_seed and "seed" not in cfg:
        try:
            cfg["seed"] = int(env_seed, 0)
        except ValueError:
            raise ConfigParse(f"HSKIP_SEED must be an integer, got {env_seed!r}") from None

    validate_config(cfg)
    return cfg


def validate_config(cfg: dict[str, Any]) -> None:
    missing = [k for k in REQUIRED_TOP_LEVEL_KEYS if k not in cfg]
    if missing:
        raise ConfigParse(f"Missing required top-level keys in config: {missing}")

    scenarios = cfg.get("scenarios")
    if not isinstance(scenarios, list) or not scenarios:
        raise ConfigParse("'scenarios' must be a non-empty list")
    if not all(isinstance(s, dict) for s in scenarios):
        raise ConfigParse("every scenario entry must be a mapping")

    output = cfg.get("output", {})
    if not isinstance(output, dict) or not output.get("csv"):
        raise ConfigParse("'output.csv' must be provided")

    simulation = cfg.get("simulation", {})
    if not isinstance(simulation, dict):
        raise ConfigParse("'simulation' must be a mapping")
    unknown = set(simulation) - SIMULATION_KEYS
    if unknown:
        raise ConfigParse(f"Unknown simulation keys: {sorted(unknown)}")

    if not isinstance(cfg.get("seed", 0), int):
        raise ConfigParse("'seed' must be an integer")


def build_campaign(cfg: dict[str, Any], seed: int | None = None) -> CampaignFile:
    """Turn a validated mapping into scenario configs; ``seed`` overrides every entry."""
    validate_config(cfg)
    base_seed = cfg.get("seed", 0) if seed is None else seed
    defaults = dict(cfg.get("simulation", {}))
    scenarios = []
    for i, entry in enumerate(cfg["scenarios"]):
        entry = dict(entry)
        if seed is not None or "seed" not in entry:
            entry["seed"] = base_seed
        try:
            scenarios.append(ScenarioConfig.from_mapping(entry, **defaults))
        except (TypeError, ValueError) as e:
            raise ConfigParse(f"scenario #{i}: {e}") from e
    output = cfg["output"]
    return CampaignFile(scenarios, output["csv"], output.get("summary"), base_seed, cfg)
