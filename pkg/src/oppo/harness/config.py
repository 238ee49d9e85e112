"""YAML experiment configuration. Every key must be known; unknown keys are errors."""
from __future__ import annotations

from dataclasses import asdict, fields
from pathlib import Path

import yaml

from ..agent import AgentConfig
from ..mdp import BanditTileConfig
from .experiment import EnvSpec, ExperimentConfig


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _tiles(value):
    return tuple(tuple(int(v) for v in cell) for cell in value)


def env_from_dict(d: dict | None) -> EnvSpec:
    d = dict(d or {})
    tile_keys = {f.name for f in fields(BanditTileConfig)}
    _check_keys("env", d, tile_keys | {"kind", "path"})
    kind = d.pop("kind", "bandit_tile")
    path = d.pop("path", None)
    if kind == "mdp_file" and d:
        raise ConfigError(f"bandit-tile keys given for an mdp_file environment: {', '.join(sorted(d))}")
    for k in ("goal_tiles", "start_tiles"):
        if k in d:
            d[k] = _tiles(d[k])
    if "goal_means" in d:
        d["goal_means"] = tuple(float(v) for v in d["goal_means"])
    return EnvSpec(kind=kind, bandit_tile=BanditTileConfig(**d), path=path)


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a mapping")
    top = {f.name for f in fields(ExperimentConfig)}
    _check_keys("config", d, top)
    agent = dict(d.get("agent") or {})
    _check_keys("agent", agent, {f.name for f in fields(AgentConfig)})
    variant = d.get("variant", agent.get("variant", AgentConfig.variant))
    agent["variant"] = variant
    kw = {k: v for k, v in d.items() if k not in ("agent", "env", "variant")}
    if "seeds" in kw:
        kw["seeds"] = tuple(kw["seeds"])
    try:
        return ExperimentConfig(variant=variant, env=env_from_dict(d.get("env")),
                                agent=AgentConfig(**agent), **kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def config_to_dict(config: ExperimentConfig) -> dict:
    env = {"kind": config.env.kind}
    if config.env.kind == "mdp_file":
        env["path"] = config.env.path
    else:
        tiles = asdict(config.env.bandit_tile)
        for k in ("goal_tiles", "start_tiles"):
            tiles[k] = [list(c) for c in tiles[k]]
        tiles["goal_means"] = list(tiles["goal_means"])
        env.update(tiles)
    return {
        "variant": config.variant,
        "env": env,
        "agent": asdict(config.agent),
        "total_timesteps": config.total_timesteps,
        "seeds": list(config.seeds),
        "out_dir": config.out_dir,
        "log_every": config.log_every,
        "ma_window": config.ma_window,
    }


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=False)
