"""Experiment orchestration: per-seed training runs, metrics CSVs and summaries."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..agent import Agent, AgentConfig, TrajectoryBatch, bonus_ratio
from ..mdp import BanditTileConfig, TabularMDP, build_bandit_tile, load_mdp


@dataclass(frozen=True)
class EnvSpec:
    """Either bandit-tile parameters or a path to a saved MDP file."""

    kind: str = "bandit_tile"
    bandit_tile: BanditTileConfig = field(default_factory=BanditTileConfig)
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("bandit_tile", "mdp_file"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.kind == "mdp_file" and not self.path:
            raise ValueError("mdp_file environment needs a path")

    def build(self) -> TabularMDP:
        if self.kind == "mdp_file":
            return load_mdp(self.path)
        return build_bandit_tile(self.bandit_tile)


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "oppo_exact"
    env: EnvSpec = field(default_factory=EnvSpec)
    agent: AgentConfig = field(default_factory=AgentConfig)
    total_timesteps: int = 1_000_000
    seeds: tuple = tuple(range(10))
    out_dir: str = "runs/default"
    log_every: int = 1
    ma_window: int = 100

    def __post_init__(self):
        # the top-level variant tag wins over the one inside the agent block
        if self.agent.variant != self.variant:
            object.__setattr__(self, "agent", replace(self.agent, variant=self.variant))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.total_timesteps < self.agent.batch_size:
            raise ValueError(f"budget {self.total_timesteps} is smaller than one batch "
                             f"({self.agent.batch_size} steps)")
        if self.log_every < 1 or self.ma_window < 1:
            raise ValueError("log_every and ma_window must be at least 1")


@dataclass(frozen=True)
class MetricsRow:
    timestep: int
    update: int
    episodes: int
    ma_reward: float
    eta2: float
    entropy: float
    clip_fraction: float
    mean_r2: float
    bonus_ratio: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


SUMMARY_COLUMNS = ["timestep", "mean_ma_reward", "std_ma_reward", "n_seeds"]


def moving_average(series, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` values; shorter prefixes average what exists."""
    if window < 1:
        raise ValueError("window must be at least 1")
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        return x.copy()
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def bonus_ratio_diagnostic(batch: TrajectoryBatch) -> float:
    """Batch mean of the RND bonus over the exact count bonus 1/n_{s'}; NaN without RND."""
    if batch.rnd_raw is None:
        return float("nan")
    return bonus_ratio(batch.rnd_raw, batch.count_bonus)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}


def run_seed(config: ExperimentConfig, seed: int, env: TabularMDP | None = None) -> list[MetricsRow]:
    """Train one seed to the budget and return its metrics rows (not written)."""
    env = env if env is not None else config.env.build()
    agent = Agent(config.agent, env, seed)
    returns: list[float] = []
    rows = []
    while agent.timesteps + config.agent.batch_size <= config.total_timesteps:
        batch, m = agent.train_step()
        returns.extend(batch.episode_returns)
        if agent.updates % config.log_every:
            continue
        ma = float(np.mean(returns[-config.ma_window:])) if returns else float("nan")
        rows.append(MetricsRow(agent.timesteps, agent.updates, len(returns), ma, m["eta2"], m["entropy"],
                               m["clip_fraction"], m["mean_r2"], bonus_ratio_diagnostic(batch)))
    return rows


def _seed_job(args):
    config, seed = args
    return run_seed(config, seed)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: dict            # seed -> list[MetricsRow]
    seed_paths: dict      # seed -> Path
    summary_path: Path

    def curve(self, seed: int) -> np.ndarray:
        return np.array([r.ma_reward for r in self.rows[seed]])

    def curves(self) -> np.ndarray:
        """(n_seeds, n_points) moving-average rewards."""
        return np.stack([self.curve(s) for s in self.config.seeds])

    def timesteps(self) -> np.ndarray:
        return np.array([r.timestep for r in self.rows[self.config.seeds[0]]])


def summarize(rows_by_seed: dict) -> list[tuple]:
    seeds = list(rows_by_seed)
    steps = [r.timestep for r in rows_by_seed[seeds[0]]]
    mat = np.array([[r.ma_reward for r in rows_by_seed[s]] for s in seeds])
    out = []
    for j, t in enumerate(steps):
        col = mat[:, j]
        std = float(col.std(ddof=1)) if len(col) > 1 else 0.0
        out.append((t, float(col.mean()), std, len(col)))
    return out


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Train every seed, write ``seed_<k>.csv`` files and ``summary.csv`` to ``out_dir``."""
    out = Path(config.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_seed_job, [(config, s) for s in config.seeds]))
    else:
        env = config.env.build()
        results = [run_seed(config, s, env) for s in config.seeds]
    rows = dict(zip(config.seeds, results))

    paths = {}
    for seed, seed_rows in rows.items():
        paths[seed] = out / f"seed_{seed}.csv"
        write_csv(paths[seed], MetricsRow.columns(), [[getattr(r, c) for c in MetricsRow.columns()]
                                                      for r in seed_rows])
    summary = out / "summary.csv"
    write_csv(summary, SUMMARY_COLUMNS, summarize(rows))
    return ExperimentResult(config, rows, paths, summary)


def curve_auc(curve) -> float:
    """Mean of a moving-average curve over logging points; points before any episode count as 0."""
    return float(np.mean(np.nan_to_num(np.asarray(curve, dtype=float), nan=0.0)))


def sweep(config: ExperimentConfig, param: str, values, workers: int = 1) -> dict:
    """Run one experiment per value of an AgentConfig field, each in ``out_dir/param=value``."""
    names = {f.name for f in fields(AgentConfig)}
    if param not in names or param == "variant":
        raise ValueError(f"cannot sweep {param!r}; choose an agent field")
    if not values:
        raise ValueError("sweep needs at least one value")
    kind = type(getattr(config.agent, param))
    results = {}
    for v in values:
        v = kind(v)
        sub = replace(config, agent=replace(config.agent, **{param: v}),
                      out_dir=str(Path(config.out_dir) / f"{param}={v}"))
        results[v] = run_experiment(sub, workers)
    return results
