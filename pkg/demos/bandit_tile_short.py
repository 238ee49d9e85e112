"""Short training run on the bandit tile for every agent variant.

Run with ``python demos/bandit_tile_short.py``; a few seconds on one core.
The budget is far below the full study, so the ranking here is noisy.
"""
import numpy as np

from oppo.agent import VARIANTS, Agent, AgentConfig
from oppo.harness.experiment import moving_average
from oppo.mdp import BanditTileConfig, build_bandit_tile

env = build_bandit_tile(BanditTileConfig())
steps = 100_000

for variant in VARIANTS:
    agent = Agent(AgentConfig(variant=variant), env, seed=0)
    returns = []
    while agent.timesteps + agent.config.batch_size <= steps:
        batch, _ = agent.train_step()
        returns.extend(batch.episode_returns)
    ma = moving_average(np.array(returns), 100)[-1] if returns else float("nan")
    print(f"{variant:>10}: {len(returns)} episodes, final moving-average reward {ma:.3f}")
