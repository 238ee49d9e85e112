"""Finite-horizon tabular MDPs: construction, simulation, sticky actions, layering."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ROW_TOL = 1e-9

# up, down, left, right as (drow, dcol)
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Ground-truth MDP <S, A, r, T, rho, H> with Gaussian rewards.

    ``transition`` has shape (S, A, S). ``terminal[s]`` marks absorbing
    states: entering one ends the episode and nothing accrues afterwards.
    """

    transition: np.ndarray
    reward_mean: np.ndarray
    reward_std: np.ndarray
    initial_dist: np.ndarray
    horizon: int
    terminal: np.ndarray = None
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        T = np.array(self.transition, dtype=float)
        S, A = T.shape[0], T.shape[1]
        if T.ndim != 3 or T.shape[2] != S:
            raise ValueError(f"transition must have shape (S, A, S), got {T.shape}")
        if np.any(T < 0) or np.any(np.abs(T.sum(axis=2) - 1.0) > ROW_TOL):
            raise ValueError("transition rows must be non-negative and sum to 1")
        r = np.array(self.reward_mean, dtype=float)
        sd = np.array(self.reward_std, dtype=float)
        if r.shape != (S, A) or sd.shape != (S, A):
            raise ValueError("reward tables must have shape (S, A)")
        if np.any(sd < 0):
            raise ValueError("reward_std must be non-negative")
        rho = np.array(self.initial_dist, dtype=float)
        if rho.shape != (S,) or np.any(rho < 0) or abs(rho.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_dist must be a probability vector over states")
        if int(self.horizon) < 1:
            raise ValueError("horizon must be >= 1")
        term = np.zeros(S, dtype=bool) if self.terminal is None else np.array(self.terminal, dtype=bool)
        if term.shape != (S,):
            raise ValueError("terminal must have shape (S,)")
        for name, arr in (("transition", T), ("reward_mean", r), ("reward_std", sd),
                          ("initial_dist", rho), ("terminal", term)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "horizon", int(self.horizon))
        cdf = np.cumsum(T, axis=2)
        cdf.setflags(write=False)
        object.__setattr__(self, "_cdf", cdf)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def support(self) -> np.ndarray:
        """Boolean (S, A, S) mask of successors with positive probability."""
        return self.transition > 0

    def sample_next(self, states: np.ndarray, actions: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF successor draw for uniforms ``u`` in [0, 1)."""
        rows = self._cdf[states, actions]
        thresh = (u * rows[..., -1])[..., None]
        return (rows <= thresh).sum(axis=-1)

    def reset(self, rng: np.random.Generator) -> int:
        return int(self.sample_initial(rng, 1)[0])

    def sample_initial(self, rng: np.random.Generator, n: int) -> np.ndarray:
        cdf = np.cumsum(self.initial_dist)
        u = rng.random(n) * cdf[-1]
        return (cdf[None, :] <= u[:, None]).sum(axis=1)


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    step_index: int
    episode_done: bool


def step(mdp: TabularMDP, state: int, action: int, rng: np.random.Generator,
         step_index: int = 0) -> Transition:
    """Advance one step: sample the successor, then the Gaussian reward."""
    S, A = mdp.num_states, mdp.num_actions
    if not (0 <= state < S and 0 <= action < A):
        raise IndexError(f"invalid state/action ({state}, {action}) for S={S}, A={A}")
    if not (0 <= step_index < mdp.horizon):
        raise IndexError(f"step_index {step_index} outside horizon {mdp.horizon}")
    if mdp.terminal[state]:
        raise ValueError(f"state {state} is terminal; the episode has already ended")
    u = rng.random()
    z = rng.standard_normal()
    nxt = int(mdp.sample_next(np.asarray(state), np.asarray(action), np.asarray(u)))
    reward = float(mdp.reward_mean[state, action] + mdp.reward_std[state, action] * z)
    done = bool(mdp.terminal[nxt]) or step_index + 1 == mdp.horizon
    return Transition(state, action, reward, nxt, step_index, done)


def rollout(mdp: TabularMDP, policy: Callable[[int, int], int], rng: np.random.Generator,
            start: int | None = None) -> list[Transition]:
    """Run one episode; ``policy(state, step_index)`` returns an action index."""
    s = mdp.reset(rng) if start is None else int(start)
    out = []
    for h in range(mdp.horizon):
        t = step(mdp, s, policy(s, h), rng, h)
        out.append(t)
        if t.episode_done:
            break
        s = t.next_state
    return out


def sticky_wrap(mdp: TabularMDP, zeta: float) -> TabularMDP:
    """Sticky-action MDP over augmented states ``(state, previous executed action)``.

    Augmented index is ``s * (A + 1) + prev``; slot ``prev == A`` is the
    initial no-op, under which the chosen action always executes. Rewards
    are moment-matched: mean and variance of the executed-action mixture.
    """
    if not (0.0 <= zeta < 1.0):
        raise ValueError(f"zeta must lie in [0, 1), got {zeta}")
    S, A = mdp.num_states, mdp.num_actions
    P = A + 1
    n = S * P
    T = np.zeros((n, A, n))
    r = np.zeros((n, A))
    sd = np.zeros((n, A))
    for s in range(S):
        for prev in range(P):
            i = s * P + prev
            for a in range(A):
                if prev == A or prev == a or zeta == 0.0:
                    r[i, a] = mdp.reward_mean[s, a]
                    sd[i, a] = mdp.reward_std[s, a]
                    T[i, a, np.arange(S) * P + a] = mdp.transition[s, a]
                    continue
                mix = {a: 1.0 - zeta, prev: zeta}
                mean = sum(w * mdp.reward_mean[s, e] for e, w in mix.items())
                second = sum(w * (mdp.reward_std[s, e] ** 2 + mdp.reward_mean[s, e] ** 2)
                             for e, w in mix.items())
                r[i, a] = mean
                sd[i, a] = np.sqrt(max(second - mean ** 2, 0.0))
                for e, w in mix.items():
                    T[i, a, np.arange(S) * P + e] += w * mdp.transition[s, e]
    rho = np.zeros(n)
    rho[np.arange(S) * P + A] = mdp.initial_dist
    term = np.repeat(mdp.terminal, P)
    info = dict(mdp.info, sticky_zeta=zeta, base_states=S)
    return TabularMDP(T, r, sd, rho, mdp.horizon, term, info)


def enumerate_dag_layers(mdp: TabularMDP) -> list[frozenset]:
    """States reachable at each time step h = 0..H.

    Terminal states appear in the layer where they are entered but are not
    expanded further.
    """
    support = mdp.support()
    current = set(np.flatnonzero(mdp.initial_dist > 0).tolist())
    layers = [frozenset(current)]
    for _ in range(mdp.horizon):
        nxt = set()
        for s in current:
            if mdp.terminal[s]:
                continue
            nxt.update(np.flatnonzero(support[s].any(axis=0)).tolist())
        layers.append(frozenset(nxt))
        current = nxt
    return layers


# ---------------------------------------------------------------------------
# bandit tile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BanditTileConfig:
    """Grid world with two stochastic goal tiles and two start tiles.

    Cells are ``(row, col)``; state index is ``row * width + col``.  The
    default puts both starts near the bottom-left corner, the 0.3 tile two
    columns away and the 0.5 tile in the far top-right corner, so a random
    walk finds the better tile in only about 2.5% of episodes.
    """

    width: int = 11
    height: int = 11
    goal_tiles: tuple = ((0, 10), (10, 2))
    goal_means: tuple = (0.5, 0.3)
    reward_std: float = float(np.sqrt(0.5))
    start_tiles: tuple = ((10, 0), (8, 0))
    max_steps: int = 100

    def cell_index(self, cell: Sequence[int]) -> int:
        return int(cell[0]) * self.width + int(cell[1])


def build_bandit_tile(config: BanditTileConfig = BanditTileConfig()) -> TabularMDP:
    W, Hh = config.width, config.height
    if W < 1 or Hh < 1 or config.max_steps < 1:
        raise ValueError("grid dimensions and max_steps must be positive")
    goals = [tuple(g) for g in config.goal_tiles]
    starts = [tuple(s) for s in config.start_tiles]
    if len(goals) != len(config.goal_means):
        raise ValueError("one mean per goal tile required")
    cells = goals + starts
    for r_, c_ in cells:
        if not (0 <= r_ < Hh and 0 <= c_ < W):
            raise ValueError(f"tile {(r_, c_)} lies outside the {Hh}x{W} grid")
    if len(set(cells)) != len(cells):
        raise ValueError("goal and start tiles must be distinct cells")

    S, A = W * Hh, len(MOVES)
    T = np.zeros((S, A, S))
    r = np.zeros((S, A))
    sd = np.zeros((S, A))
    goal_mean = {config.cell_index(g): m for g, m in zip(goals, config.goal_means)}
    terminal = np.zeros(S, dtype=bool)
    terminal[list(goal_mean)] = True
    for row in range(Hh):
        for col in range(W):
            s = row * W + col
            for a, (dr, dc) in enumerate(MOVES):
                nr, nc = row + dr, col + dc
                s2 = nr * W + nc if (0 <= nr < Hh and 0 <= nc < W) else s
                if terminal[s]:
                    s2 = s
                T[s, a, s2] = 1.0
                if not terminal[s] and s2 in goal_mean:
                    r[s, a] = goal_mean[s2]
                    sd[s, a] = config.reward_std
    rho = np.zeros(S)
    for st in starts:
        rho[config.cell_index(st)] += 1.0 / len(starts)
    info = {"kind": "bandit_tile", "width": W, "height": Hh,
            "goals": goals, "goal_means": tuple(config.goal_means), "starts": starts}
    return TabularMDP(T, r, sd, rho, config.max_steps, terminal, info)


# ---------------------------------------------------------------------------
# random layered DAGs (verification instances)
# ---------------------------------------------------------------------------

def random_layered_mdp(rng: np.random.Generator, max_states: int = 6, max_actions: int = 3,
                       max_horizon: int = 5, reward_std: float = 0.5) -> TabularMDP:
    """Random time-layered DAG MDP.

    Layer k holds the states visited at step k; the last layer feeds a
    single terminal sink so every row stays stochastic. The sink is counted
    in ``max_states``.
    """
    H = int(rng.integers(1, max_horizon + 1))
    H = min(H, max_states - 1)
    A = int(rng.integers(1, max_actions + 1))
    # at least one state per layer, plus the sink
    sizes = np.ones(H, dtype=int)
    for _ in range(int(rng.integers(0, max_states - H))):
        sizes[rng.integers(H)] += 1
    S = int(sizes.sum()) + 1
    sink = S - 1
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    T = np.zeros((S, A, S))
    for k in range(H):
        for s in range(offsets[k], offsets[k + 1]):
            for a in range(A):
                if k + 1 < H:
                    succ = np.arange(offsets[k + 1], offsets[k + 2])
                    keep = succ[rng.random(len(succ)) < 0.7]
                    if len(keep) == 0:
                        keep = succ[[rng.integers(len(succ))]]
                    T[s, a, keep] = rng.dirichlet(np.ones(len(keep)))
                else:
                    T[s, a, sink] = 1.0
    T[sink, :, sink] = 1.0
    r = rng.uniform(-1.0, 1.0, size=(S, A))
    r[sink] = 0.0
    sd = np.full((S, A), reward_std)
    sd[sink] = 0.0
    rho = np.zeros(S)
    rho[offsets[0]:offsets[1]] = rng.dirichlet(np.ones(sizes[0]))
    term = np.zeros(S, dtype=bool)
    term[sink] = True
    return TabularMDP(T, r, sd, rho, H, term, {"kind": "layered_dag", "layer_sizes": sizes.tolist()})


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------

MDP_FORMAT_VERSION = 1


def mdp_to_dict(mdp: TabularMDP) -> dict:
    return {
        "format": "oppo-mdp",
        "version": MDP_FORMAT_VERSION,
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "horizon": mdp.horizon,
        "initial_dist": mdp.initial_dist.tolist(),
        "terminal": [int(s) for s in np.flatnonzero(mdp.terminal)],
        "rows": [
            {"state": s, "action": a,
             "next": {str(int(t)): float(mdp.transition[s, a, t])
                      for t in np.flatnonzero(mdp.transition[s, a])},
             "reward_mean": float(mdp.reward_mean[s, a]),
             "reward_std": float(mdp.reward_std[s, a])}
            for s in range(mdp.num_states) for a in range(mdp.num_actions)
        ],
    }


def mdp_from_dict(d: dict) -> TabularMDP:
    if d.get("format") != "oppo-mdp":
        raise ValueError("not an oppo-mdp document")
    if d.get("version") != MDP_FORMAT_VERSION:
        raise ValueError(f"unsupported mdp format version {d.get('version')}")
    S, A = int(d["num_states"]), int(d["num_actions"])
    T = np.zeros((S, A, S))
    r = np.zeros((S, A))
    sd = np.zeros((S, A))
    for row in d["rows"]:
        s, a = int(row["state"]), int(row["action"])
        for t, p in row["next"].items():
            T[s, a, int(t)] = float(p)
        r[s, a] = float(row["reward_mean"])
        sd[s, a] = float(row["reward_std"])
    term = np.zeros(S, dtype=bool)
    term[list(d.get("terminal", []))] = True
    return TabularMDP(T, r, sd, np.array(d["initial_dist"], dtype=float), int(d["horizon"]), term)


def save_mdp(mdp: TabularMDP, path: str | Path) -> None:
    # repr-precision floats round-trip exactly through json
    Path(path).write_text(json.dumps(mdp_to_dict(mdp), indent=1) + "\n", encoding="utf-8")


def load_mdp(path: str | Path) -> TabularMDP:
    return mdp_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
