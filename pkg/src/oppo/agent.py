"""Tabular PPO / OPPO agent: rollouts, two-head GAE, optimistic advantage, clipped updates."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .mdp import TabularMDP
from .nn import Adam, FeedForwardNet, one_hot
from .rnd import RndEstimator

VARIANTS = ("ppo", "oppo_exact", "oppo_rnd", "rnd")
CHECKPOINT_VERSION = 1


@dataclass
class AgentConfig:
    variant: str = "oppo_exact"
    beta: float = 1.0
    c: float = 0.01
    clip: float = 0.1
    gamma: float = 0.99
    lam: float = 0.95
    num_actors: int = 32
    steps_per_actor: int = 64
    epochs: int = 4
    minibatches: int = 4
    policy_lr: float = 1e-2
    value_lr: float = 1e-2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    eta2_aggregate: str = "mean"
    rnd_lr: float = 2e-3
    rnd_updates: int = 4
    rnd_hidden: int = 64
    rnd_out: int = 32
    rnd_normalize: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not (0.0 < self.clip < 1.0):
            raise ValueError("clip epsilon must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0) or not (0.0 <= self.lam <= 1.0):
            raise ValueError("gamma must lie in (0, 1] and lambda in [0, 1]")
        if self.beta < 0 or self.c < 0:
            raise ValueError("beta and c must be non-negative")
        if min(self.num_actors, self.steps_per_actor, self.epochs, self.minibatches) < 1:
            raise ValueError("actors, steps, epochs and minibatches must be positive")
        if self.eta2_aggregate not in ("mean", "sum"):
            raise ValueError("eta2_aggregate must be 'mean' or 'sum'")

    @property
    def bonus_source(self) -> str:
        return {"ppo": "zero", "oppo_exact": "count", "oppo_rnd": "rnd", "rnd": "rnd"}[self.variant]

    @property
    def batch_size(self) -> int:
        return self.num_actors * self.steps_per_actor


@dataclass
class TrajectoryBatch:
    """Arrays of shape (N, T) indexed by (actor, step)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    bonus: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    logp: np.ndarray
    episode_start: np.ndarray
    count_bonus: np.ndarray
    rnd_raw: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.states.shape


@dataclass
class ActorStreams:
    """Per-actor environment position, carried across batches."""

    state: np.ndarray
    step: np.ndarray
    ret: np.ndarray

    @classmethod
    def start(cls, env: TabularMDP, n: int, rng: np.random.Generator) -> "ActorStreams":
        return cls(env.sample_initial(rng, n), np.zeros(n, dtype=np.int64), np.zeros(n))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def collect(probs: np.ndarray, env: TabularMDP, streams: ActorStreams, N: int, T: int,
            rng: np.random.Generator, counts: np.ndarray, bonus: str = "zero",
            rnd: RndEstimator | None = None, rnd_normalize: bool = False) -> TrajectoryBatch:
    """Roll N actor streams forward T steps under the policy ``probs`` (S, A).

    ``counts`` holds next-state visitation counts and is updated in place in
    visitation order (step-major, actor index ascending within a step).
    ``bonus`` selects r2: "zero", "count" (1/n_{s'}) or "rnd" (bonus of s').
    """
    if bonus not in ("zero", "count", "rnd"):
        raise ValueError(f"unknown bonus source {bonus!r}")
    if bonus == "rnd" and rnd is None:
        raise ValueError("rnd bonus source requires an estimator")
    shape = (N, T)
    states = np.zeros(shape, dtype=np.int64)
    actions = np.zeros(shape, dtype=np.int64)
    next_states = np.zeros(shape, dtype=np.int64)
    rewards = np.zeros(shape)
    dones = np.zeros(shape, dtype=bool)
    logp = np.zeros(shape)
    ep_start = np.zeros(shape, dtype=bool)
    count_bonus = np.zeros(shape)
    cdf = np.cumsum(probs, axis=1)
    finished = []
    for h in range(T):
        s = streams.state
        ep_start[:, h] = streams.step == 0
        rows = cdf[s]
        a = (rows <= (rng.random(N) * rows[:, -1])[:, None]).sum(axis=1)
        s2 = env.sample_next(s, a, rng.random(N))
        r = env.reward_mean[s, a] + env.reward_std[s, a] * rng.standard_normal(N)
        streams.step = streams.step + 1
        done = env.terminal[s2] | (streams.step >= env.horizon)
        for n in range(N):
            counts[s2[n]] += 1
            count_bonus[n, h] = 1.0 / counts[s2[n]]
        states[:, h], actions[:, h], next_states[:, h] = s, a, s2
        rewards[:, h], dones[:, h] = r, done
        logp[:, h] = np.log(probs[s, a])
        streams.ret = streams.ret + r
        new_state = s2.copy()
        if done.any():
            idx = np.flatnonzero(done)
            finished.extend(streams.ret[idx].tolist())
            new_state[idx] = env.sample_initial(rng, len(idx))
            streams.step[idx] = 0
            streams.ret[idx] = 0.0
        streams.state = new_state

    rnd_raw = None
    if rnd is not None:
        # bonus table over all one-hot states, then gathered per sample
        eye = np.eye(env.num_states)
        rnd_raw = np.asarray(rnd.raw_bonus(eye))[next_states]
    if bonus == "zero":
        r2 = np.zeros(shape)
    elif bonus == "count":
        r2 = count_bonus.copy()
    elif rnd_normalize:
        r2 = np.asarray(rnd.normalized_bonus(eye))[next_states]
    else:
        r2 = rnd_raw.copy()
    return TrajectoryBatch(states, actions, rewards, r2, next_states, dones, logp, ep_start,
                           count_bonus, rnd_raw, finished)


# ---------------------------------------------------------------------------
# advantage estimation
# ---------------------------------------------------------------------------

def gae(rewards: np.ndarray, v_s: np.ndarray, v_next: np.ndarray, dones: np.ndarray,
        discount: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates along axis 1, truncated at done flags."""
    N, T = rewards.shape
    notdone = 1.0 - dones.astype(float)
    delta = rewards + discount * v_next * notdone - v_s
    adv = np.zeros((N, T))
    acc = np.zeros(N)
    for h in range(T - 1, -1, -1):
        acc = delta[:, h] + discount * lam * notdone[:, h] * acc
        adv[:, h] = acc
    return adv


def gae_two_head(batch: TrajectoryBatch, v1: np.ndarray, v2: np.ndarray, gamma: float,
                 lam: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Head i discounts with gamma**i. Returns A1, A2 and value targets V_i + A_i."""
    s, s2 = batch.states, batch.next_states
    a1 = gae(batch.rewards, v1[s], v1[s2], batch.dones, gamma, lam)
    a2 = gae(batch.bonus, v2[s], v2[s2], batch.dones, gamma ** 2, lam)
    return a1, a2, v1[s] + a1, v2[s] + a2


def eta2_estimate(batch: TrajectoryBatch, v2: np.ndarray, a2: np.ndarray,
                  aggregate: str = "mean") -> float:
    """Batch estimate of eta2 from V2(s0) + A2(s0, a0) at each stream's first episode start.

    Streams without an episode start in the batch fall back to their step 0.
    Per-stream values are clamped at 0 before aggregation.
    """
    N = batch.shape[0]
    first = np.where(batch.episode_start.any(axis=1), batch.episode_start.argmax(axis=1), 0)
    rows = np.arange(N)
    per_stream = np.maximum(0.0, v2[batch.states[rows, first]] + a2[rows, first])
    return float(per_stream.sum() if aggregate == "sum" else per_stream.mean())


def optimistic_advantage(a1: np.ndarray, a2: np.ndarray, beta: float, c: float,
                         eta2: float) -> np.ndarray:
    """A1 + beta * A2 / sqrt(eta2 + c)."""
    if beta == 0:
        return np.array(a1, dtype=float, copy=True)
    if eta2 + c <= 0:
        raise ValueError("eta2 + c must be positive")
    return a1 + beta * a2 / np.sqrt(eta2 + c)


# ---------------------------------------------------------------------------
# clipped surrogate
# ---------------------------------------------------------------------------

def clipped_loss(logp_new: np.ndarray, logp_old: np.ndarray, adv: np.ndarray, eps: float) -> float:
    ratio = np.exp(logp_new - logp_old)
    return float(np.mean(np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)))


def policy_objective(logits: np.ndarray, states: np.ndarray, actions: np.ndarray,
                     logp_old: np.ndarray, adv: np.ndarray, eps: float,
                     entropy_coef: float = 0.0) -> tuple[float, float, float, np.ndarray]:
    """Clipped surrogate plus entropy bonus and its gradient w.r.t. the logits.

    Returns (surrogate, mean entropy, clip fraction, gradient).
    """
    B = len(states)
    probs = softmax(logits)
    logpi = np.log(probs)
    p_s = probs[states]
    logp_new = logpi[states, actions]
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1 - eps, 1 + eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    # gradient flows only where the unclipped branch attains the minimum
    active = ratio * adv <= clipped * adv
    coef = np.where(active, adv * ratio, 0.0) / B
    g = -coef[:, None] * p_s
    g[np.arange(B), actions] += coef

    ent_s = -(probs * logpi).sum(axis=1)
    ent = ent_s[states]
    if entropy_coef:
        g += entropy_coef * (-p_s * (logpi[states] + ent[:, None])) / B

    grad = np.zeros_like(logits)
    np.add.at(grad, states, g)
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > eps))
    return float(surr.mean()), float(ent.mean()), clip_frac, grad


# ---------------------------------------------------------------------------
# the agent
# ---------------------------------------------------------------------------

class NonFiniteLossError(FloatingPointError):
    pass


class Agent:
    def __init__(self, config: AgentConfig, env: TabularMDP, seed: int = 0):
        self.config = config
        self.env = env
        S, A = env.num_states, env.num_actions
        self.logits = np.zeros((S, A))
        self.v1 = np.zeros(S)
        self.v2 = np.zeros(S)
        self.policy_opt = Adam(lr=config.policy_lr)
        self.value_opt = Adam(lr=config.value_lr)
        agent_ss, rnd_ss = np.random.SeedSequence(seed).spawn(2)
        self.rng = np.random.default_rng(agent_ss)
        self.counts = np.zeros(S, dtype=np.int64)
        self.rnd = None
        if config.bonus_source == "rnd":
            self.rnd = RndEstimator(S, np.random.default_rng(rnd_ss), hidden=config.rnd_hidden,
                                    out=config.rnd_out, lr=config.rnd_lr)
        self.streams = None
        self.timesteps = 0
        self.updates = 0

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    def collect(self) -> TrajectoryBatch:
        cfg = self.config
        if self.streams is None:
            self.streams = ActorStreams.start(self.env, cfg.num_actors, self.rng)
        batch = collect(self.probs, self.env, self.streams, cfg.num_actors, cfg.steps_per_actor,
                        self.rng, self.counts, cfg.bonus_source, self.rnd, cfg.rnd_normalize)
        self.timesteps += cfg.batch_size
        return batch

    def advantages(self, batch: TrajectoryBatch) -> dict:
        cfg = self.config
        if cfg.variant == "rnd":
            combined = batch.rewards + batch.bonus
            s, s2 = batch.states, batch.next_states
            a1 = gae(combined, self.v1[s], self.v1[s2], batch.dones, cfg.gamma, cfg.lam)
            return {"adv": a1, "ret1": self.v1[s] + a1, "ret2": None, "eta2": float("nan")}
        a1, a2, ret1, ret2 = gae_two_head(batch, self.v1, self.v2, cfg.gamma, cfg.lam)
        eta2 = eta2_estimate(batch, self.v2, a2, cfg.eta2_aggregate)
        if cfg.variant == "ppo":
            adv = a1
        else:
            adv = optimistic_advantage(a1, a2, cfg.beta, cfg.c, eta2)
        return {"adv": adv, "a1": a1, "a2": a2, "ret1": ret1, "ret2": ret2, "eta2": eta2}

    def update(self, batch: TrajectoryBatch) -> dict:
        cfg = self.config
        est = self.advantages(batch)
        states = batch.states.ravel()
        actions = batch.actions.ravel()
        logp_old = batch.logp.ravel()
        adv = est["adv"].ravel()
        ret1 = est["ret1"].ravel()
        ret2 = None if est["ret2"] is None else est["ret2"].ravel()
        if not np.all(np.isfinite(adv)):
            raise NonFiniteLossError("non-finite advantage; update aborted")

        surr_l, ent_l, clip_l, vloss_l = [], [], [], []
        for _ in range(cfg.epochs):
            perm = self.rng.permutation(len(states))
            for mb in np.array_split(perm, cfg.minibatches):
                if len(mb) == 0:
                    continue
                s, a = states[mb], actions[mb]
                surr, ent, clip_frac, g_pi = policy_objective(
                    self.logits, s, a, logp_old[mb], adv[mb], cfg.clip, cfg.entropy_coef)
                B = len(mb)
                err1 = self.v1[s] - ret1[mb]
                g_v1 = np.zeros_like(self.v1)
                np.add.at(g_v1, s, 2.0 * cfg.value_coef * err1 / B)
                vloss = float(np.mean(err1 ** 2))
                g_v2 = np.zeros_like(self.v2)
                if ret2 is not None:
                    err2 = self.v2[s] - ret2[mb]
                    np.add.at(g_v2, s, 2.0 * cfg.value_coef * err2 / B)
                    vloss += float(np.mean(err2 ** 2))
                total = surr - cfg.value_coef * vloss + cfg.entropy_coef * ent
                if not np.isfinite(total) or not np.all(np.isfinite(g_pi)):
                    raise NonFiniteLossError(f"non-finite loss at update {self.updates}; aborted")
                self.policy_opt.step([self.logits], [-g_pi])
                self.value_opt.step([self.v1, self.v2], [g_v1, g_v2])
                surr_l.append(surr)
                ent_l.append(ent)
                clip_l.append(clip_frac)
                vloss_l.append(vloss)

        rnd_loss = float("nan")
        if self.rnd is not None:
            visits = np.bincount(batch.next_states.ravel(), minlength=self.env.num_states)
            seen = np.flatnonzero(visits)
            x = one_hot(seen, self.env.num_states)
            for _ in range(cfg.rnd_updates):
                rnd_loss = self.rnd.update_predictor(x, visits[seen])
        self.updates += 1

        rets = batch.episode_returns
        ratio = float("nan")
        if batch.rnd_raw is not None:
            ratio = bonus_ratio(batch.rnd_raw, batch.count_bonus)
        return {
            "timestep": self.timesteps,
            "episodes": len(rets),
            "mean_episode_reward": float(np.mean(rets)) if rets else float("nan"),
            "eta2": est["eta2"],
            "entropy": float(np.mean(ent_l)),
            "clip_fraction": float(np.mean(clip_l)),
            "surrogate": float(np.mean(surr_l)),
            "value_loss": float(np.mean(vloss_l)),
            "mean_r2": float(batch.bonus.mean()),
            "bonus_ratio": ratio,
            "rnd_loss": rnd_loss,
        }

    def train_step(self) -> tuple[TrajectoryBatch, dict]:
        batch = self.collect()
        return batch, self.update(batch)

    # -- checkpoints ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {
            "version": np.array(CHECKPOINT_VERSION),
            "config": np.array(json.dumps(asdict(self.config))),
            "logits": self.logits, "v1": self.v1, "v2": self.v2, "counts": self.counts,
            "timesteps": np.array(self.timesteps), "updates": np.array(self.updates),
            "rng_state": np.array(json.dumps(self.rng.bit_generator.state)),
        }
        for prefix, opt in (("popt_", self.policy_opt), ("vopt_", self.value_opt)):
            arrays.update({prefix + k: v for k, v in opt.state_arrays().items()})
        if self.streams is not None:
            arrays.update(stream_state=self.streams.state, stream_step=self.streams.step,
                          stream_ret=self.streams.ret)
        if self.rnd is not None:
            for i, p in enumerate(self.rnd.target.params):
                arrays[f"rnd_target_{i}"] = p
            for i, p in enumerate(self.rnd.predictor.params):
                arrays[f"rnd_pred_{i}"] = p
            arrays.update({"ropt_" + k: v for k, v in self.rnd.optimizer.state_arrays().items()})
            arrays["rnd_stats"] = np.array([self.rnd.count, self.rnd.mean, self.rnd.m2])
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path, env: TabularMDP) -> "Agent":
        with np.load(path) as d:
            d = dict(d)
        if int(d["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(d['version'])}")
        cfg = AgentConfig(**json.loads(str(d["config"])))
        agent = cls(cfg, env)
        agent.logits, agent.v1, agent.v2 = d["logits"], d["v1"], d["v2"]
        agent.counts = d["counts"]
        agent.timesteps, agent.updates = int(d["timesteps"]), int(d["updates"])
        agent.rng.bit_generator.state = json.loads(str(d["rng_state"]))
        for prefix, opt in (("popt_", agent.policy_opt), ("vopt_", agent.value_opt)):
            sub = {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}
            opt.load_arrays(sub)
        if "stream_state" in d:
            agent.streams = ActorStreams(d["stream_state"], d["stream_step"], d["stream_ret"])
        if agent.rnd is not None:
            for net, tag in ((agent.rnd.target, "target"), (agent.rnd.predictor, "pred")):
                params = [d[f"rnd_{tag}_{i}"] for i in range(2 * len(net.weights))]
                net.weights = params[0::2]
                net.biases = params[1::2]
            agent.rnd.optimizer.load_arrays({k[5:]: v for k, v in d.items() if k.startswith("ropt_")})
            count, mean, m2 = d["rnd_stats"]
            agent.rnd.count, agent.rnd.mean, agent.rnd.m2 = int(count), float(mean), float(m2)
        return agent


def bonus_ratio(rnd_raw: np.ndarray, count_bonus: np.ndarray) -> float:
    """Batch mean of RND bonus divided by the exact count bonus 1/n_{s'}."""
    return float(np.mean(np.asarray(rnd_raw) / np.asarray(count_bonus)))
