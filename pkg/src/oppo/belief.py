"""Bayesian posterior over a tabular MDP and the local uncertainty it induces.

Transitions carry a Dirichlet posterior on a fixed successor support;
mean rewards carry a Gaussian posterior with known observation variance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TabularMDP, Transition


@dataclass
class BeliefState:
    support: np.ndarray          # (S, A, S) bool
    dirichlet_alpha: np.ndarray  # (S, A, S), zero off-support
    reward_count: np.ndarray     # n_{s,a}
    reward_sum: np.ndarray
    next_state_count: np.ndarray  # n_{s'}
    reward_variance: float       # known observation variance sigma_r^2
    q_max: float
    prior_mean: float = 0.0
    prior_var: float = np.inf

    @classmethod
    def from_mdp(cls, mdp: TabularMDP, reward_variance: float | None = None,
                 q_max: float | None = None, prior_var_scale: float = 10.0,
                 prior_mass: float = 1.0) -> "BeliefState":
        """Fresh belief whose Dirichlet support is the true one-step support.

        The default reward variance is the largest true one; the default
        ``q_max`` is ``H * max |r|``. The reward prior is N(0, scale * sigma_r^2).
        """
        S, A = mdp.num_states, mdp.num_actions
        support = mdp.support()
        if reward_variance is None:
            reward_variance = float(np.max(mdp.reward_std) ** 2)
        if q_max is None:
            q_max = mdp.horizon * float(np.max(np.abs(mdp.reward_mean)))
        prior_var = prior_var_scale * reward_variance if reward_variance > 0 else np.inf
        return cls(
            support=support.copy(),
            dirichlet_alpha=prior_mass * support.astype(float),
            reward_count=np.zeros((S, A), dtype=np.int64),
            reward_sum=np.zeros((S, A)),
            next_state_count=np.zeros(S, dtype=np.int64),
            reward_variance=float(reward_variance),
            q_max=float(q_max),
            prior_var=float(prior_var),
        )

    def __post_init__(self):
        if np.any(self.dirichlet_alpha[self.support] <= 0):
            raise ValueError("Dirichlet parameters must be positive on the support")
        if np.any(self.dirichlet_alpha[~self.support] != 0):
            raise ValueError("Dirichlet parameters must vanish off the support")

    @property
    def num_states(self) -> int:
        return self.support.shape[0]

    @property
    def num_actions(self) -> int:
        return self.support.shape[1]

    # -- updates ------------------------------------------------------------

    def observe(self, t: Transition) -> "BeliefState":
        return self.observe_tuple(t.state, t.action, t.reward, t.next_state)

    def observe_tuple(self, s: int, a: int, reward: float, s_next: int) -> "BeliefState":
        if not self.support[s, a, s_next]:
            raise ValueError(f"successor {s_next} of ({s}, {a}) is outside the Dirichlet support")
        self.dirichlet_alpha[s, a, s_next] += 1.0
        self.reward_count[s, a] += 1
        self.reward_sum[s, a] += reward
        self.next_state_count[s_next] += 1
        return self

    # -- posterior moments --------------------------------------------------

    def mean_transition(self) -> np.ndarray:
        """T_tau = alpha / sum(alpha)."""
        return self.dirichlet_alpha / self.dirichlet_alpha.sum(axis=2, keepdims=True)

    def reward_posterior(self) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the mean reward, per (s, a)."""
        n = self.reward_count.astype(float)
        if self.reward_variance == 0.0:
            # noiseless observations pin the mean after one sample
            mean = np.where(n > 0, self.reward_sum / np.maximum(n, 1), self.prior_mean)
            var = np.where(n > 0, 0.0, self.prior_var if np.isfinite(self.prior_var) else 0.0)
            return mean, var
        prior_prec = 0.0 if np.isinf(self.prior_var) else 1.0 / self.prior_var
        prec = prior_prec + n / self.reward_variance
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = (prior_prec * self.prior_mean + self.reward_sum / self.reward_variance) / prec
            var = 1.0 / prec
        mean = np.where(prec > 0, mean, self.prior_mean)
        return mean, var

    def support_size(self) -> np.ndarray:
        return self.support.sum(axis=2)

    def transition_uncertainty(self) -> np.ndarray:
        """sum_{s'} var T_hat(s,a,s') / T_tau(s,a,s') = (K - 1) / (alpha_0 + 1)."""
        a0 = self.dirichlet_alpha.sum(axis=2)
        return (self.support_size() - 1) / (a0 + 1.0)

    def nu(self) -> np.ndarray:
        """Local uncertainty table nu_tau(s, a)."""
        _, rvar = self.reward_posterior()
        return rvar + self.q_max ** 2 * self.transition_uncertainty()

    def local_uncertainty_nu(self, s: int, a: int) -> float:
        return float(self.nu()[s, a])

    def cu_bound(self, s: int, a: int, c_u: float) -> float:
        if c_u <= 0:
            raise ValueError("c_u must be positive")
        return c_u / max(int(self.reward_count[s, a]), 1)

    def next_state_count_bonus(self, s_next) -> np.ndarray | float:
        n = np.maximum(self.next_state_count[s_next], 1)
        return 1.0 / n

    # -- posterior sampling -------------------------------------------------

    def sample_models(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` posterior models: transitions (n, S, A, S), rewards (n, S, A)."""
        g = rng.gamma(np.broadcast_to(self.dirichlet_alpha, (n,) + self.dirichlet_alpha.shape))
        T = g / g.sum(axis=3, keepdims=True)
        mean, var = self.reward_posterior()
        r = mean + np.sqrt(var) * rng.standard_normal((n,) + mean.shape)
        return T, r

    def sample_mdp(self, rng: np.random.Generator, template: TabularMDP | None = None) -> TabularMDP:
        """One posterior draw as an MDP; horizon, rho and terminals come from ``template``."""
        T, r = self.sample_models(rng, 1)
        T, r = T[0], r[0]
        # renormalise against rounding so rows pass the 1e-9 check
        T = T / T.sum(axis=2, keepdims=True)
        S, A = self.num_states, self.num_actions
        sd = np.full((S, A), np.sqrt(self.reward_variance))
        if template is None:
            rho = np.full(S, 1.0 / S)
            return TabularMDP(T, r, sd, rho, 1)
        return TabularMDP(T, r, sd, template.initial_dist, template.horizon, template.terminal)


def observe_random_data(belief: BeliefState, mdp: TabularMDP, rng: np.random.Generator,
                        max_obs: int = 5) -> BeliefState:
    """Feed each (s, a) a random number (0..max_obs) of true-model samples."""
    for s in range(mdp.num_states):
        if mdp.terminal[s]:
            continue
        for a in range(mdp.num_actions):
            for _ in range(int(rng.integers(0, max_obs + 1))):
                s2 = int(rng.choice(mdp.num_states, p=mdp.transition[s, a]))
                r = mdp.reward_mean[s, a] + mdp.reward_std[s, a] * rng.standard_normal()
                belief.observe_tuple(s, a, r, s2)
    return belief
