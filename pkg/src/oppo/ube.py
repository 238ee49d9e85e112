"""Exact finite-horizon solvers for the mean and uncertainty Bellman equations.

Tables are indexed ``[h, s, a]`` for ``h = 0..H``; layer ``H`` is the zero
boundary. A transition into a terminal state contributes no continuation
value, so terminals behave as absorbing zero-reward states.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .belief import BeliefState
from .mdp import ROW_TOL, TabularMDP, enumerate_dag_layers


@dataclass(frozen=True, eq=False)
class UbeModel:
    """Posterior-mean model: T_tau, r_tau, nu_tau plus rho, H and terminals."""

    transition: np.ndarray
    reward: np.ndarray
    nu: np.ndarray
    initial_dist: np.ndarray
    horizon: int
    terminal: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.transition, dtype=float)
        if np.any(T < 0) or np.any(np.abs(T.sum(axis=-1) - 1.0) > ROW_TOL):
            raise ValueError("model transition rows must be probability vectors")
        if np.any(np.asarray(self.nu) < 0):
            raise ValueError("local uncertainty must be non-negative")

    @classmethod
    def from_belief(cls, belief: BeliefState, mdp: TabularMDP, nu_scale: float = 1.0) -> "UbeModel":
        r_mean, _ = belief.reward_posterior()
        return cls(belief.mean_transition(), r_mean, nu_scale * belief.nu(),
                   mdp.initial_dist, mdp.horizon, mdp.terminal)

    @classmethod
    def from_mdp(cls, mdp: TabularMDP, nu: np.ndarray | None = None) -> "UbeModel":
        nu = np.zeros_like(mdp.reward_mean) if nu is None else nu
        return cls(mdp.transition, mdp.reward_mean, nu, mdp.initial_dist, mdp.horizon, mdp.terminal)


@dataclass(frozen=True, eq=False)
class UbeSolution:
    q1: np.ndarray
    q2: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    eta1: float
    eta2: float
    eta_tilde: float
    beta: float = 0.0
    c: float = 0.0


@dataclass(frozen=True)
class CheckReport:
    """One verification outcome: statistic compared against a threshold."""

    name: str
    statistic: float
    threshold: float
    passed: bool
    details: dict = field(default_factory=dict, compare=False)

    def line(self) -> str:
        return (f"{self.name}\tstatistic={self.statistic:.6g}\tthreshold={self.threshold:.6g}\t"
                f"{'PASS' if self.passed else 'FAIL'}")


def evaluate_policy(T: np.ndarray, r: np.ndarray, policy: np.ndarray, horizon: int,
                    terminal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction for Q^{h,pi} with arbitrary leading batch dims.

    ``T`` is (..., S, A, S), ``r`` (..., S, A), ``policy`` (S, A). Returns
    ``q`` (..., H+1, S, A) and ``v`` (..., H+1, S).
    """
    batch = r.shape[:-2]
    S, A = r.shape[-2:]
    q = np.zeros(batch + (horizon + 1, S, A))
    v = np.zeros(batch + (horizon + 1, S))
    alive = 1.0 - np.asarray(terminal, dtype=float)
    for h in range(horizon - 1, -1, -1):
        cont = np.einsum("...sat,...t->...sa", T, v[..., h + 1, :] * alive)
        q[..., h, :, :] = r + cont
        v[..., h, :] = np.einsum("...sa,sa->...s", q[..., h, :, :], policy)
    return q, v


def _check_policy(policy: np.ndarray, shape: tuple) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != shape:
        raise ValueError(f"policy shape {policy.shape} does not match {shape}")
    if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > ROW_TOL):
        raise ValueError("policy rows must be probability vectors")
    return policy


def solve(model: UbeModel, policy: np.ndarray, beta: float = 0.0, c: float = 0.0) -> UbeSolution:
    """Solve the mean and uncertainty Bellman equations for ``policy``.

    The optimistic value uses the shifted root ``eta1 + 2 beta sqrt(eta2 + c)``.
    """
    policy = _check_policy(policy, model.reward.shape)
    q1, v1 = evaluate_policy(model.transition, model.reward, policy, model.horizon, model.terminal)
    q2, v2 = evaluate_policy(model.transition, model.nu, policy, model.horizon, model.terminal)
    a1 = q1 - v1[..., None]
    a2 = q2 - v2[..., None]
    rho0 = initial_occupancy(model)
    eta1 = float(rho0 @ v1[0])
    eta2 = float(rho0 @ v2[0])
    eta_tilde = eta1 + 2.0 * beta * np.sqrt(eta2 + c)
    return UbeSolution(q1, q2, v1, v2, a1, a2, eta1, eta2, float(eta_tilde), beta, c)


def initial_occupancy(model) -> np.ndarray:
    alive = 1.0 - np.asarray(model.terminal, dtype=float)
    return np.asarray(model.initial_dist) * alive


def occupancy(model, policy: np.ndarray) -> np.ndarray:
    """State occupancy rho_h^pi(s) for h = 0..H-1, excluding absorbed mass."""
    alive = 1.0 - np.asarray(model.terminal, dtype=float)
    rho = np.zeros((model.horizon, len(alive)))
    rho[0] = initial_occupancy(model)
    for h in range(model.horizon - 1):
        sa = rho[h][:, None] * policy
        rho[h + 1] = np.einsum("sa,sat->t", sa, model.transition) * alive
    return rho


def surrogate_L(solution: UbeSolution, occ: np.ndarray, new_policy: np.ndarray,
                beta: float, c: float) -> float:
    """Local approximation of the optimistic value around the solved policy."""
    eta2c = solution.eta2 + c
    if beta != 0 and eta2c <= 0:
        raise ValueError("eta2 + c must be positive when beta != 0")
    adv = solution.a1[:-1]
    if beta != 0:
        adv = adv + beta * solution.a2[:-1] / np.sqrt(eta2c)
    return float(solution.eta_tilde + np.einsum("hs,sa,hsa->", occ, new_policy, adv))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Monte-Carlo checks of the variance bound
# ---------------------------------------------------------------------------

def _bootstrap_var_se(x: np.ndarray, rng: np.random.Generator, n_boot: int) -> np.ndarray:
    """Bootstrap standard error of the sample variance along axis 0."""
    n = x.shape[0]
    acc = np.zeros(x.shape[1:])
    acc2 = np.zeros(x.shape[1:])
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=n)
        v = x[idx].var(axis=0, ddof=1)
        acc += v
        acc2 += v * v
    mean = acc / n_boot
    return np.sqrt(np.maximum(acc2 / n_boot - mean * mean, 0.0) * n_boot / (n_boot - 1))


def sample_q_hat(belief: BeliefState, mdp: TabularMDP, policy: np.ndarray, samples: int,
                 rng: np.random.Generator, chunk: int = 2000) -> np.ndarray:
    """Q-hat tables (samples, H+1, S, A) for posterior-sampled MDPs."""
    out = []
    left = samples
    while left > 0:
        k = min(chunk, left)
        T, r = belief.sample_models(rng, k)
        q, _ = evaluate_policy(T, r, policy, mdp.horizon, mdp.terminal)
        out.append(q)
        left -= k
    return np.concatenate(out, axis=0)


def verify_theorem1(belief: BeliefState, mdp: TabularMDP, policy: np.ndarray, samples: int,
                    rng: np.random.Generator, nu_scale: float = 1.0, n_boot: int = 100,
                    q_hat: np.ndarray | None = None) -> CheckReport:
    """Check var_tau Q-hat <= Q2 + 3 bootstrap SE at every reachable (h, s, a).

    ``nu_scale`` shrinks the local uncertainty for mutation testing.
    """
    if samples < 1000:
        raise ValueError("at least 1000 posterior samples are required")
    policy = _check_policy(policy, belief.dirichlet_alpha.shape[:2])
    sol = solve(UbeModel.from_belief(belief, mdp, nu_scale), policy)
    if q_hat is None:
        q_hat = sample_q_hat(belief, mdp, policy, samples, rng)
    H = mdp.horizon
    mask = reachable_mask(mdp)
    x = q_hat[:, :H]
    emp = x.var(axis=0, ddof=1)
    se = _bootstrap_var_se(x, rng, n_boot)
    excess = np.where(mask[:, :, None], emp - sol.q2[:H] - 3.0 * se, -np.inf)
    stat = float(excess.max())
    return CheckReport("theorem1", stat, 0.0, stat <= 0.0,
                       {"max_empirical_var": float(emp[mask].max()),
                        "argmax": tuple(int(i) for i in np.unravel_index(excess.argmax(), excess.shape)),
                        "cells": int(mask.sum() * emp.shape[-1])})


def reachable_mask(mdp: TabularMDP) -> np.ndarray:
    """(H, S) mask of non-terminal states reachable at each decision step."""
    layers = enumerate_dag_layers(mdp)
    mask = np.zeros((mdp.horizon, mdp.num_states), dtype=bool)
    for h in range(mdp.horizon):
        idx = [s for s in layers[h] if not mdp.terminal[s]]
        mask[h, idx] = True
    return mask


def verify_corollary1(belief: BeliefState, mdp: TabularMDP, policy: np.ndarray, samples: int,
                      rng: np.random.Generator, nu_scale: float = 1.0, n_boot: int = 200,
                      q_hat: np.ndarray | None = None) -> CheckReport:
    """Check var_tau eta-hat <= eta2 + 3 SE, plus the Jensen intermediate step."""
    if samples < 1000:
        raise ValueError("at least 1000 posterior samples are required")
    policy = _check_policy(policy, belief.dirichlet_alpha.shape[:2])
    model = UbeModel.from_belief(belief, mdp, nu_scale)
    sol = solve(model, policy)
    if q_hat is None:
        q_hat = sample_q_hat(belief, mdp, policy, samples, rng)
    w = initial_occupancy(model)[:, None] * policy
    eta_hat = np.einsum("nsa,sa->n", q_hat[:, 0], w)
    var_eta = float(eta_hat.var(ddof=1))
    se = float(_bootstrap_var_se(eta_hat[:, None], rng, n_boot)[0])
    jensen_rhs = float(np.sum(w * q_hat[:, 0].var(axis=0, ddof=1)))
    stat = var_eta - sol.eta2 - 3.0 * se
    return CheckReport("corollary1", stat, 0.0, stat <= 0.0,
                       {"var_eta_hat": var_eta, "eta2": sol.eta2, "se": se,
                        "jensen_rhs": jensen_rhs, "jensen_ok": var_eta <= jensen_rhs + 1e-12})


# ---------------------------------------------------------------------------
# first-order agreement of the surrogate
# ---------------------------------------------------------------------------

def optimistic_value(model: UbeModel, logits: np.ndarray, beta: float, c: float) -> float:
    return solve(model, softmax(logits), beta, c).eta_tilde


def verify_theorem2(model: UbeModel, logits: np.ndarray, beta: float, c: float,
                    fd_step: float = 1e-4, tol: float = 1e-6) -> CheckReport:
    """Compare central-difference gradients of L(pi_phi, pi_theta) and eta_tilde(pi_theta)."""
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    logits = np.asarray(logits, dtype=float)
    pi = softmax(logits)
    sol = solve(model, pi, beta, c)
    if sol.eta2 + c <= 0:
        raise ValueError("eta2 + c must be positive")
    occ = occupancy(model, pi)
    value_gap = abs(surrogate_L(sol, occ, pi, beta, c) - sol.eta_tilde)

    g_L = np.zeros_like(logits)
    g_eta = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[idx] += fd_step
        minus[idx] -= fd_step
        g_L[idx] = (surrogate_L(sol, occ, softmax(plus), beta, c)
                    - surrogate_L(sol, occ, softmax(minus), beta, c)) / (2 * fd_step)
        g_eta[idx] = (optimistic_value(model, plus, beta, c)
                      - optimistic_value(model, minus, beta, c)) / (2 * fd_step)
    gap = float(np.max(np.abs(g_L - g_eta)))
    ok = gap <= tol and value_gap <= 1e-10
    return CheckReport("theorem2", gap, tol, ok,
                       {"value_gap": value_gap, "grad_L": g_L, "grad_eta_tilde": g_eta})


def policy_difference_identity_check(model: UbeModel, policy: np.ndarray, new_policy: np.ndarray,
                                     tol: float = 1e-9) -> CheckReport:
    """eta_i(pi') - eta_i(pi) against the pi'-occupancy-weighted pi-advantages, i = 1, 2."""
    sol = solve(model, policy)
    sol_new = solve(model, new_policy)
    occ_new = occupancy(model, new_policy)
    gaps = []
    terms = {}
    for i, (adv, lhs) in enumerate(((sol.a1, sol_new.eta1 - sol.eta1),
                                    (sol.a2, sol_new.eta2 - sol.eta2)), start=1):
        rhs = float(np.einsum("hs,sa,hsa->", occ_new, new_policy, adv[:-1]))
        terms[f"eta{i}"] = (lhs, rhs)
        gaps.append(abs(lhs - rhs))
    gap = max(gaps)
    return CheckReport("policy_difference", gap, tol, gap <= tol, terms)
