"""Consolidated verification suites over random instances."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..agent import TrajectoryBatch, gae_two_head, policy_objective, softmax
from ..belief import BeliefState, observe_random_data
from ..mdp import random_layered_mdp
from ..nn import FeedForwardNet, one_hot
from ..ube import (
    CheckReport,
    UbeModel,
    policy_difference_identity_check,
    sample_q_hat,
    verify_corollary1,
    verify_theorem1,
    verify_theorem2,
)

SUITES = ("theorem1", "corollary1", "theorem2", "policy_difference", "gae_oracle", "gradient_check")


@dataclass
class VerifyConfig:
    suites: tuple = SUITES
    samples: int = 10_000
    bound_instances: int = 50      # theorem1 / corollary1
    small_instances: int = 20      # theorem2 / policy_difference
    gae_batches: int = 100
    gradient_seeds: int = 10
    seed: int = 0
    nu_scale: float = 1.0

    def __post_init__(self):
        self.suites = tuple(self.suites)
        if not self.suites:
            raise ValueError("empty suite selection")
        unknown = [s for s in self.suites if s not in SUITES]
        if unknown:
            raise ValueError(f"unknown suite(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")


@dataclass
class VerifyReport:
    reports: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def lines(self) -> list[str]:
        out = [r.line() for r in self.reports]
        out.append(f"overall\t{'PASS' if self.passed else 'FAIL'}")
        return out


def _aggregate(name: str, reports: list[CheckReport], threshold: float) -> CheckReport:
    stats = np.array([r.statistic for r in reports])
    fails = int(sum(not r.passed for r in reports))
    return CheckReport(name, float(stats.max()), threshold, fails == 0,
                       {"instances": len(reports), "failures": fails, "per_instance": reports})


def bound_instances(cfg: VerifyConfig):
    """Random layered MDPs with posteriors and policies, shared by the bound suites."""
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.bound_instances):
        mdp = random_layered_mdp(rng)
        belief = observe_random_data(BeliefState.from_mdp(mdp), mdp, rng)
        policy = softmax(rng.normal(size=(mdp.num_states, mdp.num_actions)))
        yield mdp, belief, policy, rng


def run_bound_suites(cfg: VerifyConfig) -> list[CheckReport]:
    want1 = "theorem1" in cfg.suites
    want2 = "corollary1" in cfg.suites
    if not (want1 or want2):
        return []
    t1, c1 = [], []
    for mdp, belief, policy, rng in bound_instances(cfg):
        q_hat = sample_q_hat(belief, mdp, policy, cfg.samples, rng)
        if want1:
            t1.append(verify_theorem1(belief, mdp, policy, cfg.samples, rng, cfg.nu_scale, q_hat=q_hat))
        if want2:
            c1.append(verify_corollary1(belief, mdp, policy, cfg.samples, rng, cfg.nu_scale, q_hat=q_hat))
    out = []
    if want1:
        out.append(_aggregate("theorem1", t1, 0.0))
    if want2:
        out.append(_aggregate("corollary1", c1, 0.0))
    return out


def small_models(cfg: VerifyConfig, offset: int):
    rng = np.random.default_rng([cfg.seed, offset])
    for _ in range(cfg.small_instances):
        mdp = random_layered_mdp(rng, max_states=5, max_actions=3, max_horizon=4)
        belief = observe_random_data(BeliefState.from_mdp(mdp), mdp, rng)
        yield UbeModel.from_belief(belief, mdp, cfg.nu_scale), rng


def run_theorem2(cfg: VerifyConfig) -> CheckReport:
    reps = []
    for model, rng in small_models(cfg, 1):
        S, A = model.reward.shape
        reps.append(verify_theorem2(model, rng.normal(size=(S, A)), beta=float(rng.uniform(0.1, 2.0)),
                                    c=float(rng.uniform(0.01, 1.0))))
    return _aggregate("theorem2", reps, 1e-6)


def run_policy_difference(cfg: VerifyConfig) -> CheckReport:
    reps = []
    for model, rng in small_models(cfg, 2):
        S, A = model.reward.shape
        reps.append(policy_difference_identity_check(model, softmax(rng.normal(size=(S, A))),
                                                     softmax(rng.normal(size=(S, A)))))
    return _aggregate("policy_difference", reps, 1e-9)


def random_episodic_batch(rng: np.random.Generator, N: int = 4, T: int = 16, S: int = 6,
                          p_done: float = 0.15) -> TrajectoryBatch:
    """Consistent random batch whose every stream ends in a done flag."""
    dones = rng.random((N, T)) < p_done
    dones[:, -1] = True
    start = np.zeros((N, T), dtype=bool)
    start[:, 0] = True
    start[:, 1:] = dones[:, :-1]
    states = rng.integers(S, size=(N, T))
    nxt = rng.integers(S, size=(N, T))
    cont = ~dones[:, :-1]
    nxt[:, :-1][cont] = states[:, 1:][cont]
    return TrajectoryBatch(states, rng.integers(3, size=(N, T)), rng.normal(size=(N, T)), rng.random((N, T)),
                           nxt, dones, np.zeros((N, T)), start, np.ones((N, T)))


def monte_carlo_return_to_go(rewards: np.ndarray, dones: np.ndarray) -> np.ndarray:
    N, T = rewards.shape
    out = np.zeros((N, T))
    for n in range(N):
        total = 0.0
        for h in range(T - 1, -1, -1):
            if dones[n, h]:
                total = 0.0
            total += rewards[n, h]
            out[n, h] = total
    return out


def run_gae_oracle(cfg: VerifyConfig) -> CheckReport:
    rng = np.random.default_rng([cfg.seed, 3])
    worst = 0.0
    for _ in range(cfg.gae_batches):
        b = random_episodic_batch(rng)
        v1, v2 = rng.normal(size=6), rng.random(6)
        a1, a2, _, _ = gae_two_head(b, v1, v2, 1.0, 1.0)
        worst = max(worst,
                    float(np.abs(a1 - (monte_carlo_return_to_go(b.rewards, b.dones) - v1[b.states])).max()),
                    float(np.abs(a2 - (monte_carlo_return_to_go(b.bonus, b.dones) - v2[b.states])).max()))
    return CheckReport("gae_oracle", worst, 1e-9, worst <= 1e-9, {"batches": cfg.gae_batches})


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative discrepancy of two gradient arrays."""
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


def network_gradient_error(sizes, rng: np.random.Generator, h: float = 1e-6) -> float:
    net = FeedForwardNet(sizes, rng)
    net.biases = [rng.normal(scale=0.1, size=b.shape) for b in net.biases]
    x = one_hot(rng.integers(sizes[0], size=3), sizes[0])
    g = rng.normal(size=(3, sizes[-1]))
    analytic = net.backward(x, g)
    worst = 0.0
    for p, ga in zip(net.params, analytic):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = float(np.sum(net(x) * g))
            p[idx] = old - h
            down = float(np.sum(net(x) * g))
            p[idx] = old
            fd[idx] = (up - down) / (2 * h)
        worst = max(worst, _rel_err(ga, fd))
    return worst


def policy_gradient_error(rng: np.random.Generator, h: float = 1e-6) -> float:
    S, A, B, eps, ent_c = 4, 3, 32, 0.2, 0.01
    old = rng.normal(size=(S, A))
    logits = old + rng.normal(scale=0.1, size=(S, A))
    st, ac = rng.integers(S, size=B), rng.integers(A, size=B)
    lp_old = np.log(softmax(old))[st, ac]
    adv = rng.normal(size=B)

    def obj(lg):
        surr, ent, _, _ = policy_objective(lg, st, ac, lp_old, adv, eps, ent_c)
        return surr + ent_c * ent

    grad = policy_objective(logits, st, ac, lp_old, adv, eps, ent_c)[3]
    fd = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (obj(up) - obj(down)) / (2 * h)
    return _rel_err(grad, fd)


def run_gradient_check(cfg: VerifyConfig) -> CheckReport:
    worst = 0.0
    for k in range(cfg.gradient_seeds):
        rng = np.random.default_rng([cfg.seed, 4, k])
        for sizes in ((8, 64, 32), (8, 64, 64, 32)):
            worst = max(worst, network_gradient_error(sizes, rng))
        worst = max(worst, policy_gradient_error(rng))
    return CheckReport("gradient_check", worst, 1e-5, worst <= 1e-5, {"seeds": cfg.gradient_seeds})


def verify_all(cfg: VerifyConfig | None = None) -> VerifyReport:
    cfg = cfg or VerifyConfig()
    report = VerifyReport()
    report.reports.extend(run_bound_suites(cfg))
    single = {"theorem2": run_theorem2, "policy_difference": run_policy_difference,
              "gae_oracle": run_gae_oracle, "gradient_check": run_gradient_check}
    for name in SUITES:
        if name in single and name in cfg.suites:
            report.reports.append(single[name](cfg))
    return report
