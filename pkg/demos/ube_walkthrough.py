"""Walk through the exact uncertainty Bellman machinery on one small random MDP.

Run with ``python demos/ube_walkthrough.py``. Takes a few seconds.
"""
import numpy as np

from oppo.agent import softmax
from oppo.belief import BeliefState, observe_random_data
from oppo.mdp import random_layered_mdp
from oppo.ube import UbeModel, sample_q_hat, solve, verify_theorem1

rng = np.random.default_rng(7)
mdp = random_layered_mdp(rng)
print(f"random layered MDP: {mdp.num_states} states, {mdp.num_actions} actions, horizon {mdp.horizon}")

# A posterior built from a handful of random observations.
belief = observe_random_data(BeliefState.from_mdp(mdp), mdp, rng)
policy = softmax(rng.normal(size=(mdp.num_states, mdp.num_actions)))

model = UbeModel.from_belief(belief, mdp)
sol = solve(model, policy, beta=1.0, c=0.1)
print(f"expected return {sol.eta1:.4f}, uncertainty {sol.eta2:.4f}, optimistic value {sol.eta_tilde:.4f}")

# The uncertainty table upper-bounds the posterior variance of Q at every cell.
q_hat = sample_q_hat(belief, mdp, policy, 4000, rng)
emp = q_hat[:, 0].var(axis=0, ddof=1)
print("step-0 posterior variance of Q vs uncertainty table:")
for s in range(mdp.num_states):
    if mdp.terminal[s]:
        continue
    row = "  ".join(f"{e:.3f}<={u:.3f}" for e, u in zip(emp[s], sol.q2[0, s]))
    print(f"  state {s}: {row}")

report = verify_theorem1(belief, mdp, policy, 4000, rng, q_hat=q_hat)
print(report.line())

# Shrinking the local uncertainty tenfold breaks the bound.
weak = verify_theorem1(belief, mdp, policy, 4000, rng, nu_scale=0.1, q_hat=q_hat)
print("with local uncertainty / 10:", weak.line())
