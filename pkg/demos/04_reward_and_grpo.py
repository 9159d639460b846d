"""
Rewards and group-relative policy optimisation on a bandit
==========================================================

A ranking completion earns up to 1 for reasoning length and up to 2 for
where it puts the target. Rewards are standardised within each group of
completions; a softmax policy over 20 arms (arm k = target at rank k+1)
is trained with the clipped surrogate and a KL pull towards its start.
"""

import numpy as np

from chainrec.metrics import plot_curve
from chainrec.reward import (GrpoConfig, group_advantages, score, toy_group, toy_grpo_train,
                             toy_surrogate_grad, grpo_surrogate, window_gap)

for steps, rank in [(2, 1), (4, 3), (6, 8), (0, 15)]:
    print(f"{steps} steps, target at {rank:2d}:", score(steps, rank).to_json())

rewards = [score(4, r).total for r in (1, 3, 11, 11)]
print("\ngroup rewards   ", rewards)
print("group advantages", np.round(group_advantages(rewards), 4).tolist())

# analytic gradient against central differences at one random point
rng = np.random.default_rng(0)
theta, old, ref = rng.normal(size=20), rng.normal(size=20), np.zeros(20)
actions, adv = rng.integers(0, 20, size=8), group_advantages(rng.normal(size=8))
cfg = GrpoConfig()
analytic = toy_surrogate_grad(theta, old, ref, actions, adv, cfg)
h, numeric = 1e-5, np.zeros(20)
for k in range(20):
    e = np.eye(20)[k] * h
    numeric[k] = (grpo_surrogate(toy_group(theta + e, old, ref, actions, adv), cfg)
                  - grpo_surrogate(toy_group(theta - e, old, ref, actions, adv), cfg)) / (2 * h)
print("\ngradient relative error:", np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))

runs = {
    "beta 0.04": toy_grpo_train(20, 500, GrpoConfig(), np.random.default_rng(0)),
    "beta 1000": toy_grpo_train(20, 500, GrpoConfig(beta=1e3), np.random.default_rng(0)),
}
for name, traj in runs.items():
    print(f"{name}: last-10% minus first-10% mean reward = {window_gap(traj):.3f}")

plot_curve(range(500), {k: [p.expected_reward for p in v] for k, v in runs.items()},
           "toy_grpo_demo.svg", ylabel="expected reward")
print("curve written to toy_grpo_demo.svg")
