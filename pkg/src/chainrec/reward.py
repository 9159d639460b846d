"""Rollout rewards and the numerical core of group-relative policy optimisation.

Reward of a ranking response = step reward (reasoning length, saturating at
four statements) + 2 * correctness reward (piecewise in the rank of the
ground-truth item). Advantages are rewards standardised within the group of
completions sampled for one prompt; the objective is the PPO-style clipped
surrogate with a k3 KL penalty towards a reference policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

STEP_SATURATION = 4
STEP_WEIGHT = 1.0
CORRECTNESS_WEIGHT = 2.0

# (last rank of the band, reward)
CORRECTNESS_BANDS = ((1, 1.0), (3, 0.7), (5, 0.5), (10, 0.2), (20, 0.0))
MAX_RANK = 20


def step_reward(num_steps: int) -> float:
    if num_steps < 0:
        raise ValueError("num_steps must be non-negative")
    return min(1.0, num_steps / STEP_SATURATION)


def correctness_reward(gt_rank: int) -> float:
    if not 1 <= gt_rank <= MAX_RANK:
        raise ValueError(f"gt_rank must lie in [1, {MAX_RANK}], got {gt_rank}")
    for last, value in CORRECTNESS_BANDS:
        if gt_rank <= last:
            return value
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class RewardBreakdown:
    step_reward: float
    correctness_reward: float
    total: float

    def to_json(self) -> dict:
        return {"step": self.step_reward, "correctness": self.correctness_reward, "total": self.total}


def total_reward(step: float, correctness: float) -> RewardBreakdown:
    return RewardBreakdown(step, correctness, STEP_WEIGHT * step + CORRECTNESS_WEIGHT * correctness)


def score(num_steps: int, gt_rank: int) -> RewardBreakdown:
    return total_reward(step_reward(num_steps), correctness_reward(gt_rank))


# --- group statistics ------------------------------------------------------


@dataclass(frozen=True)
class GrpoConfig:
    eps_clip: float = 0.2
    beta: float = 0.04
    std_floor: float = 1e-8

    def __post_init__(self):
        if self.eps_clip <= 0:
            raise ValueError("eps_clip must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def group_advantages(rewards: Sequence[float], std_floor: float = 1e-8) -> list[float]:
    """``(r - mean) / max(population std, std_floor)``; constant groups give zeros."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("empty reward group")
    centred = r - r.mean()
    std = r.std()
    if std <= std_floor:
        return [0.0] * r.size
    return list(centred / std)


def kl_estimate(logp_policy: Sequence[float], logp_ref: Sequence[float]) -> float:
    """Token-averaged k3 estimator ``exp(d) - d - 1`` with ``d = logp_ref - logp_policy``."""
    lp = np.asarray(logp_policy, dtype=float)
    lr = np.asarray(logp_ref, dtype=float)
    if lp.shape != lr.shape:
        raise ValueError(f"length mismatch: {lp.shape} vs {lr.shape}")
    if lp.size == 0:
        return 0.0
    d = lr - lp
    # expm1(d) - d keeps precision for small d and is >= 0 for all d
    return float(np.mean(np.maximum(np.expm1(d) - d, 0.0)))


@dataclass
class RolloutGroup:
    rewards: list[float]
    advantages: list[float]
    logp_policy: list[Sequence[float]] | None = None
    logp_old: list[Sequence[float]] | None = None
    logp_ref: list[Sequence[float]] | None = None
    breakdowns: list[RewardBreakdown] = field(default_factory=list)

    def __post_init__(self):
        if len(self.rewards) != len(self.advantages):
            raise ValueError("rewards and advantages differ in length")

    @property
    def group_size(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_rewards(cls, rewards: Sequence[float], std_floor: float = 1e-8, **kwargs) -> "RolloutGroup":
        return cls(list(map(float, rewards)), group_advantages(rewards, std_floor), **kwargs)


def clipped_term(ratio: float, advantage: float, eps: float) -> float:
    return min(ratio * advantage, float(np.clip(ratio, 1 - eps, 1 + eps)) * advantage)


def clipped_term_grad_ratio(ratio: float, advantage: float, eps: float) -> float:
    """d/d(ratio) of ``clipped_term``: zero whenever the clipped branch is the minimum."""
    clipped = float(np.clip(ratio, 1 - eps, 1 + eps))
    if ratio * advantage <= clipped * advantage:
        return advantage
    return 0.0


def grpo_surrogate(group: RolloutGroup, cfg: GrpoConfig) -> float:
    """Mean clipped surrogate over the group minus ``beta`` times the mean KL.

    Ratios are at sequence level: ``exp(sum logp_policy - sum logp_old)``.
    The KL term is skipped when the group carries no reference log-probs.
    """
    if group.logp_policy is None or group.logp_old is None:
        raise ValueError("group lacks policy/old log-probabilities")
    G = group.group_size
    if len(group.logp_policy) != G or len(group.logp_old) != G:
        raise ValueError("log-prob sequences do not match group size")
    total = 0.0
    for j in range(G):
        ratio = float(np.exp(np.sum(group.logp_policy[j]) - np.sum(group.logp_old[j])))
        total += clipped_term(ratio, group.advantages[j], cfg.eps_clip)
    objective = total / G
    if group.logp_ref is not None and cfg.beta:
        kl = np.mean([kl_estimate(p, r) for p, r in zip(group.logp_policy, group.logp_ref)])
        objective -= cfg.beta * float(kl)
    return objective


# --- toy categorical policy ------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def toy_group(logits: np.ndarray, old_logits: np.ndarray, ref_logits: np.ndarray | None,
              actions: Sequence[int], advantages: Sequence[float]) -> RolloutGroup:
    """One-token rollouts of a categorical policy packed as a RolloutGroup."""
    lp, lo = log_softmax(logits), log_softmax(old_logits)
    lr = log_softmax(ref_logits) if ref_logits is not None else None
    return RolloutGroup(
        rewards=[0.0] * len(actions),
        advantages=list(advantages),
        logp_policy=[[lp[a]] for a in actions],
        logp_old=[[lo[a]] for a in actions],
        logp_ref=[[lr[a]] for a in actions] if lr is not None else None,
    )


def toy_surrogate_grad(logits: np.ndarray, old_logits: np.ndarray, ref_logits: np.ndarray | None,
                       actions: Sequence[int], advantages: Sequence[float],
                       cfg: GrpoConfig) -> np.ndarray:
    """Analytic gradient of ``grpo_surrogate(toy_group(...))`` with respect to ``logits``."""
    lp, lo = log_softmax(logits), log_softmax(old_logits)
    probs = np.exp(lp)
    G = len(actions)
    grad = np.zeros_like(logits, dtype=float)
    for a, adv in zip(actions, advantages):
        dlogp = -probs.copy()
        dlogp[a] += 1.0
        ratio = float(np.exp(lp[a] - lo[a]))
        grad += clipped_term_grad_ratio(ratio, adv, cfg.eps_clip) * ratio * dlogp / G
        if ref_logits is not None and cfg.beta:
            d = log_softmax(ref_logits)[a] - lp[a]
            # d/dθ [exp(d) - d - 1] = (exp(d) - 1) * (-dlogp)
            grad -= cfg.beta * (-np.expm1(d)) * dlogp / G
    return grad


def toy_reward(arm: int, n_steps: int = STEP_SATURATION) -> float:
    """Bandit payoff: arm ``k`` (0-based) stands for a ranking that puts the
    ground truth at rank ``k + 1``; every arm is credited ``n_steps`` reasoning
    statements."""
    return score(n_steps, arm + 1).total


@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    mean_reward: float
    expected_reward: float


def toy_grpo_train(policy_dim: int = 20, steps: int = 500, cfg: GrpoConfig | None = None,
                   rng: np.random.Generator | None = None, group_size: int = 8,
                   learning_rate: float = 0.1, inner_epochs: int = 2, max_grad_norm: float = 1.0,
                   init_logits: np.ndarray | None = None,
                   ref_logits: np.ndarray | None = None) -> list[TrajectoryPoint]:
    """Train a softmax policy over ``policy_dim`` arms with GRPO updates.

    Each step samples a group from the current (old) policy, standardises the
    rewards and takes ``inner_epochs`` clipped-gradient ascent steps on the
    surrogate. The reference policy defaults to the initial one. Returns the
    sampled group mean and the exact expected reward per step.
    """
    if policy_dim <= 0 or steps <= 0 or group_size <= 0:
        raise ValueError("policy_dim, steps and group_size must be positive")
    if policy_dim > MAX_RANK:
        raise ValueError(f"at most {MAX_RANK} arms")
    cfg = cfg or GrpoConfig()
    rng = rng if rng is not None else np.random.default_rng()
    theta = np.zeros(policy_dim) if init_logits is None else np.array(init_logits, dtype=float)
    ref = theta.copy() if ref_logits is None else np.asarray(ref_logits, dtype=float)
    payoff = np.array([toy_reward(a) for a in range(policy_dim)])

    trajectory = []
    for step in range(steps):
        old = theta.copy()
        probs = np.exp(log_softmax(old))
        actions = rng.choice(policy_dim, size=group_size, p=probs)
        rewards = payoff[actions]
        adv = group_advantages(rewards, cfg.std_floor)
        for _ in range(inner_epochs):
            grad = toy_surrogate_grad(theta, old, ref, actions, adv, cfg)
            norm = float(np.linalg.norm(grad))
            if max_grad_norm and norm > max_grad_norm:
                grad *= max_grad_norm / norm
            theta = theta + learning_rate * grad
        trajectory.append(TrajectoryPoint(step, float(rewards.mean()), float(probs @ payoff)))
    return trajectory


def window_gap(trajectory: Sequence[TrajectoryPoint], frac: float = 0.1,
               attr: str = "mean_reward") -> float:
    """Mean of the last ``frac`` of the run minus the mean of the first ``frac``."""
    n = max(1, int(round(len(trajectory) * frac)))
    values = np.array([getattr(p, attr) for p in trajectory])
    return float(values[-n:].mean() - values[:n].mean())
