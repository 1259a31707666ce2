"""Verifiable rewards and the group-relative clipped policy objective.

Rewards are binary and checkable from the raw output text alone: the
modality-preference & structure reward fires iff the trace parses and names
the right evidence modality, and the accuracy reward fires iff the answer
segment matches the ground truth after normalization. Stage 1 trains on
the structure reward alone; stage 2 on the weighted sum (accuracy weight
1.0, structure weight 0.2). Advantages are normalized within a rollout
group using the population variance, and the objective is the clipped
surrogate minus a KL penalty against the reference policy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .normalize import answers_match
from .tag_grammar import PemLabel, parse_trace


@dataclass(frozen=True)
class RewardConfig:
    """Stage-2 reward weights."""

    lambda_acc: float = 1.0
    lambda_mps: float = 0.2

    def __post_init__(self) -> None:
        if self.lambda_acc < 0 or self.lambda_mps < 0:
            raise ValueError("reward weights must be nonnegative")


@dataclass(frozen=True)
class GrpoConfig:
    clip_alpha: float = 0.2
    kl_beta: float = 0.01
    eps_stab: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_alpha < 1.0:
            raise ValueError("clip_alpha must lie in (0, 1)")
        if self.kl_beta < 0.0:
            raise ValueError("kl_beta must be nonnegative")
        if self.eps_stab <= 0.0:
            raise ValueError("eps_stab must be positive")


@dataclass(frozen=True)
class RolloutGroup:
    """G sampled responses for one question, with sequence-level log-probs."""

    rewards: tuple[float, ...]
    logp_new: tuple[float, ...]
    logp_old: tuple[float, ...]
    logp_ref: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        object.__setattr__(self, "logp_new", tuple(float(x) for x in self.logp_new))
        object.__setattr__(self, "logp_old", tuple(float(x) for x in self.logp_old))
        object.__setattr__(self, "logp_ref", tuple(float(x) for x in self.logp_ref))
        g = len(self.rewards)
        if g < 2:
            raise ValueError("a rollout group needs G >= 2 responses")
        for name in ("logp_new", "logp_old", "logp_ref"):
            if len(getattr(self, name)) != g:
                raise ValueError(f"{name} length differs from rewards length")

    @property
    def size(self) -> int:
        return len(self.rewards)


def reward_mps(output_text: str, gold_pem: PemLabel) -> int:
    """1 iff the trace is structurally valid and its PEM matches gold."""
    trace, _ = parse_trace(output_text)
    if trace is None:
        return 0
    return 1 if trace.pem == gold_pem else 0


def reward_acc(output_text: str, ground_truth: str) -> int:
    """1 iff the answer segment equals the ground truth after normalization."""
    trace, _ = parse_trace(output_text)
    if trace is None:
        return 0
    return 1 if answers_match(trace.answer_text, ground_truth) else 0


def reward_stage1(output_text: str, gold_pem: PemLabel) -> int:
    """Stage 1 optimizes the modality preference & structure reward alone."""
    return reward_mps(output_text, gold_pem)


def reward_stage2(
    output_text: str,
    gold_pem: PemLabel,
    ground_truth: str,
    cfg: RewardConfig = RewardConfig(),
) -> float:
    return (cfg.lambda_acc * reward_acc(output_text, ground_truth)
            + cfg.lambda_mps * reward_mps(output_text, gold_pem))


def group_advantages(rewards: Sequence[float], eps_stab: float) -> list[float]:
    """Center rewards and scale by sqrt(population variance + eps_stab).

    ``eps_stab`` may be zero (useful for exact-algebra checks); a group with
    zero variance then yields all-zero advantages rather than 0/0.
    """
    if len(rewards) < 2:
        raise ValueError("need at least 2 rewards")
    if eps_stab < 0:
        raise ValueError("eps_stab must be nonnegative")
    r = np.asarray(rewards, dtype=float)
    if (r == r[0]).all():
        return [0.0] * len(rewards)  # zero numerator exactly, no rounding residue
    centered = r - r.mean()
    denom = math.sqrt(float(np.mean(centered ** 2)) + eps_stab)
    if denom == 0.0:
        return [0.0] * len(rewards)
    return (centered / denom).tolist()


def kl_estimate(logp_new: Sequence[float], logp_ref: Sequence[float]) -> float:
    """Nonnegative per-sample KL estimator: mean of exp(d) - d - 1 with
    d = logp_ref - logp_new. Zero iff the log-probs agree elementwise."""
    new = np.asarray(logp_new, dtype=float)
    ref = np.asarray(logp_ref, dtype=float)
    if new.shape != ref.shape:
        raise ValueError("logp_new and logp_ref must have equal lengths")
    if not (np.isfinite(new).all() and np.isfinite(ref).all()):
        raise ValueError("log-probabilities must be finite")
    delta = ref - new
    return float(np.mean(np.exp(delta) - delta - 1.0))


@dataclass(frozen=True)
class GrpoResult:
    objective: float
    advantages: tuple[float, ...]
    ratios: tuple[float, ...]
    surrogate_terms: tuple[float, ...]
    kl: float


def grpo_objective(group: RolloutGroup, cfg: GrpoConfig) -> GrpoResult:
    """Clipped group-relative surrogate minus the KL penalty.

    objective = mean_i min(rho_i A_i, clip(rho_i, 1-alpha, 1+alpha) A_i)
                - kl_beta * KL(new || ref)
    with rho_i = exp(logp_new_i - logp_old_i).
    """
    advantages = np.asarray(group_advantages(group.rewards, cfg.eps_stab))
    ratios = np.exp(np.asarray(group.logp_new) - np.asarray(group.logp_old))
    if not np.isfinite(ratios).all():
        raise ValueError("non-finite importance ratios")
    clipped = np.clip(ratios, 1.0 - cfg.clip_alpha, 1.0 + cfg.clip_alpha)
    terms = np.minimum(ratios * advantages, clipped * advantages)
    kl = kl_estimate(group.logp_new, group.logp_ref)
    objective = float(terms.mean() - cfg.kl_beta * kl)
    return GrpoResult(
        objective=objective,
        advantages=tuple(advantages.tolist()),
        ratios=tuple(ratios.tolist()),
        surrogate_terms=tuple(terms.tolist()),
        kl=kl,
    )


def grpo_gradient_logp_new(group: RolloutGroup, cfg: GrpoConfig) -> np.ndarray:
    """Analytic gradient of the objective w.r.t. each logp_new entry.

    Advantages depend only on rewards, so the surrogate contributes
    A_i * rho_i / G on the unclipped branch and 0 where the clip binds; the
    KL estimator contributes -beta * (1 - exp(logp_ref - logp_new)) / G.
    """
    g = group.size
    advantages = np.asarray(group_advantages(group.rewards, cfg.eps_stab))
    new = np.asarray(group.logp_new)
    ratios = np.exp(new - np.asarray(group.logp_old))
    clipped = np.clip(ratios, 1.0 - cfg.clip_alpha, 1.0 + cfg.clip_alpha)
    unclipped_term = ratios * advantages
    clipped_term = clipped * advantages
    surrogate_grad = np.where(
        unclipped_term <= clipped_term, advantages * ratios, 0.0)
    delta = np.asarray(group.logp_ref) - new
    kl_grad = 1.0 - np.exp(delta)
    return (surrogate_grad - cfg.kl_beta * kl_grad) / g


def read_rollout_groups(path: str | Path) -> list[tuple[str, RolloutGroup]]:
    """JSONL rollout records: {group_id, rewards[], logp_new[], logp_old[], logp_ref[]}."""
    groups = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                group = RolloutGroup(
                    rewards=obj["rewards"],
                    logp_new=obj["logp_new"],
                    logp_old=obj["logp_old"],
                    logp_ref=obj["logp_ref"],
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
            groups.append((str(obj.get("group_id", lineno)), group))
    return groups
