"""Load-balancing objectives for MoE routing.

All variants share one form: N_E * sum_i f_i * P_i, where f_i is the fraction
of topK selections going to expert i (a hard count statistic, treated as a
constant) and P_i is the mean gate score on expert i (differentiable). They
differ only in the token set behind f:

* ``lbl``         — f and P from one batch,
* ``micro_lbl``   — per parallel group, then averaged (balance within groups),
* ``global_lbl``  — f synchronized across groups (f-bar), P per group; equal
                    to the LBL of the pooled batch,
* ``shuffle_lbl`` — f and P from a random micro-batch-sized token sample of
                    the pooled batch (ablation: pooled distribution, micro
                    token count),
* ``aux_free_update`` — no loss at all; a selection-only gate bias nudged
                    against the selection frequency once per optimizer step.

Gradients flow only through P — counts never carry gradient, matching the
factored per-group form where the synchronized f-bar multiplies each group's
differentiable P.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .moe import GatingBias, GatingDecision, expert_load


class EmptyBatchError(ValueError):
    """Raised when balance statistics are requested for zero tokens/groups."""


class SyncIntegrityError(ValueError):
    """Raised when synchronized counts do not match their claimed group sums."""


@dataclass
class BalanceStats:
    """Sufficient statistics for every LBL variant over some token set."""

    counts: np.ndarray      # (N_E,) int64 selection counts c_i
    prob_sums: np.ndarray   # (N_E,) float64 sums of gate scores per expert
    n_tokens: int

    @classmethod
    def from_decision(cls, decision: GatingDecision) -> "BalanceStats":
        return cls(counts=expert_load(decision),
                   prob_sums=decision.probs.data.sum(axis=0),
                   n_tokens=decision.n_tokens)

    @property
    def n_experts(self) -> int:
        return self.counts.shape[0]

    @property
    def f(self) -> np.ndarray:
        """Selection fractions f_i = c_i / (T*K); sums to 1 for any K."""
        total = self.counts.sum()
        if total == 0:
            raise EmptyBatchError("no selections recorded")
        return self.counts / total

    @property
    def p(self) -> np.ndarray:
        """Mean gate score per expert (value only, no gradient)."""
        if self.n_tokens == 0:
            raise EmptyBatchError("no tokens recorded")
        return self.prob_sums / self.n_tokens

    def merge(self, other: "BalanceStats") -> "BalanceStats":
        if other.n_experts != self.n_experts:
            raise SyncIntegrityError(
                f"expert count mismatch: {self.n_experts} vs {other.n_experts}")
        return BalanceStats(counts=self.counts + other.counts,
                            prob_sums=self.prob_sums + other.prob_sums,
                            n_tokens=self.n_tokens + other.n_tokens)


def merge_stats(stats: list[BalanceStats]) -> BalanceStats:
    """Elementwise sum in the given (fixed) order for bitwise determinism."""
    if not stats:
        raise EmptyBatchError("cannot merge an empty stats list")
    merged = replace(stats[0], counts=stats[0].counts.copy(),
                     prob_sums=stats[0].prob_sums.copy())
    for s in stats[1:]:
        merged = merged.merge(s)
    return merged


@dataclass(frozen=True)
class LossWeights:
    lbl_weight: float = 0.008
    zloss_weight: float = 0.001
    micro_mix_weight: float = 0.0

    def __post_init__(self):
        if min(self.lbl_weight, self.zloss_weight, self.micro_mix_weight) < 0:
            raise ValueError("loss weights must be non-negative")


def _weighted_mean_probs(f: np.ndarray, probs: Tensor, n_experts: int) -> Tensor:
    """N_E * sum_i f_i * mean_t probs[t, i], with gradient through probs only."""
    p = ad.tmean(probs, axis=0)
    return ad.tsum(ad.multiply(p, f * n_experts))


def lbl(stats: BalanceStats, probs: Tensor) -> Tensor:
    """Batch-level balance loss N_E * sum_i f_i * P_i; 1.0 at perfect balance."""
    if stats.n_tokens == 0 or probs.data.shape[0] == 0:
        raise EmptyBatchError("lbl over an empty batch")
    if probs.data.shape[0] != stats.n_tokens:
        raise ValueError(
            f"stats cover {stats.n_tokens} tokens but probs has {probs.data.shape[0]} rows")
    return _weighted_mean_probs(stats.f, probs, stats.n_experts)


def lbl_with_frequency(f: np.ndarray, per_group: list[tuple[BalanceStats, Tensor]]) -> Tensor:
    """Average over groups of N_E * sum_i f_i * P_i^j with a fixed frequency f.

    The shared core of the synchronized variants: f comes from a wider scope
    (synchronized batch or accumulation buffer) while P stays per group so
    each group's gradient is local.
    """
    if not per_group:
        raise EmptyBatchError("no parallel groups")
    n_experts = f.shape[0]
    terms = [_weighted_mean_probs(f, probs, n_experts) for _, probs in per_group]
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.multiply(total, 1.0 / len(terms))


def micro_lbl(per_group: list[tuple[BalanceStats, Tensor]]) -> Tensor:
    """Balance within each group: mean_j of the group-local LBL."""
    if not per_group:
        raise EmptyBatchError("no parallel groups")
    terms = [lbl(stats, probs) for stats, probs in per_group]
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.multiply(total, 1.0 / len(terms))


def global_lbl(synced: BalanceStats,
               per_group: list[tuple[BalanceStats, Tensor]]) -> Tensor:
    """Balance at the synchronized scope: f-bar across groups, local P per group.

    Algebraically equal to ``lbl`` on the pooled concatenation of the groups'
    tokens (for equal group sizes), while communicating only the N_E-vector
    of counts.
    """
    if not per_group:
        raise EmptyBatchError("no parallel groups")
    counts = sum(s.counts for s, _ in per_group)
    tokens = sum(s.n_tokens for s, _ in per_group)
    if not np.array_equal(counts, synced.counts) or tokens != synced.n_tokens:
        raise SyncIntegrityError(
            "synced stats do not equal the elementwise sum of group stats")
    return lbl_with_frequency(synced.f, per_group)


def shuffle_lbl(pooled_selection: np.ndarray, pooled_probs: Tensor,
                sample_size: int, rng: np.random.Generator) -> Tensor:
    """LBL over a without-replacement token sample of the pooled batch.

    Ablation objective: the sample matches the micro-batch in token count but
    the global batch in token distribution.
    """
    t = pooled_selection.shape[0]
    if sample_size == 0:
        raise EmptyBatchError("shuffle sample size must be positive")
    if sample_size > t:
        raise ValueError(f"sample size {sample_size} exceeds pooled tokens {t}")
    idx = rng.choice(t, size=sample_size, replace=False)
    counts = pooled_selection[idx].sum(axis=0).astype(np.int64)
    f = counts / counts.sum()
    sampled = ad.gather_rows(pooled_probs, idx)
    return _weighted_mean_probs(f, sampled, pooled_selection.shape[1])


def z_loss(router_logits: Tensor) -> Tensor:
    """Mean squared log-partition of the router logits (gate magnitude penalty)."""
    lse = ad.logsumexp(router_logits)
    return ad.tmean(ad.multiply(lse, lse))


def aux_free_update(bias: GatingBias, synced: BalanceStats,
                    step_size: float) -> GatingBias:
    """Nudge the selection bias against observed frequency: -step*sign(f - 1/N_E)."""
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    f = synced.f
    target = 1.0 / synced.n_experts
    return GatingBias(bias.bias - step_size * np.sign(f - target))


def aux_free_update_mean_sign(bias: GatingBias, group_stats: list[BalanceStats],
                              step_size: float) -> GatingBias:
    """Micro-scope aux-free update: average the per-group sign nudges.

    Replicas share one bias, so per-group frequencies are reduced to a mean
    sign update to keep the bias consistent across groups.
    """
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    if not group_stats:
        raise EmptyBatchError("no parallel groups")
    n_experts = group_stats[0].n_experts
    target = 1.0 / n_experts
    signs = np.mean([np.sign(s.f - target) for s in group_stats], axis=0)
    return GatingBias(bias.bias - step_size * signs)


def combined_loss(lm_loss: Tensor, weights: LossWeights,
                  primary: Tensor | None = None,
                  micro_mix: Tensor | None = None,
                  zloss: Tensor | None = None) -> Tensor:
    """Total objective: lm + lbl_w*primary + micro_mix_w*micro + z_w*zloss."""
    total = lm_loss
    if primary is not None and weights.lbl_weight > 0:
        total = ad.add(total, ad.multiply(primary, weights.lbl_weight))
    if micro_mix is not None and weights.micro_mix_weight > 0:
        total = ad.add(total, ad.multiply(micro_mix, weights.micro_mix_weight))
    if zloss is not None and weights.zloss_weight > 0:
        total = ad.add(total, ad.multiply(zloss, weights.zloss_weight))
    return total


# ---------------------------------------------------------------------------
# value-only evaluations (logging both LBL definitions regardless of mode)


def lbl_value(stats: BalanceStats) -> float:
    """N_E * sum f_i * P_i from statistics alone (no gradient)."""
    return float(stats.n_experts * np.dot(stats.f, stats.p))


def micro_lbl_value(group_stats: list[BalanceStats]) -> float:
    return float(np.mean([lbl_value(s) for s in group_stats]))


def global_lbl_value(group_stats: list[BalanceStats]) -> float:
    return lbl_value(merge_stats(group_stats))
