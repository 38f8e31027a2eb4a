"""Simulated data parallelism: groups, sync scopes, the count buffer, and
communication accounting.

Groups are in-process replicas sharing one parameter set (data parallelism
keeps replicas bit-identical, so sharing storage is the zero-divergence
case). A step stacks every group's micro-batch into one forward pass; the
per-group routing decisions, gate probabilities, and balance statistics are
exact row slices of the pooled pass, and the pooled mean loss has the same
gradient as averaging per-group gradients. All cross-group reductions run
in fixed group order, so results do not depend on scheduling.

The all-gather transmits only the per-expert count vector; ``CommLog``
records its bytes so the freq-vector strategy can be compared against
shipping the full token-expert matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .balance import BalanceStats, SyncIntegrityError, merge_stats
from .model import ForwardResult, MoELanguageModel
from .moe import ConfigError, GatingBias, GatingDecision

FLOAT_BYTES = 8


@dataclass(frozen=True)
class SyncScope:
    """Which groups pool their counts: none, subgroups of a size, or all."""

    kind: str            # "none" | "subgroup" | "global"
    size: int | None = None

    @classmethod
    def parse(cls, text: str) -> "SyncScope":
        text = text.strip()
        if text == "none":
            return cls("none")
        if text == "global":
            return cls("global")
        if text.startswith("subgroup:"):
            return cls("subgroup", int(text.split(":", 1)[1]))
        raise ConfigError(f"sync_scope must be none, global, or subgroup:<n>, got {text!r}")

    def __str__(self) -> str:
        return f"subgroup:{self.size}" if self.kind == "subgroup" else self.kind

    def width(self, n_groups: int) -> int:
        if self.kind == "none":
            return 1
        if self.kind == "global":
            return n_groups
        return self.size

    def cells(self, n_groups: int) -> list[list[int]]:
        w = self.width(n_groups)
        return [list(range(a, a + w)) for a in range(0, n_groups, w)]


@dataclass(frozen=True)
class ParallelPlan:
    n_groups: int
    micro_batch_size: int     # sequences per group per GA step
    ga_steps: int
    sync_scope: SyncScope
    use_buffer: bool = False

    def __post_init__(self):
        if self.n_groups < 1 or self.micro_batch_size < 1 or self.ga_steps < 1:
            raise ConfigError("n_groups, micro_batch_size, ga_steps must be >= 1")
        if self.sync_scope.kind == "subgroup":
            size = self.sync_scope.size
            if not size or size < 1 or self.n_groups % size != 0:
                raise ConfigError(
                    f"subgroup size {size} must divide n_groups {self.n_groups}")

    @property
    def balance_bsz(self) -> int:
        """Width (in sequences) of the set behind the selection frequency."""
        width = self.sync_scope.width(self.n_groups)
        return self.micro_batch_size * width * (self.ga_steps if self.use_buffer else 1)


@dataclass
class FrequencyBuffer:
    """Running synchronized selection counts across one optimizer window."""

    cum_counts: np.ndarray
    cum_tokens: int = 0
    ga_step_index: int = 0

    @classmethod
    def empty(cls, n_experts: int) -> "FrequencyBuffer":
        return cls(cum_counts=np.zeros(n_experts, dtype=np.int64))

    @property
    def f(self) -> np.ndarray:
        total = self.cum_counts.sum()
        if total == 0:
            raise ValueError("frequency buffer is empty")
        return self.cum_counts / total


def buffer_update(buffer: FrequencyBuffer, synced: BalanceStats) -> FrequencyBuffer:
    """Fold one GA step's synchronized counts into the buffer."""
    return FrequencyBuffer(cum_counts=buffer.cum_counts + synced.counts,
                           cum_tokens=buffer.cum_tokens + synced.n_tokens,
                           ga_step_index=buffer.ga_step_index + 1)


def buffer_reset(buffer: FrequencyBuffer) -> FrequencyBuffer:
    """All-zero state at the optimizer-step boundary; idempotent."""
    return FrequencyBuffer.empty(buffer.cum_counts.shape[0])


@dataclass
class CommRecord:
    step: int
    payload_kind: str     # "freq_vector" | "full_matrix"
    bytes: int
    participants: int


@dataclass
class CommLog:
    records: list[CommRecord] = field(default_factory=list)

    def log_freq_sync(self, step: int, n_experts: int, participants: int) -> None:
        self.records.append(CommRecord(
            step=step, payload_kind="freq_vector",
            bytes=n_experts * FLOAT_BYTES * participants, participants=participants))

    def log_matrix_sync(self, step: int, n_experts: int, tokens_per_group: int,
                        participants: int) -> None:
        """Cost of shipping each group's full token-expert matrix (shuffle ablation)."""
        self.records.append(CommRecord(
            step=step, payload_kind="full_matrix",
            bytes=tokens_per_group * n_experts * FLOAT_BYTES * participants,
            participants=participants))

    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.records)

    def bytes_since(self, index: int) -> int:
        return sum(r.bytes for r in self.records[index:])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "payload_kind", "bytes", "participants"])
            for r in self.records:
                writer.writerow([r.step, r.payload_kind, r.bytes, r.participants])


def all_gather_counts(local_stats: list[BalanceStats], scope: SyncScope,
                      comm_log: CommLog | None = None, step: int = 0,
                      ) -> list[BalanceStats]:
    """Pool counts within each scope cell; returns each group's cell view.

    Scope ``none`` is the identity and transmits nothing; wider scopes log one
    freq-vector all-gather per cell.
    """
    n_experts = local_stats[0].n_experts
    for s in local_stats[1:]:
        if s.n_experts != n_experts:
            raise SyncIntegrityError("groups disagree on expert count")
    if scope.kind == "none":
        return list(local_stats)
    out: list[BalanceStats | None] = [None] * len(local_stats)
    for cell in scope.cells(len(local_stats)):
        synced = merge_stats([local_stats[g] for g in cell])
        for g in cell:
            out[g] = synced
        if comm_log is not None and len(cell) > 1:
            comm_log.log_freq_sync(step, n_experts, len(cell))
    return out


@dataclass
class CommComparison:
    """Freq-vector sync cost vs hypothetically shipping the selection matrix."""

    freq_bytes: int
    matrix_bytes: int
    tokens_per_group: int

    @property
    def ratio(self) -> float:
        return self.matrix_bytes / self.freq_bytes


def comm_overhead_report(log: CommLog, tokens_per_group: int) -> CommComparison:
    """Bytes actually synced vs the full token-expert matrix alternative.

    The matrix payload scales each participant's contribution by its token
    count, so the ratio equals tokens_per_group for equal-size groups.
    """
    freq = sum(r.bytes for r in log.records if r.payload_kind == "freq_vector")
    return CommComparison(freq_bytes=freq, matrix_bytes=freq * tokens_per_group,
                          tokens_per_group=tokens_per_group)


# ---------------------------------------------------------------------------
# one gradient-accumulation step across all groups


@dataclass
class GroupActivations:
    """One group's slice of the pooled pass: routing, stats, gate probs per layer."""

    decisions: list[GatingDecision]
    stats: list[BalanceStats]
    probs: list[Tensor]


@dataclass
class StepOutput:
    forward: ForwardResult
    groups: list[GroupActivations]
    tokens: np.ndarray
    tokens_per_group: int


def run_accumulation_step(model: MoELanguageModel, batches: list,
                          biases: list[GatingBias] | None = None) -> StepOutput:
    """Forward all groups' micro-batches and split per-group statistics.

    One micro-batch per group; every group sees identical parameters (they
    share storage, so replica divergence is identically zero). The returned
    per-group gate probabilities are row slices of the pooled tensors, which
    keeps each group's balance-loss gradient local to its own tokens.
    """
    if not batches:
        raise ValueError("need one micro-batch per group")
    tokens = np.concatenate([b.tokens for b in batches], axis=0)
    seqs_per_group = batches[0].tokens.shape[0]
    t_group = seqs_per_group * (tokens.shape[1] - 1)
    result = model.forward(tokens, biases)
    groups = []
    for g in range(len(batches)):
        a, b = g * t_group, (g + 1) * t_group
        decisions, stats, probs = [], [], []
        for dec in result.decisions:
            probs_g = ad.row_slice(dec.probs, a, b)
            dec_g = GatingDecision(probs=probs_g,
                                   topk_indices=dec.topk_indices[a:b],
                                   topk_scores=dec.topk_scores[a:b],
                                   selection_matrix=dec.selection_matrix[a:b])
            decisions.append(dec_g)
            stats.append(BalanceStats.from_decision(dec_g))
            probs.append(probs_g)
        groups.append(GroupActivations(decisions=decisions, stats=stats, probs=probs))
    return StepOutput(forward=result, groups=groups, tokens=tokens,
                      tokens_per_group=t_group)
