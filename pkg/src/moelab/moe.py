"""The MoE feed-forward block: router, topK sparse dispatch, weighted combine.

Routing follows the classic sparse-gating recipe: a linear router produces
per-expert scores, which are post-processed by softmax (scores form a
distribution) or sigmoid (independent per-expert scores, required by the
aux-loss-free balancer). The top K scoring experts process each token and
their outputs are combined weighted by the *raw* gate scores — no
renormalization over the selected set, so score sums below 1 stay
informative for analysis. Shared experts run on every token with
coefficient 1. Execution is dropless: every selected token is processed.

A ``GatingBias`` shifts scores for *selection only*: it never enters the
combine weights and never receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


GATINGS = ("softmax", "sigmoid")


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int
    top_k: int
    n_shared: int
    hidden_dim: int
    expert_dim: int
    gating: str = "softmax"

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(
                f"top_k must satisfy 1 <= top_k <= n_experts, got top_k={self.top_k} "
                f"with n_experts={self.n_experts}")
        if self.n_shared < 0:
            raise ConfigError("n_shared must be >= 0")
        if self.gating not in GATINGS:
            raise ConfigError(f"gating must be one of {GATINGS}, got {self.gating!r}")


@dataclass
class GatingBias:
    """Per-expert additive score bias used by the aux-loss-free balancer."""

    bias: np.ndarray

    @classmethod
    def zeros(cls, n_experts: int) -> "GatingBias":
        return cls(np.zeros(n_experts))


@dataclass
class GatingDecision:
    """Per-token routing outcome for one batch through one MoE layer."""

    probs: Tensor                 # (T, N_E) post-gating scores, on the tape
    topk_indices: np.ndarray      # (T, K) selected expert ids, best first
    topk_scores: np.ndarray       # (T, K) probs at the selected ids (bias excluded)
    selection_matrix: np.ndarray  # (T, N_E) binary token-expert matrix

    @property
    def n_tokens(self) -> int:
        return self.topk_indices.shape[0]

    @property
    def top_k(self) -> int:
        return self.topk_indices.shape[1]


def select_topk(scores: np.ndarray, top_k: int,
                bias: np.ndarray | None = None) -> np.ndarray:
    """Indices of the K largest scores per row, ties broken by lowest index.

    ``bias`` shifts scores for ranking only; callers keep combine weights from
    the unbiased scores.
    """
    ranked = scores if bias is None else scores + bias
    # stable sort on -scores: equal scores keep ascending index order
    return np.argsort(-ranked, axis=1, kind="stable")[:, :top_k]


def make_decision(probs: Tensor, cfg: MoEConfig,
                  bias: GatingBias | None = None) -> GatingDecision:
    idx = select_topk(probs.data, cfg.top_k, None if bias is None else bias.bias)
    scores = np.take_along_axis(probs.data, idx, axis=1)
    t = probs.data.shape[0]
    sel = np.zeros((t, cfg.n_experts), dtype=bool)
    sel[np.arange(t)[:, None], idx] = True
    return GatingDecision(probs=probs, topk_indices=idx, topk_scores=scores,
                          selection_matrix=sel)


def expert_load(decision: GatingDecision) -> np.ndarray:
    """Per-expert selection counts; sums to T*K (dropless)."""
    return decision.selection_matrix.sum(axis=0).astype(np.int64)


def _sorted_selections(decision: GatingDecision, n_experts: int):
    """Flatten (token, expert, weight) triples and sort by expert for dispatch."""
    t, k = decision.topk_indices.shape
    flat_exp = decision.topk_indices.ravel()
    order = np.argsort(flat_exp, kind="stable")
    tok = np.repeat(np.arange(t, dtype=np.int64), k)[order]
    exp = flat_exp[order]
    seg = np.zeros(n_experts + 1, dtype=np.int64)
    np.cumsum(np.bincount(exp, minlength=n_experts), out=seg[1:])
    return tok, exp, order, seg


def expert_combine(x: Tensor, decision: GatingDecision, w1: Tensor, b1: Tensor,
                   w2: Tensor, b2: Tensor) -> Tensor:
    """Weighted sum of selected expert outputs: y[t] = sum_i probs[t,i]*E_i(x[t]).

    Single fused tape node; forward/backward run on the configured kernel
    backend. Gradients reach x, the gate probs (at selected entries), and all
    expert parameters.
    """
    n_experts = w1.data.shape[0]
    tok, exp, order, seg = _sorted_selections(decision, n_experts)
    w_sel = decision.topk_scores.ravel()[order]
    y, hid, rows = kernels.dispatch_forward(
        x.data, tok, w_sel, seg, w1.data, b1.data, w2.data, b2.data)
    out = Tensor(y)
    probs = decision.probs

    def backward(g):
        gx, gw1, gb1, gw2, gb2, gw = kernels.dispatch_backward(
            g, x.data, tok, w_sel, seg, w1.data, w2.data, hid, rows)
        ad.accumulate(x, gx)
        ad.accumulate(w1, gw1)
        ad.accumulate(b1, gb1)
        ad.accumulate(w2, gw2)
        ad.accumulate(b2, gb2)
        if probs.requires_grad:
            gp = np.zeros_like(probs.data)
            np.add.at(gp, (tok, exp), gw)
            ad.accumulate(probs, gp)

    return ad.record(out, (x, probs, w1, b1, w2, b2), backward)


class MoEBlock:
    """One routed feed-forward layer: router + N_E experts + shared experts.

    Experts are 2-layer MLPs (hidden_dim -> expert_dim -> hidden_dim, relu).
    Shared experts have the same shape, run on every token, and are added
    with coefficient 1.
    """

    def __init__(self, cfg: MoEConfig, rng: np.random.Generator):
        self.cfg = cfg
        h, d, n = cfg.hidden_dim, cfg.expert_dim, cfg.n_experts
        s = 1.0 / np.sqrt(h)
        self.w_router = Tensor(rng.normal(0.0, s, (h, n)), requires_grad=True)
        self.b_router = Tensor(np.zeros(n), requires_grad=True)
        self.w1 = Tensor(rng.normal(0.0, s, (n, h, d)), requires_grad=True)
        self.b1 = Tensor(np.zeros((n, d)), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (n, d, h)), requires_grad=True)
        self.b2 = Tensor(np.zeros((n, h)), requires_grad=True)
        self.shared = []
        for _ in range(cfg.n_shared):
            self.shared.append((
                Tensor(rng.normal(0.0, s, (h, d)), requires_grad=True),
                Tensor(np.zeros(d), requires_grad=True),
                Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, h)), requires_grad=True),
                Tensor(np.zeros(h), requires_grad=True),
            ))

    def parameters(self) -> list[Tensor]:
        params = [self.w_router, self.b_router, self.w1, self.b1, self.w2, self.b2]
        for ws1, bs1, ws2, bs2 in self.shared:
            params += [ws1, bs1, ws2, bs2]
        return params

    def router_logits(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w_router), self.b_router)

    def gate(self, logits: Tensor) -> Tensor:
        if self.cfg.gating == "softmax":
            return ad.softmax(logits)
        return ad.sigmoid(logits)

    def route(self, x: Tensor, bias: GatingBias | None = None) -> GatingDecision:
        """Score experts for each token and pick the topK, lowest index on ties."""
        if x.data.shape[0] < 1:
            raise ValueError("route requires at least one token")
        logits = self.router_logits(x)
        return make_decision(self.gate(logits), self.cfg, bias)

    def forward(self, x: Tensor, decision: GatingDecision) -> Tensor:
        """Eq.-style combine: routed expert sum plus unweighted shared experts."""
        y = expert_combine(x, decision, self.w1, self.b1, self.w2, self.b2)
        for ws1, bs1, ws2, bs2 in self.shared:
            hidden = ad.relu(ad.add(ad.matmul(x, ws1), bs1))
            y = ad.add(y, ad.add(ad.matmul(hidden, ws2), bs2))
        return y

    def __call__(self, x: Tensor, bias: GatingBias | None = None):
        decision = self.route(x, bias)
        return self.forward(x, decision), decision
