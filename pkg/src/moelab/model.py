"""N-gram MLP language model with routed MoE blocks.

Per position t the model embeds the previous ``context`` tokens, concatenates
them, projects to the hidden width, applies L residual MoE blocks, and
projects to vocabulary logits to predict token t+1. No attention: the n-gram
backbone is enough to exercise routing and balancing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .moe import (ConfigError, GatingBias, GatingDecision, MoEBlock, MoEConfig,
                  make_decision)

MODEL_MAGIC = b"MOEM"
MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_dim: int
    context: int          # n-gram width: how many previous tokens feed each prediction
    n_layers: int
    moe: MoEConfig

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.context < 1:
            raise ConfigError("context must be >= 1")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.moe.hidden_dim != self.hidden_dim:
            raise ConfigError("moe.hidden_dim must equal model hidden_dim")


def default_model_config(vocab_size: int = 64) -> ModelConfig:
    """Desk-scale default: minutes-long runs with measurable specialization."""
    return ModelConfig(
        vocab_size=vocab_size,
        hidden_dim=64,
        context=8,
        n_layers=2,
        moe=MoEConfig(n_experts=16, top_k=2, n_shared=1, hidden_dim=64, expert_dim=32),
    )


def ngram_context(emb: Tensor, batch: int, seq: int, n: int) -> Tensor:
    """Concatenate each position's previous-n embeddings (zero-padded at start).

    Input rows are flattened (batch*seq, h); output is (batch*seq, n*h) where
    slot j holds the embedding n-1-j steps back (slot n-1 = current token).
    Context never crosses sequence boundaries.
    """
    h = emb.data.shape[1]
    e3 = emb.data.reshape(batch, seq, h)
    out_data = np.zeros((batch, seq, n * h))
    for j in range(n):
        back = n - 1 - j
        if back < seq:
            out_data[:, back:, j * h:(j + 1) * h] = e3[:, :seq - back]
    out = Tensor(out_data.reshape(batch * seq, n * h))

    def backward(g):
        if not emb.requires_grad:
            return
        g3 = g.reshape(batch, seq, n * h)
        ge = np.zeros_like(e3)
        for j in range(n):
            back = n - 1 - j
            if back < seq:
                ge[:, :seq - back] += g3[:, back:, j * h:(j + 1) * h]
        ad.accumulate(emb, ge.reshape(batch * seq, h))

    return ad.record(out, (emb,), backward)


@dataclass
class ForwardResult:
    logits: Tensor                       # (T, V) next-token logits
    decisions: list[GatingDecision]      # one per layer
    router_logits: list[Tensor]          # one per layer, pre-gating
    n_tokens: int


class MoELanguageModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        v, h, n = cfg.vocab_size, cfg.hidden_dim, cfg.context
        self.embedding = Tensor(rng.normal(0.0, 0.5, (v, h)), requires_grad=True)
        self.w_ctx = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n * h), (n * h, h)),
                            requires_grad=True)
        self.b_ctx = Tensor(np.zeros(h), requires_grad=True)
        self.blocks = [MoEBlock(cfg.moe, rng) for _ in range(cfg.n_layers)]
        self.w_out = Tensor(rng.normal(0.0, 1.0 / np.sqrt(h), (h, v)), requires_grad=True)
        self.b_out = Tensor(np.zeros(v), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        params = [self.embedding, self.w_ctx, self.b_ctx]
        for block in self.blocks:
            params += block.parameters()
        params += [self.w_out, self.b_out]
        return params

    def parameter_names(self) -> list[str]:
        names = ["embedding", "w_ctx", "b_ctx"]
        for li, block in enumerate(self.blocks):
            names += [f"block{li}.{n}" for n in
                      ("w_router", "b_router", "w1", "b1", "w2", "b2")]
            for si in range(len(block.shared)):
                names += [f"block{li}.shared{si}.{n}" for n in ("w1", "b1", "w2", "b2")]
        names += ["w_out", "b_out"]
        return names

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, tokens: np.ndarray,
                biases: list[GatingBias] | None = None) -> ForwardResult:
        """Predict tokens[:, 1:] from running context; returns per-layer routing.

        ``tokens`` is (batch, seq); the first seq-1 positions are inputs, so
        the result covers T = batch*(seq-1) predictions.
        """
        tokens = np.asarray(tokens)
        batch, seq = tokens.shape
        inp = tokens[:, :-1]
        t = batch * (seq - 1)
        emb = ad.gather_rows(self.embedding, inp.reshape(-1))
        ctx = ngram_context(emb, batch, seq - 1, self.cfg.context)
        x = ad.add(ad.matmul(ctx, self.w_ctx), self.b_ctx)
        decisions: list[GatingDecision] = []
        router_logits: list[Tensor] = []
        for li, block in enumerate(self.blocks):
            logits_l = block.router_logits(x)
            decision = make_decision(block.gate(logits_l), block.cfg,
                                     biases[li] if biases else None)
            y = block.forward(x, decision)
            x = ad.add(x, y)
            decisions.append(decision)
            router_logits.append(logits_l)
        logits = ad.add(ad.matmul(x, self.w_out), self.b_out)
        return ForwardResult(logits=logits, decisions=decisions,
                             router_logits=router_logits, n_tokens=t)

    def lm_loss(self, result: ForwardResult, tokens: np.ndarray) -> Tensor:
        targets = np.asarray(tokens)[:, 1:].reshape(-1)
        return ad.cross_entropy(result.logits, targets)


# ---------------------------------------------------------------------------
# versioned flat parameter dump


def save_model(model: MoELanguageModel, path) -> None:
    names = model.parameter_names()
    params = model.parameters()
    header = json.dumps({
        "version": MODEL_VERSION,
        "params": [[n, list(p.shape)] for n, p in zip(names, params)],
    }).encode()
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", MODEL_VERSION, len(header)))
        f.write(header)
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_parameters(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model dump (magic {magic!r})")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model version {version}")
        header = json.loads(f.read(hlen))
        out = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            buf = f.read(count * 8)
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        return out


def load_model(cfg: ModelConfig, path) -> MoELanguageModel:
    model = MoELanguageModel(cfg, seed=0)
    stored = load_parameters(path)
    names = model.parameter_names()
    if set(names) != set(stored):
        raise ValueError(f"{path}: parameter names do not match model config")
    for name, param in zip(names, model.parameters()):
        if tuple(stored[name].shape) != param.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        param.data = stored[name]
    return model
