"""Synthetic multi-domain corpora: order-1 Markov chains over a shared vocabulary.

Mirrors the data condition of large-scale pretraining: each micro-batch is
domain-pure (packed sequences from one domain) while the global batch mixes
domains according to a recipe. Domains share the vocabulary but concentrate
their transitions on overlapping token blocks with domain-specific bigram
patterns, so they are distinguishable from context yet not by token identity
alone. A disjoint-range mode exists as an easy sanity setting.

All generation is a pure function of config + seed. Training batches,
domain draws, and held-out sets consume disjoint seed streams.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .moe import ConfigError

CORPUS_MAGIC = b"MOEC"
CORPUS_VERSION = 1

# seed-stream tags: training data, held-out data, and per-step domain draws
# never share a key
_STREAM_TRAIN = 1
_STREAM_HELDOUT = 2
_STREAM_DOMAIN_DRAW = 3

DOMAIN_NAMES = ("code-like", "math-like", "zh-like", "general")


class DomainValidationError(ValueError):
    """Raised when a domain's generative parameters are not stochastic."""


@dataclass
class DomainSpec:
    name: str
    transition: np.ndarray   # (V, V) row-stochastic
    start_dist: np.ndarray   # (V,) stochastic
    seed: int
    _cum_transition: np.ndarray | None = field(default=None, repr=False, compare=False)
    _cum_start: np.ndarray | None = field(default=None, repr=False, compare=False)

    def validate(self) -> None:
        rows = self.transition.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-9) or np.any(self.transition < 0):
            raise DomainValidationError(f"domain {self.name}: transition rows must sum to 1")
        if abs(self.start_dist.sum() - 1.0) > 1e-9 or np.any(self.start_dist < 0):
            raise DomainValidationError(f"domain {self.name}: start_dist must sum to 1")

    @property
    def vocab_size(self) -> int:
        return self.transition.shape[0]

    def cumulative(self):
        if self._cum_transition is None:
            self.validate()
            self._cum_transition = np.cumsum(self.transition, axis=1)
            self._cum_start = np.cumsum(self.start_dist)
        return self._cum_transition, self._cum_start

    def stationary(self, iters: int = 500) -> np.ndarray:
        pi = np.full(self.vocab_size, 1.0 / self.vocab_size)
        for _ in range(iters):
            pi = pi @ self.transition
        return pi


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


@dataclass
class CorpusConfig:
    domains: list[DomainSpec]
    recipe: np.ndarray       # per-domain sampling weights, sum 1
    seq_len: int
    vocab_size: int

    def __post_init__(self):
        self.recipe = np.asarray(self.recipe, dtype=np.float64)
        if len(self.recipe) != len(self.domains):
            raise ConfigError("recipe length must match domain count")
        if np.any(self.recipe < 0) or abs(self.recipe.sum() - 1.0) > 1e-9:
            raise ConfigError("recipe weights must be >= 0 and sum to 1")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")
        for d in self.domains:
            if d.vocab_size != self.vocab_size:
                raise ConfigError(f"domain {d.name} vocab differs from corpus vocab")

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]


@dataclass
class MicroBatch:
    """Domain-pure token batch: every sequence comes from one domain."""

    tokens: np.ndarray      # (B, seq_len) integer ids
    domain: str


def make_default_domains(vocab_size: int = 64, n_domains: int = 4, seed: int = 0,
                         branching: int = 4, leak: float = 0.05,
                         block_size: int | None = None, disjoint: bool = False,
                         min_separation: float = 0.3) -> list[DomainSpec]:
    """Build distinguishable domains over one vocabulary.

    Each domain owns a (wrapping) block of preferred tokens; every row's mass
    concentrates on ``branching`` block tokens with geometric weights, plus a
    uniform leak. Blocks overlap across domains unless ``disjoint``. Raises if
    the stationary distributions are closer than ``min_separation`` in total
    variation.
    """
    stride = vocab_size // n_domains
    width = stride if disjoint else (block_size or min(vocab_size, stride + 12))
    geo = 0.5 ** np.arange(branching)
    geo = geo / geo.sum()
    domains = []
    for d in range(n_domains):
        rng = np.random.default_rng([seed, d])
        block = (d * stride + np.arange(width)) % vocab_size
        transition = np.full((vocab_size, vocab_size), leak / vocab_size)
        for v in range(vocab_size):
            nxt = rng.choice(block, size=branching, replace=False)
            transition[v, nxt] += (1.0 - leak) * geo
        start = np.full(vocab_size, leak / vocab_size)
        start[block] += (1.0 - leak) / width
        name = DOMAIN_NAMES[d % len(DOMAIN_NAMES)] if n_domains <= len(DOMAIN_NAMES) \
            else f"domain{d}"
        spec = DomainSpec(name=name, transition=transition, start_dist=start,
                          seed=seed + d)
        spec.validate()
        domains.append(spec)
    stationaries = [d.stationary() for d in domains]
    for i in range(n_domains):
        for j in range(i + 1, n_domains):
            tv = total_variation(stationaries[i], stationaries[j])
            if tv < min_separation:
                raise DomainValidationError(
                    f"domains {domains[i].name}/{domains[j].name} too close: "
                    f"TV {tv:.3f} < {min_separation}")
    return domains


def default_corpus(seed: int = 0, vocab_size: int = 64, n_domains: int = 4,
                   seq_len: int = 64, disjoint: bool = False) -> CorpusConfig:
    domains = make_default_domains(vocab_size=vocab_size, n_domains=n_domains,
                                   seed=seed, disjoint=disjoint)
    recipe = np.full(n_domains, 1.0 / n_domains)
    return CorpusConfig(domains=domains, recipe=recipe, seq_len=seq_len,
                        vocab_size=vocab_size)


def generate_batch(spec: DomainSpec, n_seq: int, length: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Sample ``n_seq`` Markov sequences of ``length`` tokens at once."""
    if length < 1:
        raise ValueError("length must be >= 1")
    cum_t, cum_s = spec.cumulative()
    v = spec.vocab_size
    out = np.empty((n_seq, length), dtype=np.int64)
    out[:, 0] = np.minimum(np.searchsorted(cum_s, rng.random(n_seq)), v - 1)
    for t in range(1, length):
        r = rng.random(n_seq)
        cdf = cum_t[out[:, t - 1]]
        out[:, t] = np.minimum((cdf < r[:, None]).sum(axis=1), v - 1)
    return out


def generate_sequence(spec: DomainSpec, length: int,
                      rng: np.random.Generator) -> np.ndarray:
    """One Markov sample; deterministic under a fixed generator state."""
    return generate_batch(spec, 1, length, rng)[0]


def training_stream_key(seed: int, step: int, group: int) -> tuple[int, ...]:
    return (seed, _STREAM_TRAIN, step, group)


def heldout_stream_key(seed: int, domain_index: int) -> tuple[int, ...]:
    return (seed, _STREAM_HELDOUT, domain_index)


def build_global_batch(cfg: CorpusConfig, n_groups: int, micro_batch_size: int,
                       seed: int, step: int) -> list[MicroBatch]:
    """One domain-pure micro-batch per group, domains drawn per the recipe."""
    draw_rng = np.random.default_rng([seed, _STREAM_DOMAIN_DRAW, step])
    dom_idx = draw_rng.choice(len(cfg.domains), size=n_groups, p=cfg.recipe)
    batches = []
    for g in range(n_groups):
        spec = cfg.domains[dom_idx[g]]
        rng = np.random.default_rng(training_stream_key(seed, step, g))
        tokens = generate_batch(spec, micro_batch_size, cfg.seq_len, rng)
        batches.append(MicroBatch(tokens=tokens, domain=spec.name))
    return batches


def heldout_sets(cfg: CorpusConfig, n_sequences: int = 32,
                 seed: int = 0) -> dict[str, np.ndarray]:
    """Fixed-size per-domain evaluation sets from seed streams disjoint from
    every training stream."""
    out = {}
    for d, spec in enumerate(cfg.domains):
        rng = np.random.default_rng(heldout_stream_key(seed, d))
        out[spec.name] = generate_batch(spec, n_sequences, cfg.seq_len, rng)
    return out


# ---------------------------------------------------------------------------
# binary corpus dump: magic "MOEC", version, vocab_size, seq_len, count,
# then little-endian 32-bit token ids


def write_corpus(path, sequences: np.ndarray, vocab_size: int) -> None:
    sequences = np.asarray(sequences)
    count, seq_len = sequences.shape
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(struct.pack("<IIIQ", CORPUS_VERSION, vocab_size, seq_len, count))
        f.write(np.ascontiguousarray(sequences, dtype="<i4").tobytes())


def read_corpus(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CORPUS_MAGIC:
            raise ValueError(f"{path}: not a corpus file (magic {magic!r})")
        version, vocab_size, seq_len, count = struct.unpack("<IIIQ", f.read(20))
        if version != CORPUS_VERSION:
            raise ValueError(f"{path}: unsupported corpus version {version}")
        data = np.frombuffer(f.read(count * seq_len * 4), dtype="<i4")
        return data.reshape(count, seq_len).astype(np.int64), vocab_size
