"""End-to-end training loop binding model, balance strategy, parallel plan,
and data.

One ``train_step`` call runs a full optimizer window: ``ga_steps`` stacked
forward/backward passes (gradients averaged across the window), the balance
term of the active mode, one optimizer update, and — for the buffered mode —
the count-buffer fold/reset cycle. Balance-mode switching happens between
windows per the configured schedule.

Both LBL definitions (micro and global) are logged every step regardless of
which one is optimized, so mode comparisons never need reruns.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import balance
from .autodiff import Tape
from .balance import BalanceStats, LossWeights, merge_stats
from .datagen import CorpusConfig, build_global_batch, heldout_sets
from .model import ModelConfig, MoELanguageModel, save_model
from .moe import ConfigError, GatingBias
from .optim import make_optimizer
from .parallel import (CommLog, FrequencyBuffer, ParallelPlan, all_gather_counts,
                       buffer_reset, buffer_update, run_accumulation_step)

BALANCE_MODES = ("micro", "global_sync", "global_buffer", "shuffle", "aux_free",
                 "mixed")


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries a diagnostic record."""

    def __init__(self, step: int, lm_loss: float, balance_value: float):
        self.step = step
        self.lm_loss = lm_loss
        self.balance_value = balance_value
        super().__init__(
            f"non-finite loss at micro-step {step}: lm={lm_loss} balance={balance_value}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int                                   # total GA micro-steps
    lr: float = 3e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.95)
    weights: LossWeights = field(default_factory=LossWeights)
    balance_mode: str = "micro"
    switch_schedule: tuple[tuple[int, str], ...] = ()
    eval_every: int = 500                        # in optimizer steps
    seed: int = 0
    aux_free_step: float = 1e-3
    aux_free_scope: str = "global"               # "micro" | "global"
    shuffle_sample_tokens: int | None = None     # default: one micro-batch of tokens
    heldout_sequences: int = 32

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.balance_mode not in BALANCE_MODES:
            raise ConfigError(f"balance_mode must be one of {BALANCE_MODES}")
        last = -1
        for s, mode in self.switch_schedule:
            if mode not in BALANCE_MODES:
                raise ConfigError(f"switch mode {mode!r} unknown")
            if s <= last or s >= self.steps:
                raise ConfigError("switch steps must be strictly increasing and < steps")
            last = s
        if self.aux_free_scope not in ("micro", "global"):
            raise ConfigError("aux_free_scope must be micro or global")


@dataclass
class MetricsRecord:
    step: int                      # optimizer step (1-based)
    lm_loss: float
    lbl_micro: float
    lbl_global: float
    zloss: float
    ppl: dict[str, float] | None   # per-domain held-out perplexity, eval steps only
    max_freq: float                # max pooled-window expert frequency (any layer)
    comm_bytes: int
    balance_mode: str
    optimized_lbl: float           # value of the term the active mode optimizes


class TrainState:
    def __init__(self, model: MoELanguageModel, plan: ParallelPlan, cfg: TrainConfig):
        self.model = model
        self.plan = plan
        self.optimizer = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr,
                                        cfg.betas)
        self.mode = cfg.balance_mode
        self.micro_step = 0
        self.comm_log = CommLog()
        n_experts = model.cfg.moe.n_experts
        n_cells = len(plan.sync_scope.cells(plan.n_groups))
        self.buffers = [[FrequencyBuffer.empty(n_experts) for _ in range(n_cells)]
                        for _ in range(model.cfg.n_layers)]
        self.biases = [GatingBias.zeros(n_experts) for _ in range(model.cfg.n_layers)]
        self.shuffle_rng = np.random.default_rng([cfg.seed, 4])
        self._pending_switches = list(cfg.switch_schedule)

    def apply_switches(self) -> None:
        while self._pending_switches and self._pending_switches[0][0] <= self.micro_step:
            _, self.mode = self._pending_switches.pop(0)


def _layer_mean(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def train_step(state: TrainState, window_batches: list[list], cfg: TrainConfig,
               ) -> MetricsRecord:
    """Run one optimizer window (``ga_steps`` micro-steps) and update parameters."""
    plan = state.plan
    model = state.model
    state.apply_switches()
    mode = state.mode
    n_layers = model.cfg.n_layers
    scope = plan.sync_scope
    cells = scope.cells(plan.n_groups)
    comm_mark = len(state.comm_log.records)

    lm_values, micro_values, global_stats_window = [], [], [[] for _ in range(n_layers)]
    z_values, optimized_values = [], []
    aux_window_stats: list[list[BalanceStats]] = [[] for _ in range(n_layers)]

    for batches in window_batches:
        tape = Tape()
        with tape:
            out = run_accumulation_step(
                model, batches, state.biases if mode == "aux_free" else None)
            lm = model.lm_loss(out.forward, out.tokens)

            layer_terms = []
            layer_micro_terms = []
            layer_z_terms = []
            for li in range(n_layers):
                pairs = [(g.stats[li], g.probs[li]) for g in out.groups]
                local_stats = [g.stats[li] for g in out.groups]
                global_stats_window[li].extend(local_stats)
                micro_values.append(balance.micro_lbl_value(local_stats))

                if mode == "micro":
                    layer_terms.append(balance.micro_lbl(pairs))
                elif mode in ("global_sync", "global_buffer", "mixed"):
                    synced = all_gather_counts(local_stats, scope, state.comm_log,
                                               state.micro_step)
                    cell_terms = []
                    for ci, cell in enumerate(cells):
                        cell_pairs = [pairs[g] for g in cell]
                        buffered = mode == "global_buffer" or (
                            mode == "mixed" and plan.use_buffer)
                        if buffered:
                            buf = buffer_update(state.buffers[li][ci], synced[cell[0]])
                            state.buffers[li][ci] = buf
                            cell_terms.append(
                                balance.lbl_with_frequency(buf.f, cell_pairs))
                        else:
                            cell_terms.append(
                                balance.global_lbl(synced[cell[0]], cell_pairs))
                    layer_terms.append(_layer_mean(cell_terms))
                    if mode == "mixed":
                        layer_micro_terms.append(balance.micro_lbl(pairs))
                elif mode == "shuffle":
                    dec = out.forward.decisions[li]
                    sample = cfg.shuffle_sample_tokens or out.tokens_per_group
                    state.comm_log.log_matrix_sync(
                        state.micro_step, dec.probs.data.shape[1],
                        out.tokens_per_group, plan.n_groups)
                    layer_terms.append(balance.shuffle_lbl(
                        dec.selection_matrix, dec.probs, sample, state.shuffle_rng))
                elif mode == "aux_free":
                    if cfg.aux_free_scope == "global":
                        synced = all_gather_counts(
                            local_stats, scope, state.comm_log, state.micro_step)
                        aux_window_stats[li].append(synced[0])
                    else:
                        aux_window_stats[li].extend(local_stats)

                layer_z_terms.append(balance.z_loss(out.forward.router_logits[li]))

            z_term = _layer_mean(layer_z_terms)
            primary = _layer_mean(layer_terms) if layer_terms else None
            micro_mix = _layer_mean(layer_micro_terms) if layer_micro_terms else None
            total = balance.combined_loss(lm, cfg.weights, primary=primary,
                                          micro_mix=micro_mix, zloss=z_term)
            scaled = total * (1.0 / len(window_batches))

        lm_values.append(lm.item())
        z_values.append(z_term.item())
        if primary is not None:
            optimized_values.append(primary.item())
        if not math.isfinite(total.item()):
            raise TrainingDivergedError(state.micro_step, lm.item(),
                                        0.0 if primary is None else primary.item())
        tape.backward(scaled)
        state.micro_step += 1

    if mode == "aux_free":
        for li in range(n_layers):
            if cfg.aux_free_scope == "global":
                window = merge_stats(aux_window_stats[li])
                state.biases[li] = balance.aux_free_update(
                    state.biases[li], window, cfg.aux_free_step)
            else:
                state.biases[li] = balance.aux_free_update_mean_sign(
                    state.biases[li], aux_window_stats[li], cfg.aux_free_step)

    state.optimizer.step()
    state.optimizer.zero_grad()
    for li in range(n_layers):
        state.buffers[li] = [buffer_reset(b) for b in state.buffers[li]]

    pooled_layers = [merge_stats(stats) for stats in global_stats_window]
    lbl_global = float(np.mean([balance.lbl_value(s) for s in pooled_layers]))
    max_freq = float(max(s.f.max() for s in pooled_layers))
    opt_step = state.micro_step // plan.ga_steps
    return MetricsRecord(
        step=opt_step,
        lm_loss=float(np.mean(lm_values)),
        lbl_micro=float(np.mean(micro_values)),
        lbl_global=lbl_global,
        zloss=float(np.mean(z_values)),
        ppl=None,
        max_freq=max_freq,
        comm_bytes=state.comm_log.bytes_since(comm_mark),
        balance_mode=mode,
        optimized_lbl=float(np.mean(optimized_values)) if optimized_values
        else float("nan"),
    )


def evaluate_ppl(model: MoELanguageModel, heldout: dict[str, np.ndarray],
                 biases: list[GatingBias] | None = None) -> dict[str, float]:
    """Per-domain exp(mean token NLL); runs forward-only (no tape, no gradient)."""
    out = {}
    for name, tokens in heldout.items():
        result = model.forward(tokens, biases)
        nll = model.lm_loss(result, tokens)
        out[name] = float(np.exp(nll.item()))
    return out


# ---------------------------------------------------------------------------
# experiment runner


def metrics_header(domain_names: list[str]) -> list[str]:
    return (["step", "lm_loss", "lbl_micro", "lbl_global", "zloss"]
            + [f"ppl_{d}" for d in domain_names] + ["max_freq", "comm_bytes"])


def metrics_row(rec: MetricsRecord, domain_names: list[str]) -> list[str]:
    row = [str(rec.step), repr(rec.lm_loss), repr(rec.lbl_micro),
           repr(rec.lbl_global), repr(rec.zloss)]
    for d in domain_names:
        row.append(repr(rec.ppl[d]) if rec.ppl is not None else "")
    row += [repr(rec.max_freq), str(rec.comm_bytes)]
    return row


@dataclass
class RunResult:
    run_dir: Path
    records: list[MetricsRecord]
    final_ppl: dict[str, float]
    model: MoELanguageModel
    state: TrainState


def run_experiment(model_cfg: ModelConfig, plan: ParallelPlan, corpus: CorpusConfig,
                   cfg: TrainConfig, out_dir, config_text: str | None = None,
                   ) -> RunResult:
    """Full training run with periodic evaluation and analysis exports.

    Writes metrics.csv, comm_log.csv, final_model.bin, and analysis/ under
    ``out_dir``; byte-identical across repeats with the same seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config_text is not None:
        (out_dir / "config.copy").write_text(config_text)

    model = MoELanguageModel(model_cfg, seed=cfg.seed)
    state = TrainState(model, plan, cfg)
    heldout = heldout_sets(corpus, n_sequences=cfg.heldout_sequences, seed=cfg.seed)
    domain_names = corpus.domain_names
    windows = cfg.steps // plan.ga_steps
    records = []

    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(metrics_header(domain_names))
        for w in range(windows):
            window_batches = [
                build_global_batch(corpus, plan.n_groups, plan.micro_batch_size,
                                   cfg.seed, step=w * plan.ga_steps + i)
                for i in range(plan.ga_steps)
            ]
            rec = train_step(state, window_batches, cfg)
            if (w + 1) % cfg.eval_every == 0 or w == windows - 1:
                rec.ppl = evaluate_ppl(
                    model, heldout,
                    state.biases if state.mode == "aux_free" else None)
            records.append(rec)
            writer.writerow(metrics_row(rec, domain_names))

    state.comm_log.to_csv(out_dir / "comm_log.csv")
    save_model(model, out_dir / "final_model.bin")

    from .analysis import export_analysis
    export_analysis(out_dir, model, heldout,
                    state.biases if state.mode == "aux_free" else None)
    return RunResult(run_dir=out_dir, records=records,
                     final_ppl=records[-1].ppl, model=model, state=state)
