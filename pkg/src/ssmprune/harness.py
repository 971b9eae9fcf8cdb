"""Pruning sweeps, fidelity proxy, zone classification and sweep tables."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import tracemalloc
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .activity import ActivityScores, activity_scores, collect_activity, synthetic_sequences
from .core import InputMode, Model, lm_logits, model_forward
from .errors import ConfigError, ShapeError, SSMError
from .profiler import BenchmarkProtocol, Component, benchmark, benchmark_inputs, estimate_memory
from .pruning import PrunedVariant, apply_variant, plan_from_activity

log = logging.getLogger(__name__)

DEFAULT_SEQLENS = (64, 512, 2048, 4096, 8192, 16384)
DEFAULT_RATIOS = (0.1, 0.3, 0.5, 0.7, 0.9)


class PruningZone(str, Enum):
    SAFE = "safe"
    MODERATE = "moderate"
    HIGH = "high"


def _dec(x) -> Fraction:
    return Fraction(str(float(x)))


def classify_zone(r) -> PruningZone:
    """Safe for r <= 0.3, Moderate for 0.3 < r <= 0.7, High above."""
    fr = _dec(r)
    if not 0 <= fr < 1:
        raise ConfigError(f"pruning ratio must be in [0, 1), got {r}")
    if fr <= Fraction(3, 10):
        return PruningZone.SAFE
    if fr <= Fraction(7, 10):
        return PruningZone.MODERATE
    return PruningZone.HIGH


def marginal_drop(curve: dict, delta: float) -> dict[float, float]:
    """(Acc(r + delta) - Acc(r)) / delta on a uniform grid; the last point is omitted.

    Ratios, accuracies and delta are read as the decimals they print as, so
    0.59 - 0.60 over 0.1 is exactly -0.1.
    """
    step = _dec(delta)
    if step <= 0:
        raise ConfigError("delta must be > 0")
    points = sorted((_dec(r), r) for r in curve)
    for (a, _), (b, _) in zip(points, points[1:]):
        if b - a != step:
            raise ConfigError(f"curve is not on a uniform grid with spacing {delta}")
    out = {}
    for (a, ra), (_, rb) in zip(points, points[1:]):
        out[ra] = float((_dec(curve[rb]) - _dec(curve[ra])) / step)
    return out


# ---------------------------------------------------------------------------
# fidelity


@dataclass
class ChoiceItem:
    """A multiple-choice item: one input per choice and the index of the right one."""

    choices: list
    label: int


def mean_token_logprob(model: Model, tokens) -> float:
    tokens = np.asarray(tokens)[None, :]
    hidden, _ = model_forward(tokens, model)
    logits = lm_logits(model, hidden)[0, :-1]
    logits = logits - logits.max(axis=-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    return float(np.mean(logp[np.arange(logits.shape[0]), tokens[0, 1:]]))


@dataclass
class FidelityMetrics:
    mean_divergence: float
    max_divergence: float
    per_sequence: list[float] = field(default_factory=list)
    accuracy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def relative_divergence(reference, other) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    diff = np.asarray(other, dtype=np.float64) - ref
    norm = np.linalg.norm(ref)
    if norm == 0:
        return 0.0 if not diff.any() else math.inf
    return float(np.linalg.norm(diff) / norm)


def task_accuracy(model: Model, items: Sequence[ChoiceItem], score_fn: Callable | None = None) -> float:
    if score_fn is None:
        if model.config.input_mode is not InputMode.TOKENS:
            raise ConfigError("raw-vector tasks need a score_fn")
        score_fn = mean_token_logprob
    hits = 0
    for item in items:
        scores = [score_fn(model, c) for c in item.choices]
        hits += int(np.argmax(scores)) == item.label
    return hits / len(items) if items else math.nan


def fidelity(dense: Model, pruned: Model, eval_set, *, task: Sequence[ChoiceItem] | None = None,
             score_fn: Callable | None = None, backend: str = "auto") -> FidelityMetrics:
    """Relative L2 divergence of final-layer outputs, pruned vs dense, per sequence."""
    a, b = dense.config, pruned.config
    if (a.d_model, a.input_mode, a.n_layers) != (b.d_model, b.input_mode, b.n_layers):
        raise ShapeError("dense and pruned models do not share input/output shapes")
    divs = []
    for seq in eval_set:
        seq = np.asarray(seq)[None]
        yd, _ = model_forward(seq, dense, backend=backend)
        yp, _ = model_forward(seq, pruned, backend=backend)
        if yd.shape != yp.shape:
            raise ShapeError("pruned output shape differs from dense")
        divs.append(relative_divergence(yd, yp))
    acc = None if task is None else task_accuracy(pruned, task, score_fn)
    return FidelityMetrics(
        mean_divergence=float(np.mean(divs)) if divs else 0.0,
        max_divergence=float(np.max(divs)) if divs else 0.0,
        per_sequence=divs,
        accuracy=acc,
    )


# ---------------------------------------------------------------------------
# sweep


def measured_peak_bytes(model: Model, B: int, L: int, seed: int = 0, backend: str = "auto") -> int:
    """Peak traced allocation during one prefill forward (numpy buffers included)."""
    x = benchmark_inputs(model, B, L, seed)
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    model_forward(x, model, backend=backend)
    peak = tracemalloc.get_traced_memory()[1] - base
    if not was_tracing:
        tracemalloc.stop()
    return int(peak)


def model_memory(model: Model, B: int, L: int, bytes_per_element: int | None = None) -> int:
    bpe = bytes_per_element or model.dtype.itemsize
    return sum(estimate_memory(model, c, B, L, "prefill", bpe) for c in Component)


@dataclass
class SweepCell:
    seqlen: int
    ratio: float
    variant: str
    zone: str
    dense_latency_ms: float | None = None
    pruned_latency_ms: float | None = None
    speedup: float | None = None
    mem_dense: int | None = None
    mem_pruned: int | None = None
    mem_reduction_pct: float | None = None
    state_space_mem_reduction_pct: float | None = None
    mem_measured_dense: int | None = None
    mem_measured_pruned: int | None = None
    mem_measured_reduction_pct: float | None = None
    mean_divergence: float | None = None
    max_divergence: float | None = None
    accuracy: float | None = None
    kept_states: list[int] | None = None
    error: str | None = None


def _pct(dense, pruned):
    if dense is None or pruned is None or dense == 0:
        return None
    return 100.0 * (1.0 - pruned / dense)


@dataclass
class SweepResult:
    cells: list[SweepCell]
    metadata: dict = field(default_factory=dict)

    @property
    def seqlens(self) -> list[int]:
        return sorted({c.seqlen for c in self.cells})

    @property
    def ratios(self) -> list[float]:
        return sorted({c.ratio for c in self.cells})

    def cell(self, seqlen: int, ratio: float) -> SweepCell:
        for c in self.cells:
            if c.seqlen == seqlen and c.ratio == ratio:
                return c
        raise KeyError((seqlen, ratio))

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "cells": [asdict(c) for c in self.cells]}

    @classmethod
    def from_dict(cls, data: dict) -> "SweepResult":
        return cls([SweepCell(**c) for c in data["cells"]], dict(data.get("metadata", {})))

    def table2_rows(self) -> list[list[str]]:
        """Seqlen x metric rows, one column per ratio (speedup and memory reduction)."""
        rows = [["Seqlen", "Metric"] + [f"{r:g}" for r in self.ratios]]
        for L in self.seqlens:
            sp, mem = [str(L), "Speedup (x)"], [str(L), "Mem. Red. (%)"]
            for r in self.ratios:
                c = self.cell(L, r)
                blank = "err" if c.error else "-"
                sp.append(blank if c.speedup is None else f"{c.speedup:.2f}x")
                mem.append(blank if c.mem_reduction_pct is None else f"{c.mem_reduction_pct:.2f}%")
            rows += [sp, mem]
        return rows

    def to_text(self) -> str:
        rows = self.table2_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
        meta = self.metadata
        head = f"# variant={meta.get('variant')} B={meta.get('batch')} protocol={meta.get('protocol')}"
        return head + "\n" + "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(SweepCell.__dataclass_fields__)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for c in self.cells:
            d = asdict(c)
            d["kept_states"] = "" if c.kept_states is None else " ".join(map(str, c.kept_states))
            writer.writerow(["" if d[k] is None else d[k] for k in names])
        return buf.getvalue()

    def render(self, fmt: str) -> str:
        if fmt == "csv":
            return self.to_csv()
        if fmt == "text":
            return self.to_text()
        if fmt == "structured":
            return json.dumps(self.to_dict(), indent=2) + "\n"
        raise ValueError(f"unknown format {fmt!r}")

    def series(self) -> dict[str, list[list]]:
        """Plot-ready tables: latency vs ratio, latency reduction, fidelity/latency trade-off."""
        latency = [["seqlen", "ratio", "dense_ms", "pruned_ms", "speedup"]]
        reduction = [["seqlen", "ratio", "latency_reduction_ms", "latency_reduction_pct"]]
        for c in self.cells:
            latency.append([c.seqlen, c.ratio, c.dense_latency_ms, c.pruned_latency_ms, c.speedup])
            red = pct = None
            if c.dense_latency_ms is not None and c.pruned_latency_ms is not None:
                red = c.dense_latency_ms - c.pruned_latency_ms
                pct = 100.0 * red / c.dense_latency_ms
            reduction.append([c.seqlen, c.ratio, red, pct])
        tradeoff = [["ratio", "zone", "mean_latency_ms", "mean_divergence", "accuracy"]]
        for r in self.ratios:
            cells = [c for c in self.cells if c.ratio == r]
            lats = [c.pruned_latency_ms for c in cells if c.pruned_latency_ms is not None]
            tradeoff.append([
                r, cells[0].zone, float(np.mean(lats)) if lats else None,
                cells[0].mean_divergence, cells[0].accuracy,
            ])
        return {"latency_vs_ratio": latency, "latency_reduction": reduction, "tradeoff": tradeoff}


def default_eval_set(model: Model, n_sequences: int = 4, seqlen: int = 64, seed: int = 1):
    if model.config.input_mode is InputMode.TOKENS:
        rng = np.random.default_rng(seed)
        return rng.integers(0, model.config.vocab_size, size=(n_sequences, seqlen))
    return synthetic_sequences(model.config.d_model, n_sequences, seqlen, seed, model.dtype)


def run_sweep(model: Model, seqlens=DEFAULT_SEQLENS, ratios=DEFAULT_RATIOS,
              protocol: BenchmarkProtocol | None = None,
              variant: PrunedVariant | str = PrunedVariant.OPTIMIZED, *,
              scores: ActivityScores | None = None, batch: int = 1, eval_set=None,
              task=None, measure_memory: bool = True, benchmark_latency: bool = True,
              activity_seed: int = 0, head_mode: str = "per-state",
              backend: str = "auto") -> SweepResult:
    """Benchmark dense vs pruned for every (seqlen, ratio) cell.

    Without ``scores``, activity is collected first on seeded synthetic
    sequences and that provenance is recorded. Failures are kept per cell.
    """
    variant = PrunedVariant(variant)
    protocol = protocol or BenchmarkProtocol()
    cfg = model.config
    if scores is None:
        seqs = default_eval_set(model, 8, 64, activity_seed)
        record = collect_activity(model, seqs, backend=backend,
                                  metadata={"dataset": "synthetic-gaussian", "seed": activity_seed})
        n_heads = cfg.n_heads if cfg.variant.value == "mamba2" else None
        scores = activity_scores(record, n_heads=n_heads)
    eval_set = default_eval_set(model) if eval_set is None else eval_set

    pruned_models, errors, fid = {}, {}, {}
    for r in ratios:
        try:
            plan = plan_from_activity(scores, r, head_mode, n_heads=cfg.n_heads, variant=cfg.variant)
            pm = apply_variant(model, plan, variant)
            pruned_models[r] = (plan, pm)
            fid[r] = fidelity(model, pm, eval_set, task=task, backend=backend)
        except SSMError as exc:
            errors[r] = f"{exc.code}: {exc}"

    cells = []
    for L in seqlens:
        dense_stats = dense_err = None
        if benchmark_latency:
            try:
                dense_stats = benchmark(model, batch, L, "prefill", protocol, backend=backend)
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                dense_err = f"dense benchmark failed: {exc}"
        mem_dense = model_memory(model, batch, L)
        meas_dense = measured_peak_bytes(model, batch, L, protocol.seed, backend) if measure_memory else None
        for r in ratios:
            cell = SweepCell(seqlen=L, ratio=r, variant=variant.value, zone=classify_zone(r).value)
            cells.append(cell)
            if r in errors:
                cell.error = errors[r]
                continue
            plan, pm = pruned_models[r]
            cell.kept_states = [len(lp.keep) for lp in plan.layers]
            cell.mem_dense, cell.mem_pruned = mem_dense, model_memory(pm, batch, L)
            cell.mem_reduction_pct = _pct(cell.mem_dense, cell.mem_pruned)
            bpe = model.dtype.itemsize
            cell.state_space_mem_reduction_pct = _pct(
                estimate_memory(model, Component.STATE_SPACE, batch, L, "prefill", bpe),
                estimate_memory(pm, Component.STATE_SPACE, batch, L, "prefill", bpe),
            )
            f = fid[r]
            cell.mean_divergence, cell.max_divergence, cell.accuracy = (
                f.mean_divergence, f.max_divergence, f.accuracy)
            try:
                if measure_memory:
                    cell.mem_measured_dense = meas_dense
                    cell.mem_measured_pruned = measured_peak_bytes(pm, batch, L, protocol.seed, backend)
                    cell.mem_measured_reduction_pct = _pct(meas_dense, cell.mem_measured_pruned)
                if benchmark_latency:
                    if dense_err:
                        cell.error = dense_err
                        continue
                    stats = benchmark(pm, batch, L, "prefill", protocol, backend=backend)
                    cell.dense_latency_ms = dense_stats.mean_ms
                    cell.pruned_latency_ms = stats.mean_ms
                    cell.speedup = dense_stats.mean_ms / stats.mean_ms
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                log.warning("sweep cell L=%s r=%s failed: %s", L, r, exc)
                cell.error = str(exc)

    meta = {
        "variant": variant.value,
        "batch": batch,
        "protocol": asdict(protocol),
        "config": cfg.to_dict(),
        "dtype": str(model.dtype),
        "head_mode": head_mode,
        "activity": {"digest": scores.digest(), **scores.metadata},
        "eval_set": {"n_sequences": len(eval_set)},
    }
    return SweepResult(cells, meta)
