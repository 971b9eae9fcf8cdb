"""Analytic FLOP/memory cost models and the wall-clock benchmark protocol.

FLOP convention: one multiply-add is 2 FLOPs, every elementwise activation
(exp, log1p, SiLU, rsqrt) is 1 FLOP per element, and a reduction over n
elements costs n adds. Counts are per forward pass, summed over layers.

Per token and per layer (d = d_inner, n = live states, r = read-out width,
k = conv width):

    RMSNorm         4*D + 3
    Gated MLP       2*D*(2*d + 2*n + r) + 2*d        (+ 4*d + 3 for the mamba2 gated norm)
    Conv. Transform 2*d*k + d
    State Space     gate n, discretization 2n (mamba2) or 2*d*n (mamba1),
                    input n + d*n, update 2*d*n, read-out 2*d*r
                    (+ 2*d*n*r when a runtime bridge is applied)
    Final Linear    2*D*d + D

Mamba-1 evaluates exp(delta*a) for every (channel, state) pair because its
transition is per channel; Mamba-2's per-head scalar transition is hoisted
out of the channel loop. That is the only variant difference in the model.

Memory is the activation footprint: bytes of tensors a component produces in
one forward, summed over layers. The State Space term includes
``state_block`` materialized (d_inner x n) states per sequence.
"""

from __future__ import annotations

import contextlib
import csv
import datetime as _dt
import io
import json
import math
import os
import platform
import statistics
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .core import (
    PHASE_CONV,
    PHASE_MLP,
    PHASE_NORM,
    PHASE_OUT,
    PHASE_SSM,
    DecodeCache,
    InputMode,
    Model,
    ModelConfig,
    Variant,
    model_forward,
)
from .errors import BenchmarkBusyError, ConfigError, ModeError

FLOP_CONVENTION = (
    "1 multiply-add = 2 FLOPs; activations = 1 FLOP/element; "
    "n-element reduction = n adds; per forward, summed over layers"
)
MEMORY_CONVENTION = "activation footprint: bytes produced per forward, summed over layers"
STATE_CHUNK = 256
REFERENCE_LIVE_STATES = {Variant.MAMBA1: 4, Variant.MAMBA2: 3}
MODES = ("prefill", "decode")


class Component(str, Enum):
    RMSNORM = PHASE_NORM
    GATED_MLP = PHASE_MLP
    CONV = PHASE_CONV
    STATE_SPACE = PHASE_SSM
    FINAL_LINEAR = PHASE_OUT

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    Component.RMSNORM: "RMSNorm",
    Component.GATED_MLP: "Gated MLP",
    Component.CONV: "Conv. Transform",
    Component.STATE_SPACE: "State Space",
    Component.FINAL_LINEAR: "Final Linear",
}


@dataclass(frozen=True)
class _LayerShape:
    n_state: int
    n_readout: int
    bridged: bool


def _arch(arch) -> tuple[ModelConfig, list[_LayerShape]]:
    if isinstance(arch, Model):
        shapes = [_LayerShape(l.n_state, l.n_readout, l.bridge is not None) for l in arch.layers]
        return arch.config, shapes
    if isinstance(arch, ModelConfig):
        n = arch.d_state
        return arch, [_LayerShape(n, n, False)] * arch.n_layers
    raise TypeError(f"expected ModelConfig or Model, got {type(arch).__name__}")


def _tokens(B: int, L: int, mode: str) -> int:
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}")
    if B < 0 or L < 0:
        raise ConfigError("B and L must be >= 0")
    # decode processes one token per step, so L decode steps cost L single-token passes
    return B * L


def state_space_flop_terms(config: ModelConfig, n_state: int, n_readout: int | None = None,
                           bridged: bool = False) -> dict[str, int]:
    """Per-token, per-layer State Space FLOPs split by stage."""
    d, n = config.d_inner, n_state
    r = n if n_readout is None else n_readout
    per_element = config.variant is Variant.MAMBA1
    terms = {
        "gate": n,
        "discretize": 2 * d * n if per_element else 2 * n,
        "input": n + d * n,
        "update": 2 * d * n,
        "readout": 2 * d * r,
    }
    if bridged:
        terms["bridge"] = 2 * d * n * r
    return terms


def _per_token_flops(config: ModelConfig, shape: _LayerShape, component: Component) -> int:
    D, d, k = config.d_model, config.d_inner, config.d_conv
    n, r = shape.n_state, shape.n_readout
    if component is Component.RMSNORM:
        return 4 * D + 3
    if component is Component.GATED_MLP:
        extra = 4 * d + 3 if config.variant is Variant.MAMBA2 else 0
        return 2 * D * (2 * d + 2 * n + r) + 2 * d + extra
    if component is Component.CONV:
        return 2 * d * k + d
    if component is Component.STATE_SPACE:
        return sum(state_space_flop_terms(config, n, r, shape.bridged).values())
    if component is Component.FINAL_LINEAR:
        return 2 * D * d + D
    raise ValueError(component)


def estimate_flops(arch, component: Component, B: int, L: int, mode: str = "prefill",
                   *, position: int = 0) -> int:
    """FLOPs of one component over a forward of B sequences of L tokens.

    ``arch`` is a ModelConfig (dense) or a Model (uses each layer's live state
    count). In decode mode L is the number of single-token steps; ``position``
    (tokens already in context) does not enter the count.
    """
    component = Component(component)
    config, shapes = _arch(arch)
    tokens = _tokens(B, L, mode)
    return tokens * sum(_per_token_flops(config, s, component) for s in shapes)


def _per_token_bytes(config, shape, component, L, mode, state_block) -> float:
    D, d, k = config.d_model, config.d_inner, config.d_conv
    n, r = shape.n_state, shape.n_readout
    if component is Component.RMSNORM:
        return 2 * D
    if component is Component.GATED_MLP:
        extra = d if config.variant is Variant.MAMBA2 else 0
        return (2 * d + 2 * n + r) + d + extra
    if component is Component.CONV:
        return 2 * d
    if component is Component.STATE_SPACE:
        return 3 * n + d
    if component is Component.FINAL_LINEAR:
        return 2 * D
    raise ValueError(component)


def _per_sequence_bytes(config, shape, component, L, mode, state_block) -> float:
    d, k, n = config.d_inner, config.d_conv, shape.n_state
    if component is Component.CONV:
        return (k - 1) * d
    if component is Component.STATE_SPACE:
        if state_block is None:
            state_block = 1 if mode == "decode" else min(L, STATE_CHUNK)
        read = d * shape.n_readout if shape.bridged else 0
        return state_block * d * n + read
    return 0


def estimate_memory(arch, component: Component, B: int, L: int, mode: str = "prefill",
                    bytes_per_element: int = 4, *, state_block: int | None = None) -> int:
    """Activation bytes of one component for a forward of B x L tokens.

    ``state_block`` is the number of (d_inner x n) states live at once per
    sequence; default min(L, STATE_CHUNK) in prefill and 1 in decode.
    """
    component = Component(component)
    if bytes_per_element not in (2, 4, 8):
        raise ConfigError("bytes_per_element must be 2, 4 or 8")
    config, shapes = _arch(arch)
    tokens = _tokens(B, L, mode)
    if tokens == 0:
        return 0
    total = 0
    for s in shapes:
        total += tokens * _per_token_bytes(config, s, component, L, mode, state_block)
        total += B * _per_sequence_bytes(config, s, component, L, mode, state_block)
    return int(total * bytes_per_element)


def parameter_bytes(arch, component: Component, bytes_per_element: int = 4) -> int:
    component = Component(component)
    config, shapes = _arch(arch)
    D, d, k = config.d_model, config.d_inner, config.d_conv
    total = 0
    for s in shapes:
        if component is Component.RMSNORM:
            total += D
        elif component is Component.GATED_MLP:
            total += D * (2 * d + 2 * s.n_state + s.n_readout)
            total += d if config.variant is Variant.MAMBA2 else 0
        elif component is Component.CONV:
            total += d * k + d
        elif component is Component.STATE_SPACE:
            total += s.n_state + (s.n_readout * s.n_state if s.bridged else 0)
        else:
            total += D * d
    return total * bytes_per_element


# ---------------------------------------------------------------------------
# wall-clock benchmark


@dataclass(frozen=True)
class BenchmarkProtocol:
    n_warmup: int = 10
    n_iters: int = 100
    seed: int = 0
    pin_cpu: bool = True

    def __post_init__(self):
        if self.n_warmup < 0 or self.n_iters < 1:
            raise ConfigError("protocol needs n_warmup >= 0 and n_iters >= 1")


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    n_warmup: int
    n_iters: int
    components: dict[Component, float] = field(default_factory=dict)
    samples_ms: list[float] = field(default_factory=list)

    @property
    def attributed_ms(self) -> float:
        return sum(self.components.values())

    @property
    def unattributed_ms(self) -> float:
        return self.mean_ms - self.attributed_ms

    def to_dict(self) -> dict:
        out = asdict(self)
        out["components"] = {c.value: v for c, v in self.components.items()}
        out["unattributed_ms"] = self.unattributed_ms
        return out


class PhaseTimer:
    """Accumulates monotonic time per block phase."""

    def __init__(self):
        self.totals = defaultdict(int)

    @contextlib.contextmanager
    def phase(self, name):
        start = time.perf_counter_ns()
        try:
            yield
        finally:
            self.totals[name] += time.perf_counter_ns() - start

    def reset(self):
        self.totals.clear()


_BENCH_LOCK = threading.Lock()


@contextlib.contextmanager
def _exclusive_benchmark(pin_cpu: bool):
    if not _BENCH_LOCK.acquire(blocking=False):
        raise BenchmarkBusyError("another benchmark is running in this process")
    saved = None
    try:
        if pin_cpu and hasattr(os, "sched_setaffinity"):
            saved = os.sched_getaffinity(0)
            os.sched_setaffinity(0, {min(saved)})
        yield
    finally:
        if saved is not None:
            os.sched_setaffinity(0, saved)
        _BENCH_LOCK.release()


def _barrier(out):
    # numpy calls complete before returning; touching the result keeps the
    # contract explicit if an asynchronous backend is ever swapped in
    np.asarray(out).ravel()[-1:].copy()


def benchmark_inputs(model: Model, B: int, L: int, seed: int = 0):
    """Seeded unit-Gaussian vectors (or uniform token ids) for a benchmark run."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    if cfg.input_mode is InputMode.TOKENS:
        return rng.integers(0, cfg.vocab_size, size=(B, L))
    return rng.standard_normal((B, L, cfg.d_model)).astype(model.dtype)


def benchmark(model: Model, B: int, L: int, mode: str = "prefill",
              protocol: BenchmarkProtocol | None = None, *, backend: str = "auto",
              inputs=None) -> LatencyStats:
    """Time full forwards: n_warmup unmeasured, then n_iters measured.

    Prefill times a forward over L tokens. Decode times one token step after
    a (untimed) prefill of L tokens. Per-component times come from phase
    timers inside every block.
    """
    protocol = protocol or BenchmarkProtocol()
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}")
    x = benchmark_inputs(model, B, L, protocol.seed) if inputs is None else inputs
    cache = None
    if mode == "decode":
        _, cache = model_forward(x, model, "prefill", backend=backend)
        x = x[:, -1:]

    def run(timer):
        out, _ = model_forward(x, model, mode, cache, timer=timer, backend=backend)
        _barrier(out)

    timer = PhaseTimer()
    samples, per_phase = [], defaultdict(float)
    with _exclusive_benchmark(protocol.pin_cpu):
        for _ in range(protocol.n_warmup):
            run(None)
        for _ in range(protocol.n_iters):
            timer.reset()
            start = time.perf_counter_ns()
            run(timer)
            samples.append((time.perf_counter_ns() - start) / 1e6)
            for name, ns in timer.totals.items():
                per_phase[name] += ns / 1e6
    n = protocol.n_iters
    return LatencyStats(
        mean_ms=statistics.fmean(samples),
        std_ms=statistics.pstdev(samples) if n > 1 else 0.0,
        min_ms=min(samples),
        max_ms=max(samples),
        n_warmup=protocol.n_warmup,
        n_iters=n,
        components={Component(k): v / n for k, v in per_phase.items()},
        samples_ms=samples,
    )


# ---------------------------------------------------------------------------
# report


def hardware_string() -> str:
    cpu = platform.processor() or ""
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{cpu or platform.machine()}; {os.cpu_count()} cpu; {platform.platform()}"


@dataclass
class ProfileRow:
    seqlen: int
    mode: str
    component: Component
    flops: int
    activation_bytes: int
    parameter_bytes: int
    latency_ms: float | None = None
    bandwidth_gbps: float | None = None  # schema slot only; never measured here

    def to_dict(self) -> dict:
        out = asdict(self)
        out["component"] = self.component.value
        return out


@dataclass
class ProfileReport:
    rows: list[ProfileRow]
    metadata: dict

    def select(self, *, seqlen=None, mode=None, component=None) -> list[ProfileRow]:
        return [
            r for r in self.rows
            if (seqlen is None or r.seqlen == seqlen)
            and (mode is None or r.mode == mode)
            and (component is None or r.component is Component(component))
        ]

    def total(self, seqlen: int, mode: str, column: str = "flops"):
        return sum(getattr(r, column) or 0 for r in self.select(seqlen=seqlen, mode=mode))

    def bottleneck(self, seqlen: int, mode: str, column: str = "flops") -> Component:
        rows = self.select(seqlen=seqlen, mode=mode)
        return max(rows, key=lambda r: (getattr(r, column) or 0)).component

    def bottlenecks(self, column: str = "flops") -> dict[tuple[int, str], Component]:
        keys = sorted({(r.seqlen, r.mode) for r in self.rows})
        return {key: self.bottleneck(*key, column=column) for key in keys}

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "rows": [r.to_dict() for r in self.rows],
            "bottleneck_flops": {
                f"{s}/{m}": c.value for (s, m), c in self.bottlenecks("flops").items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProfileReport":
        rows = []
        for r in data["rows"]:
            r = dict(r)
            r["component"] = Component(r["component"])
            rows.append(ProfileRow(**r))
        return cls(rows, data["metadata"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(ProfileRow.__dataclass_fields__)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for r in self.rows:
            d = r.to_dict()
            writer.writerow(["" if d[k] is None else d[k] for k in names])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"# {self.metadata.get('variant', '')} D={self.metadata.get('d_model')} "
            f"N={self.metadata.get('d_state')} layers={self.metadata.get('n_layers')} "
            f"B={self.metadata.get('batch')}",
            f"# FLOPs: {FLOP_CONVENTION}",
            f"# Memory: {MEMORY_CONVENTION}",
            f"{'Seq':>6} {'Mode':<8} {'Component':<16} {'FLOPs (G)':>12} "
            f"{'Memory (GB)':>12} {'Latency (ms)':>13}",
        ]
        for r in self.rows:
            lat = "-" if r.latency_ms is None else f"{r.latency_ms:.3f}"
            lines.append(
                f"{r.seqlen:>6} {r.mode:<8} {r.component.label:<16} {r.flops / 1e9:>12.4f} "
                f"{r.activation_bytes / 1e9:>12.4f} {lat:>13}"
            )
        for (s, m), c in self.bottlenecks().items():
            lines.append(f"# bottleneck (FLOPs) L={s} {m}: {c.label}")
        return "\n".join(lines) + "\n"

    def render(self, fmt: str) -> str:
        if fmt == "csv":
            return self.to_csv()
        if fmt == "text":
            return self.to_text()
        if fmt == "structured":
            return json.dumps(self.to_dict(), indent=2) + "\n"
        raise ValueError(f"unknown format {fmt!r}")


def profile_report(model: Model, seqlens, B: int = 1, modes=MODES, *,
                   components=None, protocol: BenchmarkProtocol | None = None,
                   measure: bool = True, bytes_per_element: int | None = None,
                   backend: str = "auto", seed: int = 0) -> ProfileReport:
    """One row per (seqlen, mode, component) with cost-model and measured columns."""
    seqlens = list(seqlens)
    if not seqlens:
        raise ConfigError("profile_report needs at least one sequence length")
    comps = list(Component) if components is None else [Component(c) for c in components]
    bpe = bytes_per_element or model.dtype.itemsize
    cfg = model.config
    rows = []
    for L in seqlens:
        for mode in modes:
            stats = benchmark(model, B, L, mode, protocol, backend=backend) if measure else None
            # decode rows describe a single generated token
            steps = 1 if mode == "decode" else L
            for c in comps:
                rows.append(ProfileRow(
                    seqlen=L, mode=mode, component=c,
                    flops=estimate_flops(model, c, B, steps, mode),
                    activation_bytes=estimate_memory(model, c, B, steps, mode, bpe),
                    parameter_bytes=parameter_bytes(model, c, bpe),
                    latency_ms=None if stats is None else stats.components.get(c, 0.0),
                ))
    meta = {
        **cfg.to_dict(),
        "batch": B,
        "dtype": str(model.dtype),
        "hardware": hardware_string(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "seed": seed if protocol is None else protocol.seed,
        "flop_convention": FLOP_CONVENTION,
        "memory_convention": MEMORY_CONVENTION,
        "protocol": None if (protocol is None or not measure) else asdict(protocol),
        "measured": measure,
        "model_metadata": model.metadata,
    }
    return ProfileReport(rows, meta)


def flop_share(arch, component: Component, B: int, L: int, mode: str = "prefill") -> float:
    total = sum(estimate_flops(arch, c, B, L, mode) for c in Component)
    return estimate_flops(arch, component, B, L, mode) / total if total else math.nan
