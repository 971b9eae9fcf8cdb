"""Per-layer delta activity: streaming accumulation, scores, heatmap export.

Sums are accumulated exactly (as integers in units of 2**-1126, which covers
every finite float64 including subnormals), so a record's scores do not depend
on how the delta stream was batched or ordered, and a constant stream returns
its constant exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import Model, model_forward
from .errors import ActivityError, ShapeError

_UNIT_SHIFT = 1126  # 1074 (smallest subnormal) + 52 (mantissa bits below the leading one)
_KEY_STRIDE = 4096


def exact_column_sums(x) -> list[int]:
    """Exact column sums of a 2-D float array, in units of 2**-1126."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("expected a 2-D array")
    n = x.shape[1]
    totals = [0] * n
    if x.size == 0:
        return totals
    if not np.isfinite(x).all():
        raise ActivityError("non-finite delta value")
    mant, expo = np.frexp(x)
    ints = (mant * 2.0**53).astype(np.int64)
    shift = expo.astype(np.int64) + (_UNIT_SHIFT - 53)
    cols = np.broadcast_to(np.arange(n, dtype=np.int64), x.shape)
    keys = (cols * _KEY_STRIDE + shift).ravel()
    ints = ints.ravel()
    order = np.argsort(keys, kind="stable")
    keys, ints = keys[order], ints[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    hi = np.add.reduceat(ints >> 26, starts)
    lo = np.add.reduceat(ints & ((1 << 26) - 1), starts)
    for key, h, l in zip(keys[starts].tolist(), hi.tolist(), lo.tolist()):
        col, sh = divmod(key, _KEY_STRIDE)
        totals[col] += ((h << 26) + l) << sh
    return totals


def _to_float(total: int, count: int = 1) -> float:
    return total / (count << _UNIT_SHIFT)


@dataclass
class _Reservoir:
    capacity: int
    rng: np.random.Generator
    rows: list = field(default_factory=list)
    seen: int = 0

    def add(self, delta: np.ndarray):
        m = delta.shape[0]
        take = min(m, max(0, self.capacity - len(self.rows)))
        self.rows.extend(delta[:take].copy())
        if take < m:
            idx = np.arange(self.seen + take, self.seen + m)
            picks = self.rng.integers(0, idx + 1)
            for row, j in zip(delta[take:], picks):
                if j < self.capacity:
                    self.rows[j] = row.copy()
        self.seen += m

    def matrix(self) -> np.ndarray:
        return np.array(self.rows)


class ActivityRecord:
    """Running sum/count of delta per (mode, layer), mergeable across workers.

    ``reservoir`` > 0 keeps up to that many raw delta rows per (mode, layer)
    by uniform reservoir sampling (all rows while fewer have been seen).
    """

    def __init__(self, reservoir: int = 0, seed: int = 0, metadata: dict | None = None):
        self.reservoir = reservoir
        self.seed = seed
        self.metadata = dict(metadata or {})
        self._sums: dict[tuple[str, int], list[int]] = {}
        self._counts: dict[tuple[str, int], int] = {}
        self._res: dict[tuple[str, int], _Reservoir] = {}

    # -- accumulation
    def record_delta(self, layer: int, delta, mode: str = "prefill") -> "ActivityRecord":
        delta = np.asarray(delta, dtype=np.float64)
        if delta.ndim != 2:
            raise ShapeError("delta must be a (B*L, N) matrix")
        key = (mode, int(layer))
        n = self.n_state(layer)
        if n is not None and n != delta.shape[1]:
            raise ShapeError(f"layer {layer} has N={n}, got delta with N={delta.shape[1]}")
        if delta.shape[0] == 0:
            return self
        sums = exact_column_sums(delta)
        acc = self._sums.setdefault(key, [0] * delta.shape[1])
        for i, s in enumerate(sums):
            acc[i] += s
        self._counts[key] = self._counts.get(key, 0) + delta.shape[0]
        if self.reservoir:
            if key not in self._res:
                seed = [self.seed, int(layer), 0 if mode == "prefill" else 1]
                self._res[key] = _Reservoir(self.reservoir, np.random.default_rng(seed))
            self._res[key].add(delta)
        return self

    def observer(self):
        """Callback for ``model_forward(observer=...)``."""
        return lambda layer, delta, mode: self.record_delta(layer, delta, mode)

    def merge(self, other: "ActivityRecord") -> "ActivityRecord":
        out = ActivityRecord(self.reservoir, self.seed, {**other.metadata, **self.metadata})
        for rec in (self, other):
            for key, sums in rec._sums.items():
                if key in out._sums and len(out._sums[key]) != len(sums):
                    raise ShapeError(f"layer {key[1]} state count differs between records")
                acc = out._sums.setdefault(key, [0] * len(sums))
                for i, s in enumerate(sums):
                    acc[i] += s
                out._counts[key] = out._counts.get(key, 0) + rec._counts[key]
        return out

    # -- queries
    @property
    def layers(self) -> list[int]:
        return sorted({layer for _, layer in self._sums})

    def modes(self) -> list[str]:
        return sorted({mode for mode, _ in self._sums})

    def n_state(self, layer: int) -> int | None:
        for (_, l), sums in self._sums.items():
            if l == layer:
                return len(sums)
        return None

    def _keys(self, layer, mode):
        return [k for k in self._sums if k[1] == layer and (mode is None or k[0] == mode)]

    def exact_sum(self, layer: int, mode: str | None = None) -> list[int]:
        keys = self._keys(layer, mode)
        if not keys:
            return []
        total = [0] * len(self._sums[keys[0]])
        for k in keys:
            for i, s in enumerate(self._sums[k]):
                total[i] += s
        return total

    def sum(self, layer: int, mode: str | None = None) -> np.ndarray:
        return np.array([_to_float(s) for s in self.exact_sum(layer, mode)])

    def count(self, layer: int, mode: str | None = None) -> int:
        return sum(self._counts[k] for k in self._keys(layer, mode))

    def mean(self, layer: int, mode: str | None = None) -> np.ndarray:
        count = self.count(layer, mode)
        if count == 0:
            raise ActivityError(f"no activity recorded for layer {layer}")
        return np.array([_to_float(s, count) for s in self.exact_sum(layer, mode)])

    def raw(self, layer: int, mode: str = "prefill") -> np.ndarray:
        res = self._res.get((mode, layer))
        if res is None:
            raise ActivityError(f"no reservoir rows for layer {layer} ({mode})")
        return res.matrix()

    def total_samples(self) -> int:
        return sum(self._counts.values())


def record_delta(record: ActivityRecord, layer: int, delta, mode: str = "prefill") -> ActivityRecord:
    return record.record_delta(layer, delta, mode)


@dataclass
class ActivityScores:
    scores: dict[int, np.ndarray]
    n_samples: dict[int, int]
    head_scores: dict[int, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def layers(self) -> list[int]:
        return sorted(self.scores)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "layers": [
                {
                    "layer": l,
                    "n_samples": self.n_samples[l],
                    "scores": [float(v) for v in self.scores[l]],
                    "head_scores": None if self.head_scores is None
                    else [float(v) for v in self.head_scores[l]],
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ActivityScores":
        scores, n_samples, heads = {}, {}, {}
        for item in data["layers"]:
            l = int(item["layer"])
            scores[l] = np.array(item["scores"], dtype=float)
            n_samples[l] = int(item["n_samples"])
            if item.get("head_scores") is not None:
                heads[l] = np.array(item["head_scores"], dtype=float)
        return cls(scores, n_samples, heads or None, dict(data.get("metadata", {})))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ActivityScores":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        payload = json.dumps(
            [[l, [float(v).hex() for v in self.scores[l]]] for l in self.layers]
        ).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def head_means(scores, n_heads: int) -> np.ndarray:
    scores = np.asarray(scores)
    if scores.shape[0] % n_heads:
        raise ShapeError(f"{scores.shape[0]} states do not split into {n_heads} heads")
    return scores.reshape(n_heads, -1).mean(axis=1)


def activity_scores(record: ActivityRecord, n_heads: int | None = None,
                    mode: str | None = None) -> ActivityScores:
    """Mean delta per state; with ``n_heads``, also the mean per contiguous head group."""
    layers = record.layers
    if not layers or record.total_samples() == 0:
        raise ActivityError("no activity recorded")
    scores = {l: record.mean(l, mode) for l in layers}
    heads = None
    if n_heads is not None:
        heads = {l: head_means(s, n_heads) for l, s in scores.items()}
    meta = dict(record.metadata)
    meta["mode"] = mode or "all"
    return ActivityScores(scores, {l: record.count(l, mode) for l in layers}, heads, meta)


def synthetic_sequences(d_model: int, n_sequences: int, seqlen: int, seed: int = 0,
                        dtype=np.float64) -> np.ndarray:
    """Seeded unit-Gaussian evaluation/profiling sequences, shape (n, L, D)."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_sequences, seqlen, d_model)).astype(dtype)


def collect_activity(model: Model, sequences, *, batch_size: int = 4,
                     record: ActivityRecord | None = None, backend: str = "auto",
                     metadata: dict | None = None) -> ActivityRecord:
    """Run prefill over ``sequences`` (n, L, D) and accumulate every layer's delta."""
    record = record or ActivityRecord()
    record.metadata.update(metadata or {})
    for start in range(0, len(sequences), batch_size):
        model_forward(sequences[start:start + batch_size], model, "prefill",
                      observer=record.observer(), backend=backend)
    record.metadata["n_samples"] = record.total_samples()
    return record


# ---------------------------------------------------------------------------
# heatmap


def heatmap_matrix(scores: ActivityScores | dict, n_layers: int | None = None) -> np.ndarray:
    """Rows are layers 0..n_layers-1, columns are states; raw mean delta."""
    table = scores.scores if isinstance(scores, ActivityScores) else scores
    n_layers = (max(table) + 1 if table else 0) if n_layers is None else n_layers
    missing = [l for l in range(n_layers) if l not in table]
    if missing:
        raise ActivityError(f"missing activity for layers {missing}")
    widths = {len(table[l]) for l in range(n_layers)}
    if len(widths) > 1:
        raise ShapeError("layers have different state counts")
    return np.array([np.asarray(table[l], dtype=float) for l in range(n_layers)])


def normalize_rows(matrix) -> np.ndarray:
    """Per-row min-max to [0, 1]; a constant row maps to zeros."""
    m = np.asarray(matrix, dtype=float)
    lo = m.min(axis=1, keepdims=True)
    span = m.max(axis=1, keepdims=True) - lo
    out = np.zeros_like(m)
    np.divide(m - lo, span, out=out, where=span > 0)
    return out


def write_matrix_csv(path, matrix, header_prefix: str = "state") -> None:
    m = np.asarray(matrix, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer"] + [f"{header_prefix}{j}" for j in range(m.shape[1])])
        for i, row in enumerate(m):
            writer.writerow([i] + [repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]], dtype=float)


_STOPS = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=float)


def colorize(normalized) -> np.ndarray:
    """Map values in [0, 1] to RGB bytes (dark = low activity, bright = high)."""
    v = np.clip(np.asarray(normalized, dtype=float), 0.0, 1.0) * (len(_STOPS) - 1)
    i = np.minimum(v.astype(int), len(_STOPS) - 2)
    frac = (v - i)[..., None]
    rgb = _STOPS[i] * (1 - frac) + _STOPS[i + 1] * frac
    return np.rint(rgb).astype(np.uint8)


def write_ppm(path, normalized, cell: int = 8) -> None:
    """Binary PPM (P6) of the normalized heatmap, ``cell`` pixels per entry."""
    rgb = colorize(normalized)
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def export_heatmap(scores, out_dir, n_layers: int | None = None, render: bool = True) -> dict:
    """Write heatmap.csv (raw), heatmap_normalized.csv and optionally heatmap.ppm."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = heatmap_matrix(scores, n_layers)
    norm = normalize_rows(raw)
    paths = {"raw": out_dir / "heatmap.csv", "normalized": out_dir / "heatmap_normalized.csv"}
    write_matrix_csv(paths["raw"], raw)
    write_matrix_csv(paths["normalized"], norm)
    if render:
        paths["image"] = out_dir / "heatmap.ppm"
        write_ppm(paths["image"], norm)
    return paths
