"""Activity-based state selection and the parameter surgery for pruned variants.

Sparse keeps every tensor shape and zeroes pruned states in place. Optimized
physically removes them; the selection-transpose bridge that would scatter the
kept states back to N positions is folded into the read-out rows of C, so no
bridge multiply remains at runtime (``fold_bridge=False`` keeps it explicit).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .activity import ActivityScores, head_means
from .core import LayerParams, Model, Variant
from .errors import FormatError, PlanError

PLAN_FORMAT = "ssmprune-plan"
PLAN_VERSION = 1


class PrunedVariant(str, Enum):
    DENSE = "dense"
    SPARSE = "sparse"
    OPTIMIZED = "optimized"


def _exact_ratio(r) -> Fraction:
    # decimal reading of r: floor(10 * (1 - 0.9)) must be 1, not 0
    if isinstance(r, Fraction):
        return r
    if isinstance(r, bool) or not isinstance(r, (int, float, str, np.floating, np.integer)):
        raise PlanError(f"ratio must be a number, got {r!r}")
    if isinstance(r, (float, np.floating)) and not math.isfinite(r):
        raise PlanError(f"ratio must be finite, got {r!r}")
    return Fraction(str(float(r)) if not isinstance(r, str) else r)


def kept_count(n_state: int, r) -> int:
    """k = floor(N * (1 - r)), evaluated on the decimal value of r."""
    fr = _exact_ratio(r)
    if not 0 <= fr < 1:
        raise PlanError(f"pruning ratio must be in [0, 1), got {r}")
    return math.floor(n_state * (1 - fr))


def select_states(scores, r) -> np.ndarray:
    """Indices of the k highest scores, sorted ascending; ties keep the lower index."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or not np.isfinite(scores).all():
        raise PlanError("scores must be a finite vector")
    k = kept_count(scores.shape[0], r)
    if k < 1:
        raise PlanError(f"ratio too aggressive for N={scores.shape[0]}: r={r} keeps no state")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return np.sort(order[:k])


def make_bridge(keep, n_state: int, dtype=np.float64) -> np.ndarray:
    """(N x k) scatter matrix: bridge[keep[j], j] = 1."""
    keep = np.asarray(keep, dtype=np.int64)
    if len(np.unique(keep)) != len(keep):
        raise PlanError("duplicate state indices in keep set")
    if keep.size and (keep.min() < 0 or keep.max() >= n_state):
        raise PlanError(f"keep index out of range for N={n_state}")
    bridge = np.zeros((n_state, keep.size), dtype=dtype)
    bridge[keep, np.arange(keep.size)] = 1.0
    return bridge


@dataclass
class LayerPlan:
    n_state: int
    keep: tuple[int, ...]
    ratio: float | None = None

    @property
    def pruned(self) -> tuple[int, ...]:
        kept = set(self.keep)
        return tuple(s for s in range(self.n_state) if s not in kept)


@dataclass
class PruningPlan:
    ratio: float
    layers: list[LayerPlan]
    head_mode: str = "per-state"
    provenance: dict = field(default_factory=dict)

    def keep(self, layer: int) -> np.ndarray:
        return np.array(self.layers[layer].keep, dtype=np.int64)

    def bridge(self, layer: int, dtype=np.float64) -> np.ndarray:
        lp = self.layers[layer]
        return make_bridge(lp.keep, lp.n_state, dtype)

    @property
    def is_identity(self) -> bool:
        return all(len(lp.keep) == lp.n_state for lp in self.layers)

    def to_dict(self) -> dict:
        return {
            "format": PLAN_FORMAT,
            "version": PLAN_VERSION,
            "ratio": self.ratio,
            "head_mode": self.head_mode,
            "bridge": "selection-transpose",
            "provenance": self.provenance,
            "layers": [
                {"layer": i, "n_state": lp.n_state, "keep": list(lp.keep),
                 **({} if lp.ratio is None else {"ratio": lp.ratio})}
                for i, lp in enumerate(self.layers)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PruningPlan":
        if data.get("format") != PLAN_FORMAT:
            raise FormatError("not a pruning plan file")
        if data.get("version") != PLAN_VERSION:
            raise FormatError(f"unsupported plan version {data.get('version')}")
        layers = []
        for i, item in enumerate(data["layers"]):
            if item["layer"] != i:
                raise FormatError("plan layers must be listed in order from 0")
            keep = tuple(int(s) for s in item["keep"])
            if list(keep) != sorted(set(keep)):
                raise FormatError(f"layer {i}: keep list must be sorted and unique")
            make_bridge(keep, int(item["n_state"]))
            layers.append(LayerPlan(int(item["n_state"]), keep, item.get("ratio")))
        return cls(float(data["ratio"]), layers, data.get("head_mode", "per-state"),
                   dict(data.get("provenance", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PruningPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        return isinstance(other, PruningPlan) and self.to_dict() == other.to_dict()


def select_heads(head_scores, r, head_size: int) -> np.ndarray:
    """Keep whole head groups: prune floor(H * r) lowest-scoring heads."""
    head_scores = np.asarray(head_scores, dtype=float)
    n_heads = head_scores.shape[0]
    fr = _exact_ratio(r)
    if not 0 <= fr < 1:
        raise PlanError(f"pruning ratio must be in [0, 1), got {r}")
    n_prune = math.floor(n_heads * fr)
    if n_prune >= n_heads:
        raise PlanError(f"ratio too aggressive for {n_heads} heads")
    order = np.lexsort((np.arange(n_heads), -head_scores))
    kept_heads = np.sort(order[: n_heads - n_prune])
    return np.concatenate([np.arange(h * head_size, (h + 1) * head_size) for h in kept_heads])


def plan_from_activity(scores: ActivityScores | dict, r, head_mode: str = "per-state", *,
                       n_heads: int | None = None, variant: Variant | str | None = None,
                       layer_ratios: dict | None = None) -> PruningPlan:
    """Build a plan with one global ratio (or per-layer overrides) from activity scores."""
    table = scores.scores if isinstance(scores, ActivityScores) else scores
    n_layers = max(table) + 1 if table else 0
    missing = [l for l in range(n_layers) if l not in table]
    if missing:
        raise PlanError(f"missing activity scores for layers {missing}")
    if head_mode not in ("per-state", "per-head"):
        raise PlanError(f"unknown head mode {head_mode!r}")
    if head_mode == "per-head":
        if variant is not None and Variant(variant) is Variant.MAMBA1:
            raise PlanError("per-head pruning needs the mamba2 head grouping")
        if not n_heads:
            raise PlanError("per-head pruning needs n_heads")
    layers = []
    for l in range(n_layers):
        s = np.asarray(table[l], dtype=float)
        lr = (layer_ratios or {}).get(l)
        ratio = r if lr is None else lr
        if head_mode == "per-state":
            keep = select_states(s, ratio)
        else:
            keep = select_heads(head_means(s, n_heads), ratio, s.shape[0] // n_heads)
        layers.append(LayerPlan(s.shape[0], tuple(int(i) for i in keep), lr))
    provenance = {}
    if isinstance(scores, ActivityScores):
        provenance = {"activity_digest": scores.digest(), **{
            k: v for k, v in scores.metadata.items() if isinstance(v, (str, int, float))
        }}
    return PruningPlan(float(r), layers, head_mode, provenance)


# ---------------------------------------------------------------------------
# surgery


def _row_blocks(layer: LayerParams, d_inner: int):
    n = layer.n_state
    b0 = 2 * d_inner
    return b0, b0 + n, b0 + 2 * n  # starts of B, C, delta rows


def _check_plan(model: Model, plan: PruningPlan):
    if len(plan.layers) != len(model.layers):
        raise PlanError(f"plan has {len(plan.layers)} layers, model has {len(model.layers)}")
    for i, (layer, lp) in enumerate(zip(model.layers, plan.layers)):
        if layer.bridge is not None or layer.state_mask is not None:
            raise PlanError(f"layer {i} is already pruned")
        if layer.n_state != lp.n_state:
            raise PlanError(f"layer {i}: plan N={lp.n_state}, model N={layer.n_state}")
        if not lp.keep:
            raise PlanError(f"layer {i}: empty keep set")


def _pruning_metadata(model, plan, variant, **extra):
    meta = dict(model.metadata)
    meta["pruning"] = {
        "variant": variant.value,
        "ratio": plan.ratio,
        "head_mode": plan.head_mode,
        "keep": [list(lp.keep) for lp in plan.layers],
        "provenance": plan.provenance,
        **extra,
    }
    return meta


def apply_sparse(model: Model, plan: PruningPlan) -> Model:
    """Zero the B, C and delta rows of pruned states and freeze them at zero."""
    _check_plan(model, plan)
    if plan.is_identity:
        return replace(model, metadata=_pruning_metadata(model, plan, PrunedVariant.SPARSE))
    d = model.config.d_inner
    layers = []
    for layer, lp in zip(model.layers, plan.layers):
        pruned = np.array(lp.pruned, dtype=np.int64)
        if pruned.size == 0:
            layers.append(layer)
            continue
        b0, c0, t0 = _row_blocks(layer, d)
        w_in = np.array(layer.w_in)
        for start in (b0, c0, t0):
            w_in[start + pruned] = 0.0
        mask = np.ones(layer.n_state, dtype=bool)
        mask[pruned] = False
        layers.append(replace(layer, w_in=w_in, state_mask=mask))
    return replace(model, layers=tuple(layers),
                   metadata=_pruning_metadata(model, plan, PrunedVariant.SPARSE))


def apply_optimized(model: Model, plan: PruningPlan, *, fold_bridge: bool = True) -> Model:
    """Remove pruned states from w_in and a_diag; N becomes k per layer."""
    _check_plan(model, plan)
    meta = _pruning_metadata(model, plan, PrunedVariant.OPTIMIZED,
                             bridge="folded" if fold_bridge else "explicit")
    if plan.is_identity and fold_bridge:
        return replace(model, metadata=meta)
    d = model.config.d_inner
    layers = []
    for i, (layer, lp) in enumerate(zip(model.layers, plan.layers)):
        keep = plan.keep(i)
        b0, c0, t0 = _row_blocks(layer, d)
        w = layer.w_in
        c_rows = w[c0 + keep] if fold_bridge else w[c0:c0 + layer.n_state]
        w_in = np.concatenate([w[:b0], w[b0 + keep], c_rows, w[t0 + keep]], axis=0)
        layers.append(replace(
            layer,
            w_in=w_in,
            a_diag=layer.a_diag[keep],
            bridge=None if fold_bridge else plan.bridge(i, layer.dtype),
        ))
    return replace(model, layers=tuple(layers), metadata=meta)


def apply_variant(model: Model, plan: PruningPlan, variant: PrunedVariant | str) -> Model:
    variant = PrunedVariant(variant)
    if variant is PrunedVariant.DENSE:
        return model
    if variant is PrunedVariant.SPARSE:
        return apply_sparse(model, plan)
    return apply_optimized(model, plan)
