"""Selective state space block numerics (Mamba-1 / Mamba-2) in numpy.

Shapes used throughout, for one sequence:

    x        (L, D)          block input / residual stream
    w_in     (2*d_inner + 2*N + N_read, D), row blocks [z | u | B | C | delta]
    z, u     (L, d_inner)
    B, delta (L, N)          N = number of live states in this layer
    C        (L, N_read)     N_read = N unless a bridge maps N live states to N_read
    h        (d_inner, N)

The timescale ``delta`` is one value per state, shared by every inner channel,
and ``a_diag`` is one negative value per state. The input term uses the Euler
form ``delta * B``; ``discretize_zoh`` keeps the exact zero-order-hold form as
a reference.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    GuardError,
    ModeError,
    NonFiniteError,
    ShapeError,
    StabilityError,
)

SOFTPLUS_THRESHOLD = 40.0
DEFAULT_EPS = 1e-5
QUADRATIC_GUARD = 1024

# Phase labels reported to a timer; they match profiler.Component values.
PHASE_NORM = "rmsnorm"
PHASE_MLP = "gated_mlp"
PHASE_CONV = "conv_transform"
PHASE_SSM = "state_space"
PHASE_OUT = "final_linear"


class Variant(str, Enum):
    MAMBA1 = "mamba1"
    MAMBA2 = "mamba2"


class InputMode(str, Enum):
    RAW = "raw"
    TOKENS = "tokens"


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.MAMBA2
    d_model: int = 64
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    n_layers: int = 2
    n_heads: int = 1
    input_mode: InputMode = InputMode.RAW
    vocab_size: int = 0
    norm_eps: float = DEFAULT_EPS

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "input_mode", InputMode(self.input_mode))
        for name in ("d_model", "d_state", "d_conv", "expand", "n_heads"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.n_layers, (int, np.integer)) or self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers!r}")
        if self.variant is Variant.MAMBA1 and self.n_heads != 1:
            raise ConfigError("n_heads applies to mamba2 only; use n_heads=1 for mamba1")
        if self.d_state % self.n_heads:
            raise ConfigError(
                f"d_state={self.d_state} is not divisible by n_heads={self.n_heads}"
            )
        if self.input_mode is InputMode.TOKENS and self.vocab_size < 1:
            raise ConfigError("tokens input mode needs vocab_size >= 1")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps must be > 0")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def head_size(self) -> int:
        return self.d_state // self.n_heads

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["variant"] = self.variant.value
        out["input_mode"] = self.input_mode.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _frozen(a, dtype=None):
    if a is None:
        return None
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayerParams:
    """Weights of one block. Arrays are copied and made read-only."""

    w_norm: np.ndarray
    w_in: np.ndarray
    w_conv: np.ndarray
    b_conv: np.ndarray
    a_diag: np.ndarray
    w_out: np.ndarray
    w_post_norm: np.ndarray | None = None
    bridge: np.ndarray | None = None
    state_mask: np.ndarray | None = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            dtype = bool if f.name == "state_mask" else None
            object.__setattr__(self, f.name, _frozen(value, dtype))
        if np.any(self.a_diag >= 0):
            raise StabilityError("unstable state transition: a_diag must be < 0")
        if self.bridge is not None:
            if self.bridge.shape[1] != self.n_state:
                raise ShapeError(
                    f"bridge has {self.bridge.shape[1]} columns, layer has {self.n_state} states"
                )

    @property
    def n_state(self) -> int:
        return int(self.a_diag.shape[0])

    @property
    def n_readout(self) -> int:
        return self.n_state if self.bridge is None else int(self.bridge.shape[0])

    @property
    def dtype(self):
        return self.w_in.dtype

    def astype(self, dtype) -> "LayerParams":
        kw = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None and f.name != "state_mask":
                value = value.astype(dtype)
            kw[f.name] = value
        return LayerParams(**kw)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    layers: tuple[LayerParams, ...]
    embedding: np.ndarray | None = None
    final_norm: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "embedding", _frozen(self.embedding))
        object.__setattr__(self, "final_norm", _frozen(self.final_norm))
        if len(self.layers) != self.config.n_layers:
            raise ShapeError(
                f"config says {self.config.n_layers} layers, got {len(self.layers)}"
            )
        for i, layer in enumerate(self.layers):
            check_layer(layer, self.config, i)
        if self.config.input_mode is InputMode.TOKENS:
            expected = (self.config.vocab_size, self.config.d_model)
            if self.embedding is None or self.embedding.shape != expected:
                raise ShapeError(f"tokens mode needs an embedding of shape {expected}")

    @property
    def dtype(self):
        if self.layers:
            return self.layers[0].dtype
        if self.embedding is not None:
            return self.embedding.dtype
        return np.dtype(np.float64)

    def astype(self, dtype) -> "Model":
        return replace(
            self,
            layers=tuple(layer.astype(dtype) for layer in self.layers),
            embedding=None if self.embedding is None else self.embedding.astype(dtype),
            final_norm=None if self.final_norm is None else self.final_norm.astype(dtype),
            metadata=dict(self.metadata),
        )


def check_layer(layer: LayerParams, config: ModelConfig, index: int = 0) -> None:
    d, D, k = config.d_inner, config.d_model, config.d_conv
    n, nr = layer.n_state, layer.n_readout
    expected = {
        "w_norm": (D,),
        "w_in": (2 * d + 2 * n + nr, D),
        "w_conv": (d, k),
        "b_conv": (d,),
        "a_diag": (n,),
        "w_out": (D, d),
    }
    if config.variant is Variant.MAMBA2:
        expected["w_post_norm"] = (d,)
    if layer.state_mask is not None:
        expected["state_mask"] = (n,)
    for name, shape in expected.items():
        arr = getattr(layer, name)
        if arr is None or arr.shape != shape:
            got = None if arr is None else arr.shape
            raise ShapeError(f"layer {index}: {name} has shape {got}, expected {shape}")
    if nr > config.d_state or n > config.d_state:
        raise ShapeError(f"layer {index}: more states than d_state={config.d_state}")


def default_a_diag(n_state: int, dtype=np.float64) -> np.ndarray:
    """Real S4D-style initialization a_s = -(s + 1)."""
    return -np.arange(1, n_state + 1, dtype=dtype)


def init_layer(config: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> LayerParams:
    D, d, n, k = config.d_model, config.d_inner, config.d_state, config.d_conv
    w_in = rng.standard_normal((2 * d + 3 * n, D)) / np.sqrt(D)
    bound = 1.0 / np.sqrt(k)
    return LayerParams(
        w_norm=np.ones(D, dtype=dtype),
        w_in=w_in.astype(dtype),
        w_conv=rng.uniform(-bound, bound, (d, k)).astype(dtype),
        b_conv=rng.uniform(-bound, bound, d).astype(dtype),
        a_diag=default_a_diag(n, dtype),
        w_out=(rng.standard_normal((D, d)) / np.sqrt(d * max(1, 2 * config.n_layers))).astype(dtype),
        w_post_norm=np.ones(d, dtype=dtype) if config.variant is Variant.MAMBA2 else None,
    )


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    """Random model; the same (config, seed, dtype) always gives the same weights."""
    rng = np.random.default_rng(seed)
    layers = [init_layer(config, rng, dtype) for _ in range(config.n_layers)]
    embedding = final_norm = None
    if config.input_mode is InputMode.TOKENS:
        embedding = rng.standard_normal((config.vocab_size, config.d_model)).astype(dtype)
        final_norm = np.ones(config.d_model, dtype=dtype)
    return Model(config, tuple(layers), embedding, final_norm)


class LayerState(NamedTuple):
    h: np.ndarray  # (d_inner, N)
    conv_tail: np.ndarray  # (d_inner, k - 1), oldest column first


@dataclass
class DecodeCache:
    """Per-layer recurrent state and conv tail, with a leading batch axis."""

    h: list[np.ndarray]
    conv_tail: list[np.ndarray]

    @classmethod
    def zeros(cls, model: Model, batch: int) -> "DecodeCache":
        d, k = model.config.d_inner, model.config.d_conv
        dtype = model.dtype
        return cls(
            h=[np.zeros((batch, d, layer.n_state), dtype=dtype) for layer in model.layers],
            conv_tail=[np.zeros((batch, d, k - 1), dtype=dtype) for _ in model.layers],
        )

    @property
    def batch(self) -> int:
        return self.h[0].shape[0] if self.h else 0

    def layer_state(self, layer: int, b: int) -> LayerState:
        return LayerState(self.h[layer][b], self.conv_tail[layer][b])

    def copy(self) -> "DecodeCache":
        return DecodeCache([a.copy() for a in self.h], [a.copy() for a in self.conv_tail])


# ---------------------------------------------------------------------------
# elementwise pieces


def silu(x):
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


def rmsnorm(x, w_norm, eps: float = DEFAULT_EPS):
    """Row-wise y = w * x / sqrt(mean(x^2) + eps) over the last axis."""
    if not eps > 0:
        raise ConfigError("eps must be > 0")
    if not np.isfinite(x).all():
        raise NonFiniteError("non-finite activation")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x * (1.0 / np.sqrt(ms + eps)) * w_norm


def softplus_gate(delta_raw):
    """ln(1 + exp(x)); returns x itself above SOFTPLUS_THRESHOLD (exact in float64)."""
    delta_raw = np.asarray(delta_raw)
    if not np.isfinite(delta_raw).all():
        raise NonFiniteError("non-finite activation in delta gate")
    return np.where(
        delta_raw > SOFTPLUS_THRESHOLD,
        delta_raw,
        np.log1p(np.exp(np.minimum(delta_raw, SOFTPLUS_THRESHOLD))),
    )


def _check_transition(delta, a_diag):
    if np.any(np.asarray(a_diag) >= 0):
        raise StabilityError("unstable state transition: a_diag must be < 0")
    if np.any(np.asarray(delta) < 0):
        raise StabilityError("delta must be non-negative")


def discretize(delta, a_diag):
    """Per-state transition a_bar = exp(delta * a) and Euler input scale delta."""
    _check_transition(delta, a_diag)
    return np.exp(delta * a_diag), delta


def discretize_zoh(delta, a_diag):
    """Exact zero-order hold: a_bar = exp(delta*a), scale = (exp(delta*a) - 1) / a.

    This is (delta*a)^-1 (exp(delta*a) - 1) delta for a scalar state; it tends
    to delta as delta*a -> 0. Reference only; the engine uses the Euler scale.
    """
    _check_transition(delta, a_diag)
    delta = np.asarray(delta, dtype=float)
    x = delta * a_diag
    return np.exp(x), np.expm1(x) / a_diag


# ---------------------------------------------------------------------------
# projections and convolution


def split_projection(proj, d_inner: int, n_state: int, n_readout: int | None = None):
    n_readout = n_state if n_readout is None else n_readout
    width = 2 * d_inner + 2 * n_state + n_readout
    if proj.shape[-1] != width:
        raise ShapeError(f"projection width {proj.shape[-1]} != expected {width}")
    o = np.cumsum([0, d_inner, d_inner, n_state, n_readout, n_state])
    return tuple(proj[..., o[i]:o[i + 1]] for i in range(5))


def in_projection(x_norm, w_in, d_inner: int, n_state: int, n_readout: int | None = None):
    """One matmul, then split rows [z | u | B | C | delta_raw]."""
    if x_norm.shape[-1] != w_in.shape[1]:
        raise ShapeError(f"input width {x_norm.shape[-1]} != w_in columns {w_in.shape[1]}")
    return split_projection(x_norm @ w_in.T, d_inner, n_state, n_readout)


def causal_conv1d(u, w_conv, bias, tail=None, backend: str = "numpy"):
    """Depthwise causal conv, tap 0 on the current input, followed by SiLU.

    ``tail`` holds the k-1 inputs before position 0 (oldest first); the new
    tail is the last k-1 raw inputs of the extended sequence.
    """
    seqlen, d = u.shape
    k = w_conv.shape[1]
    if w_conv.shape[0] != d or bias.shape != (d,):
        raise ShapeError("conv weights do not match channel count")
    if tail is None:
        tail = np.zeros((d, k - 1), dtype=u.dtype)
    if tail.shape != (d, k - 1):
        raise ShapeError(f"conv tail has shape {tail.shape}, expected {(d, k - 1)}")
    ext = np.concatenate([tail.T, u], axis=0)
    if backend == "auto":
        backend = "fused" if kernels.HAVE_NUMBA else "numpy"
    if backend == "fused" and ext.dtype == w_conv.dtype:
        acc = kernels.conv_taps(ext, w_conv, bias, seqlen)
    else:
        acc = np.broadcast_to(bias, (seqlen, d)).copy()
        for i in range(k):
            start = k - 1 - i
            acc += w_conv[:, i] * ext[start:start + seqlen]
    new_tail = ext[ext.shape[0] - (k - 1):].T.copy()
    return silu(acc), new_tail


# ---------------------------------------------------------------------------
# selective scan


def _masked_transition(a_bar, state_mask):
    if state_mask is None:
        return a_bar
    return np.where(state_mask, a_bar, 0.0)


def _check_stable(a_bar, layer_index):
    if not ((a_bar >= 0).all() and (a_bar <= 1).all()):
        raise StabilityError(f"transition left [0, 1] in layer {layer_index}")


def _raise_non_finite(y, layer_index):
    bad = ~np.isfinite(np.asarray(y)).all(axis=-1)
    t = int(np.argmax(bad)) if bad.any() else -1
    raise NonFiniteError(
        f"non-finite scan value at layer {layer_index}, t={t}", layer=layer_index, t=t
    )


def selective_scan_prefill(
    u,
    B,
    C,
    delta,
    a_diag,
    h0=None,
    *,
    state_mask=None,
    bridge=None,
    per_element_discretization: bool = False,
    backend: str = "numpy",
    layer_index: int = 0,
):
    """Run h <- a_bar*h + delta*B*u and y = C . h over all positions.

    Returns ``(y, h_last)`` with y of shape (L, d_inner). With a ``bridge``
    (N_read x N) the read-out is C . (bridge @ h). ``per_element_discretization``
    evaluates exp(delta*a) for every (channel, state) pair, the way a kernel
    with per-channel transitions does; values are identical either way.
    """
    seqlen, d = u.shape
    n = delta.shape[1]
    dtype = np.result_type(u.dtype, delta.dtype)
    if h0 is not None and h0.shape != (d, n):
        raise ShapeError(f"h0 has shape {h0.shape}, expected {(d, n)}")
    if h0 is not None and not np.isfinite(h0).all():
        raise NonFiniteError(f"non-finite initial state at layer {layer_index}")
    _check_transition(delta, a_diag)

    if backend == "auto":
        backend = "fused" if kernels.HAVE_NUMBA else "numpy"
    if backend == "fused":
        a_bar = _masked_transition(np.exp(delta * a_diag), state_mask)
        _check_stable(a_bar, layer_index)
        c_read = C if bridge is None else C @ bridge
        if h0 is None:
            h0 = np.zeros((d, n), dtype=dtype)
        y, h = kernels.fused_scan(u, delta * B, a_bar, c_read, h0)
        if not (np.isfinite(y).all() and np.isfinite(h).all()):
            _raise_non_finite(y, layer_index)
        return y, h
    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")

    d_b = delta * B
    if per_element_discretization:
        a_bar = None
    else:
        a_bar = _masked_transition(np.exp(delta * a_diag), state_mask)
        _check_stable(a_bar, layer_index)
    h = np.zeros((d, n), dtype=dtype) if h0 is None else h0.astype(dtype, copy=True)
    y = np.empty((seqlen, d), dtype=dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(seqlen):
            if a_bar is None:
                a_t = np.exp(np.broadcast_to(delta[t], (d, n), subok=True) * a_diag)
                a_t = _masked_transition(a_t, state_mask)
                _check_stable(a_t, layer_index)
            else:
                a_t = a_bar[t]
            h *= a_t
            h += d_b[t] * u[t][:, None]
            read = h if bridge is None else h @ bridge.T
            y[t] = (read * C[t]).sum(axis=1)
            if not np.isfinite(y[t]).all():
                raise NonFiniteError(
                    f"non-finite scan value at layer {layer_index}, t={t}", layer=layer_index, t=t
                )
    return y, h


def selective_scan_step(u_t, B_t, C_t, delta_t, a_diag, h, *, state_mask=None, bridge=None):
    """One decode step for one token: returns (y_t, h_new)."""
    _check_transition(delta_t, a_diag)
    a_bar = _masked_transition(np.exp(delta_t * a_diag), state_mask)
    h_new = a_bar[None, :] * h + np.outer(u_t, delta_t * B_t)
    read = h_new if bridge is None else h_new @ bridge.T
    return read @ C_t, h_new


def ssd_quadratic(
    u, B, C, delta, a_diag, *, guard: int = QUADRATIC_GUARD, a_bar=None, state_mask=None,
    return_state: bool = False,
):
    """Quadratic (attention-like) form of the scan from a zero state.

    Builds, for every state s, the lower-triangular decay matrix
    M_s[t, j] = prod_{m=j+1..t} a_bar[m, s], then
    y[t] = sum_j (sum_s C[t,s] M_s[t,j] delta[j,s] B[j,s]) u[j].
    ``a_bar`` overrides the discretized transition (e.g. all ones). With
    ``return_state`` the final state h_L is also returned.
    """
    seqlen = u.shape[0]
    if seqlen > guard:
        raise GuardError(f"quadratic oracle guard: L={seqlen} exceeds {guard}")
    if a_bar is None:
        a_bar, _ = discretize(delta, a_diag)
    a_bar = _masked_transition(np.asarray(a_bar), state_mask)
    n = a_bar.shape[1]
    decay = np.zeros((n, seqlen, seqlen), dtype=np.result_type(a_bar, u))
    rows = np.arange(seqlen)
    decay[:, rows, rows] = 1.0
    for off in range(1, seqlen):
        t = rows[off:]
        decay[:, t, t - off] = decay[:, t, t - off + 1] * a_bar[t - off + 1].T
    keys = delta * B  # (L, N)
    mix = np.einsum("ts,stj,js->tj", C, decay, keys)
    y = mix @ u
    if return_state:
        return y, np.einsum("sj,js,jd->ds", decay[:, -1, :], keys, u)
    return y


# ---------------------------------------------------------------------------
# block and model


class _NullTimer:
    def phase(self, name):
        return contextlib.nullcontext()


_NULL_TIMER = _NullTimer()


def block_forward(
    x,
    layer: LayerParams,
    config: ModelConfig,
    mode: str = "prefill",
    state: LayerState | None = None,
    *,
    layer_index: int = 0,
    timer=None,
    backend: str = "auto",
    dual: bool = False,
    on_delta: Callable[[np.ndarray], None] | None = None,
):
    """Residual block: norm, projection, conv, selective SSM, gate, out-projection.

    Returns ``(out, new_state)``; ``out = x + w_out @ gated``. ``dual=True``
    runs the quadratic form instead of the recurrence (mamba2, zero state).
    """
    timer = timer or _NULL_TIMER
    seqlen = x.shape[0]
    d, k = config.d_inner, config.d_conv
    if mode not in ("prefill", "decode"):
        raise ModeError(f"unknown mode {mode!r}")
    if mode == "decode":
        if seqlen != 1:
            raise ModeError(f"decode processes one token at a time, got L={seqlen}")
        if state is None:
            raise ModeError("decode needs an initialized cache")
    if state is None:
        state = LayerState(
            np.zeros((d, layer.n_state), dtype=x.dtype), np.zeros((d, k - 1), dtype=x.dtype)
        )

    with timer.phase(PHASE_NORM):
        xn = rmsnorm(x, layer.w_norm, config.norm_eps)
    with timer.phase(PHASE_MLP):
        z, u, b, c, d_raw = in_projection(xn, layer.w_in, d, layer.n_state, layer.n_readout)
    with timer.phase(PHASE_CONV):
        u, tail = causal_conv1d(u, layer.w_conv, layer.b_conv, state.conv_tail, backend)
    with timer.phase(PHASE_SSM):
        delta = softplus_gate(d_raw)
        if dual:
            if config.variant is not Variant.MAMBA2:
                raise ModeError("the quadratic dual form is available for mamba2 only")
            if np.any(state.h):
                raise ModeError("the quadratic dual form starts from a zero state")
            if layer.bridge is not None:
                c = c @ layer.bridge
            y, h = ssd_quadratic(
                u, b, c, delta, layer.a_diag, state_mask=layer.state_mask, return_state=True
            )
        elif mode == "decode":
            y0, h = selective_scan_step(
                u[0], b[0], c[0], delta[0], layer.a_diag, state.h,
                state_mask=layer.state_mask, bridge=layer.bridge,
            )
            y = y0[None, :]
            if not (np.isfinite(y).all() and np.isfinite(h).all()):
                _raise_non_finite(y, layer_index)
        else:
            y, h = selective_scan_prefill(
                u, b, c, delta, layer.a_diag, state.h,
                state_mask=layer.state_mask,
                bridge=layer.bridge,
                per_element_discretization=config.variant is Variant.MAMBA1,
                backend=backend,
                layer_index=layer_index,
            )
    with timer.phase(PHASE_MLP):
        gated = y * silu(z)
        if layer.w_post_norm is not None:
            gated = rmsnorm(gated, layer.w_post_norm, config.norm_eps)
    with timer.phase(PHASE_OUT):
        out = x + gated @ layer.w_out.T
    if on_delta is not None:
        on_delta(delta)
    return out, LayerState(h, tail)


def embed(model: Model, x):
    x = np.asarray(x)
    if model.config.input_mode is InputMode.TOKENS:
        if x.ndim != 2 or not np.issubdtype(x.dtype, np.integer):
            raise ShapeError("tokens mode expects an integer array of shape (B, L)")
        if x.size and (x.min() < 0 or x.max() >= model.config.vocab_size):
            raise ShapeError("token id out of range")
        return model.embedding[x]
    if x.ndim != 3 or x.shape[2] != model.config.d_model:
        raise ShapeError(f"expected input of shape (B, L, {model.config.d_model}), got {x.shape}")
    if not np.isfinite(x).all():
        raise NonFiniteError("non-finite input")
    return x.astype(model.dtype, copy=False)


def model_forward(
    x,
    model: Model,
    mode: str = "prefill",
    cache: DecodeCache | None = None,
    *,
    observer: Callable[[int, np.ndarray, str], None] | None = None,
    timer=None,
    backend: str = "auto",
    dual: bool = False,
):
    """Stack ``block_forward`` over layers for a batch (B, L, D) or token ids (B, L).

    ``observer(layer_index, delta, mode)`` receives the (B*L, N) delta matrix
    of every layer. Returns ``(hidden, new_cache)``; the input cache is not
    modified.
    """
    h = embed(model, x)
    batch, seqlen = h.shape[0], h.shape[1]
    if seqlen < 1:
        raise ShapeError("sequence length must be >= 1")
    if cache is None:
        if mode == "decode":
            raise ModeError("decode needs an initialized cache")
        cache = DecodeCache.zeros(model, batch)
    elif cache.batch != batch and model.layers:
        raise ShapeError(f"cache batch {cache.batch} != input batch {batch}")
    new_cache = cache.copy()
    for li, layer in enumerate(model.layers):
        deltas = []
        on_delta = deltas.append if observer is not None else None
        outs = []
        for b in range(batch):
            out, st = block_forward(
                h[b], layer, model.config, mode, cache.layer_state(li, b),
                layer_index=li, timer=timer, backend=backend, dual=dual, on_delta=on_delta,
            )
            outs.append(out)
            new_cache.h[li][b] = st.h
            new_cache.conv_tail[li][b] = st.conv_tail
        h = np.stack(outs)
        if observer is not None:
            observer(li, np.concatenate(deltas, axis=0), mode)
    return h, new_cache


def lm_logits(model: Model, hidden):
    """Tied-embedding logits for tokens mode."""
    if model.embedding is None:
        raise ModeError("logits need an embedding (tokens input mode)")
    return rmsnorm(hidden, model.final_norm, model.config.norm_eps) @ model.embedding.T
