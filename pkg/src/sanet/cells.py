"""Recurrent cells and the model zoo (LSTM, Conv-LSTM and SA-Net variants).

All networks share one layout: a spatial branch reading the demand window, two
temporal LSTM branches reading the calendar and precipitation windows, and an
elementwise fusion of the three (optionally four) per-cell estimates.
Parameters live in a flat ``dict[str, Tensor]``; forward functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .geo import build_adapting_field, build_feature_map, initial_feature_weights, sac_patches
from .tensor import Tensor

KINDS = ("LSTM", "LSTM+Social", "ConvLSTM", "ConvLSTM+Social", "SA-Net")
GATES = ("i", "f", "c", "o")
CALENDAR_DIM = 3

Params = Mapping[str, Tensor]


class SpatialState(NamedTuple):
    h: Tensor
    c: Tensor


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


def _sub(params: Params, prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# cells ---------------------------------------------------------------------

def lstm_step(params: Params, x: Tensor, state: LstmState) -> LstmState:
    """One step of a peephole-free LSTM.

    ``params`` holds ``W_x{g}`` (H x K), ``W_h{g}`` (H x H) and ``b_{g}`` (H)
    for g in i, f, c, o. ``x`` is (K,) or (B, K).
    """
    x = T.as_tensor(x)
    h, c = T.as_tensor(state[0]), T.as_tensor(state[1])
    if x.ndim == 1:
        lift = lambda t: T.reshape(t, (1,) + t.shape)
        out = lstm_step(params, lift(x), LstmState(lift(h), lift(c)))
        return LstmState(T.reshape(out.h, h.shape), T.reshape(out.c, c.shape))
    hidden = params["W_hi"].shape[0]
    if h.shape != (x.shape[0], hidden) or c.shape != h.shape:
        raise ValueError(f"state {h.shape}/{c.shape} does not match hidden size {hidden}")

    def pre(g):
        return T.dense(x, params[f"W_x{g}"], params[f"b_{g}"]) + T.matmul(
            h, T.transpose(params[f"W_h{g}"], (1, 0)))

    i = T.sigmoid(pre("i"))
    f = T.sigmoid(pre("f"))
    c_new = f * c + i * T.tanh(pre("c"))
    o = T.sigmoid(pre("o"))
    return LstmState(o * T.tanh(c_new), c_new)


def _recurrent_conv_step(params: Params, x: Tensor, state: SpatialState,
                         patches: Callable[[Tensor], Tensor]) -> SpatialState:
    h, c = state
    if x.ndim != 4 or h.ndim != 4:
        raise ValueError("recurrent conv step expects batched (B, C, M, N) tensors")
    if c.shape != h.shape or h.shape[-2:] != x.shape[-2:] or params["W_ci"].shape != h.shape[1:]:
        raise ValueError(f"state {h.shape} does not match input {x.shape} / peepholes {params['W_ci'].shape}")
    px, ph = patches(x), patches(h)

    def conv(g):
        return T.add_channel_bias(T.add(T.contract(px, params[f"W_x{g}"]),
                                        T.contract(ph, params[f"W_h{g}"])), params[f"b_{g}"])

    i = T.sigmoid(conv("i") + params["W_ci"] * c)
    f = T.sigmoid(conv("f") + params["W_cf"] * c)
    c_new = f * c + i * T.tanh(conv("c"))
    o = T.sigmoid(conv("o") + params["W_co"] * c_new)
    return SpatialState(o * T.tanh(c_new), c_new)


def _batched(fn, x: Tensor, state: SpatialState):
    if x.ndim == 3:
        lift = lambda t: T.reshape(t, (1,) + t.shape)
        out = fn(lift(x), SpatialState(lift(state.h), lift(state.c)))
        drop = lambda t: T.reshape(t, t.shape[1:])
        return SpatialState(drop(out.h), drop(out.c))
    return fn(x, state)


def conv_lstm_step(params: Params, x: Tensor, state: SpatialState) -> SpatialState:
    """Conv-LSTM step with Hadamard peepholes; x is (I, M, N) or (B, I, M, N)."""
    v = params["W_xi"].shape[-1]
    return _batched(lambda a, s: _recurrent_conv_step(params, a, s, lambda t: T.unfold(t, v)),
                    T.as_tensor(x), state)


def sac_lstm_step(params: Params, x: Tensor, state: SpatialState, k: Tensor) -> SpatialState:
    """Conv-LSTM step whose every convolution is a socially-aware convolution."""
    v = params["W_xi"].shape[-1]
    if k.shape[2:] != (v, v) or k.shape[:2] != x.shape[-2:]:
        raise ValueError(f"adapting field {k.shape} does not match grid {x.shape[-2:]} / kernel {v}")
    return _batched(lambda a, s: _recurrent_conv_step(params, a, s, lambda t: sac_patches(t, k)),
                    T.as_tensor(x), state)


def replicate_spatial(x, m: int, n: int) -> Tensor:
    """Repeat a scalar (or a batch of scalars, shape (B,)) over an M x N grid."""
    x = T.as_tensor(x)
    if x.ndim == 0:
        return T.broadcast_to(T.reshape(x, (1, 1)), (m, n))
    return T.broadcast_to(T.reshape(x, (x.shape[0], 1, 1)), (x.shape[0], m, n))


# model configuration -------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    kind: str = "SA-Net"
    grid: tuple[int, int] = (8, 8)
    channels: int = 64
    layers: int = 1
    kernel_size: int = 3
    temporal_hidden: int = 32
    look_back: int = 6
    n_features: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.layers not in (1, 2, 3):
            raise ValueError(f"layer count must be 1, 2 or 3, got {self.layers}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if min(self.channels, self.temporal_hidden, self.look_back, self.n_features, *self.grid) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def spatial_conv(self) -> bool:
        return self.kind.startswith("ConvLSTM") or self.kind == "SA-Net"

    @property
    def social(self) -> bool:
        return self.kind.endswith("+Social")

    @property
    def uses_features(self) -> bool:
        return self.social or self.kind == "SA-Net"


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _lstm_shapes(prefix: str, k: int, h: int):
    for g in GATES:
        yield f"{prefix}W_x{g}", (h, k), "glorot"
        yield f"{prefix}W_h{g}", (h, h), "glorot"
        yield f"{prefix}b_{g}", (h,), "forget" if g == "f" else "zero"


def _conv_lstm_shapes(prefix: str, i: int, o: int, v: int, m: int, n: int):
    for g in GATES:
        yield f"{prefix}W_x{g}", (o, i, v, v), "glorot"
        yield f"{prefix}W_h{g}", (o, o, v, v), "glorot"
    for g in ("i", "f", "o"):
        yield f"{prefix}W_c{g}", (o, m, n), "zero"
    for g in GATES:
        yield f"{prefix}b_{g}", (o,), "forget" if g == "f" else "zero"


def parameter_shapes(cfg: ModelConfig):
    """Ordered (name, shape, init) triples for every parameter of a model."""
    m, n = cfg.grid
    v, o, hid = cfg.kernel_size, cfg.channels, cfg.temporal_hidden
    specs = []
    for layer in range(cfg.layers):
        prefix = f"st{layer + 1}."
        if cfg.spatial_conv:
            specs += _conv_lstm_shapes(prefix, 1 if layer == 0 else o, o, v, m, n)
        else:
            specs += _lstm_shapes(prefix, 1 if layer == 0 else o, o)
    if cfg.spatial_conv:
        specs += [("W_ux", (1, o, v, v), "glorot"), ("b_u", (1,), "zero")]
    else:
        specs += [("W_ux", (1, o), "glorot"), ("b_u", (1,), "zero")]
    for layer in range(cfg.layers):
        specs += _lstm_shapes(f"cal{layer + 1}.", CALENDAR_DIM if layer == 0 else hid, hid)
    for layer in range(cfg.layers):
        specs += _lstm_shapes(f"rain{layer + 1}.", 1 if layer == 0 else hid, hid)
    specs += [("w_vx", (1, hid), "glorot"), ("b_v", (1,), "zero"),
              ("w_px", (1, hid), "glorot"), ("b_p", (1,), "zero")]
    specs += [("W_u", (m, n), "one"), ("W_v", (m, n), "zero"), ("W_p", (m, n), "zero")]
    if cfg.social:
        specs.append(("W_s", (m, n), "zero"))
    if cfg.uses_features:
        specs.append(("feature_weights", (cfg.n_features,), "features"))
    return specs


def _fans(shape) -> tuple[int, int]:
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    return shape[1], shape[0]


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, how in parameter_shapes(cfg):
        if how == "glorot":
            value = _glorot(rng, shape, *_fans(shape))
        elif how == "forget":
            value = np.ones(shape)
        elif how == "one":
            value = np.ones(shape)
        elif how == "features":
            value = initial_feature_weights(shape[0])
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


# forward -------------------------------------------------------------------

def _run_lstm_stack(params: Params, prefix: str, layers: int, steps: list[Tensor]) -> Tensor:
    seq = steps
    for layer in range(layers):
        p = _sub(params, f"{prefix}{layer + 1}.")
        hidden = p["W_hi"].shape[0]
        batch = seq[0].shape[0]
        state = LstmState(T.zeros((batch, hidden)), T.zeros((batch, hidden)))
        out = []
        for x in seq:
            state = lstm_step(p, x, state)
            out.append(state.h)
        seq = out
    return seq[-1]


def _spatial_branch(cfg: ModelConfig, params: Params, demand: Tensor, k: Tensor | None) -> Tensor:
    b, d, m, n = demand.shape
    if not cfg.spatial_conv:
        per_cell = T.reshape(T.transpose(demand, (0, 2, 3, 1)), (b * m * n, d))
        steps = [per_cell[:, t:t + 1] for t in range(d)]
        last = _run_lstm_stack(params, "st", cfg.layers, steps)
        return T.reshape(T.dense(last, params["W_ux"], params["b_u"]), (b, m, n))

    seq = [T.reshape(demand[:, t], (b, 1, m, n)) for t in range(d)]
    for layer in range(cfg.layers):
        p = _sub(params, f"st{layer + 1}.")
        zero = T.zeros((b, cfg.channels, m, n))
        state = SpatialState(zero, zero)
        out = []
        for x in seq:
            state = sac_lstm_step(p, x, state, k) if k is not None else conv_lstm_step(p, x, state)
            out.append(state.h)
        seq = out
    last = seq[-1]
    if k is not None:
        readout = T.conv2d_patches(sac_patches(last, k), params["W_ux"], params["b_u"])
    else:
        readout = T.conv2d(last, params["W_ux"], params["b_u"])
    return T.reshape(readout, (b, m, n))


def network_forward(cfg: ModelConfig, params: Params, demand, calendar, precip,
                    features: np.ndarray | None = None) -> Tensor:
    """Batched forward pass.

    demand (B, d, M, N), calendar (B, d + 1, 3), precip (B, d) -> (B, M, N).
    ``features`` are the standardized socio-demographic rasters (P, M, N),
    required by SA-Net and the +Social variants.
    """
    demand, calendar, precip = T.as_tensor(demand), T.as_tensor(calendar), T.as_tensor(precip)
    b, d, m, n = demand.shape
    if d != cfg.look_back or (m, n) != cfg.grid:
        raise ValueError(f"demand window {demand.shape[1:]} does not match look-back {cfg.look_back} / grid {cfg.grid}")
    if calendar.shape != (b, d + 1, CALENDAR_DIM):
        raise ValueError(f"calendar window must be {(b, d + 1, CALENDAR_DIM)}, got {calendar.shape}")
    if precip.shape != (b, d):
        raise ValueError(f"precipitation window must be {(b, d)}, got {precip.shape}")

    fmap = k = None
    if cfg.uses_features:
        if features is None:
            raise ValueError(f"{cfg.kind} needs socio-demographic features")
        fmap = build_feature_map(features, params["feature_weights"])
        if cfg.kind == "SA-Net":
            k = build_adapting_field(fmap, cfg.kernel_size)

    x_u = _spatial_branch(cfg, params, demand, k)

    cal_steps = [calendar[:, t] for t in range(d + 1)]
    v_last = _run_lstm_stack(params, "cal", cfg.layers, cal_steps)
    x_v = replicate_spatial(T.reshape(T.dense(v_last, params["w_vx"], params["b_v"]), (b,)), m, n)
    rain_steps = [T.reshape(precip[:, t], (b, 1)) for t in range(d)]
    p_last = _run_lstm_stack(params, "rain", cfg.layers, rain_steps)
    x_p = replicate_spatial(T.reshape(T.dense(p_last, params["w_px"], params["b_p"]), (b,)), m, n)

    out = params["W_u"] * x_u + params["W_v"] * x_v + params["W_p"] * x_p
    if cfg.social:
        out = out + params["W_s"] * fmap
    return out


def sa_net_forward(params: Params, demand_window, v_window, p_window, k: Tensor,
                   layers: int | None = None) -> Tensor:
    """SA-Net forward for one window with a precomputed adapting field.

    demand_window (d, M, N), v_window (d + 1, 3), p_window (d,) -> (M, N).
    """
    demand_window = T.as_tensor(demand_window)
    d, m, n = demand_window.shape
    if layers is None:
        layers = sum(1 for name in params if name.endswith(".W_xi") and name.startswith("st"))
    cfg = ModelConfig(kind="SA-Net", grid=(m, n), channels=params["st1.W_xi"].shape[0],
                      layers=layers, kernel_size=params["st1.W_xi"].shape[-1],
                      temporal_hidden=params["cal1.W_xi"].shape[0], look_back=d)
    v_window, p_window = T.as_tensor(v_window), T.as_tensor(p_window)
    if v_window.shape != (d + 1, CALENDAR_DIM) or p_window.shape != (d,):
        raise ValueError("calendar window must hold d + 1 vectors and precipitation d values")
    lift = lambda t: T.reshape(t, (1,) + t.shape)
    x_u = _spatial_branch(cfg, params, lift(demand_window), k)
    cal = lift(v_window)
    v_last = _run_lstm_stack(params, "cal", layers, [cal[:, t] for t in range(d + 1)])
    x_v = replicate_spatial(T.reshape(T.dense(v_last, params["w_vx"], params["b_v"]), (1,)), m, n)
    rain = lift(p_window)
    p_last = _run_lstm_stack(params, "rain", layers, [T.reshape(rain[:, t], (1, 1)) for t in range(d)])
    x_p = replicate_spatial(T.reshape(T.dense(p_last, params["w_px"], params["b_p"]), (1,)), m, n)
    out = params["W_u"] * x_u + params["W_v"] * x_v + params["W_p"] * x_p
    return T.reshape(out, (m, n))


@dataclass
class Model:
    """Parameter holder plus the pure forward function for one model kind."""

    config: ModelConfig
    params: dict[str, Tensor]
    features: np.ndarray | None = None
    frozen: frozenset[str] = field(default_factory=frozenset)

    @property
    def kind(self) -> str:
        return self.config.kind

    def forward(self, demand, calendar, precip, params: Params | None = None) -> Tensor:
        return network_forward(self.config, params if params is not None else self.params,
                               demand, calendar, precip, self.features)

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def with_params(self, params: Mapping[str, Tensor]) -> "Model":
        return replace(self, params=dict(params))

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def build_model(kind: str, config: ModelConfig | None = None, features: np.ndarray | None = None,
                seed: int = 0, feature_weights: np.ndarray | None = None) -> Model:
    """Create a freshly initialised model.

    Passing ``feature_weights`` fixes the socio-demographic mixing weights
    instead of learning them.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {', '.join(KINDS)}")
    config = replace(config or ModelConfig(), kind=kind)
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[1:] != config.grid:
            raise ValueError(f"feature rasters {features.shape} do not match grid {config.grid}")
        config = replace(config, n_features=features.shape[0])
    params = init_params(config, seed)
    frozen = frozenset()
    if feature_weights is not None and config.uses_features:
        params["feature_weights"] = Tensor(feature_weights, name="feature_weights")
        frozen = frozenset({"feature_weights"})
    return Model(config, params, features, frozen)
