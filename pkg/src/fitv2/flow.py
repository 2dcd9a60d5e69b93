"""Rectified flow: interpolant, regression loss, ODE samplers and the training loop.

Convention: ``t = 0`` is standard-normal noise, ``t = 1`` is data, and the
model regresses the constant velocity ``x1 - x0`` of the straight path.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import numerics as nx
from .blocks import FiTv2, TokenBatch, forward, grid_positions, unpatchify
from .numerics import AdamWState, NumericError, Tensor
from .positional import RopeTable, build_table

SAMPLERS = ("uniform", "logit_normal")
SOLVERS = ("euler", "rk4", "adaptive")


class IntegrationError(RuntimeError):
    pass


class FrozenGradientError(RuntimeError):
    """A tensor marked frozen received a gradient."""


# ---------------------------------------------------------------------------
# timestep samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimestepSampler:
    kind: str = "logit_normal"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise ValueError(f"unknown timestep sampler {self.kind!r}; expected one of {SAMPLERS}")
        if self.std <= 0:
            raise ValueError(f"logit-normal std must be positive, got {self.std}")

    def draw(self, rng: np.random.Generator, size=None):
        if self.kind == "uniform":
            # rng.random is [0, 1); nudge an exact zero inside the open interval
            t = np.maximum(rng.random(size), np.nextafter(0.0, 1.0))
            return t if size is not None else float(t)
        u = rng.normal(self.mean, self.std, size)
        t = np.clip(0.5 * (1.0 + np.tanh(0.5 * u)), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
        return t if size is not None else float(t)


def sample_timestep(sampler: TimestepSampler, rng: np.random.Generator, size=None):
    return sampler.draw(rng, size)


@dataclass(frozen=True)
class FlowConfig:
    sampler: TimestepSampler = field(default_factory=TimestepSampler)
    ode: str = "rk4"
    steps: int = 32
    rtol: float = 1e-5
    atol: float = 1e-5
    cfg_scale: float = 1.0

    def __post_init__(self):
        if self.ode not in SOLVERS:
            raise ValueError(f"unknown ODE solver {self.ode!r}; expected one of {SOLVERS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.cfg_scale < 1:
            raise ValueError(f"guidance scale must be >= 1, got {self.cfg_scale}")


# ---------------------------------------------------------------------------
# interpolant and loss
# ---------------------------------------------------------------------------


@dataclass
class InterpolantSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    target_v: np.ndarray


def _expand_t(t, ndim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and ndim > 1:
        t = t.reshape((-1,) + (1,) * (ndim - 1))
    return t


def make_interpolant(x0: np.ndarray, x1: np.ndarray, t) -> InterpolantSample:
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"noise {x0.shape} and data {x1.shape} differ in shape")
    tt = _expand_t(t, x0.ndim).astype(x1.dtype)
    xt = tt * x1 + (1 - tt) * x0
    return InterpolantSample(x0, x1, np.asarray(t), xt, x1 - x0)


def masked_mse(pred: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Elementwise squared error averaged over valid tokens (and their channels)."""
    D = pred.shape[-1]
    count = int(valid.sum()) * D
    if count == 0:
        raise ValueError("batch has no valid tokens")
    w = (valid[..., None] / count).astype(pred.dtype)
    tgt = np.where(valid[..., None], target, 0).astype(pred.dtype)
    diff = pred - Tensor(tgt, dtype=pred.dtype)
    return nx.sum_(nx.square(diff) * Tensor(np.broadcast_to(w, pred.shape).copy(), dtype=pred.dtype))


def item_noise(batch: TokenBatch, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal noise drawn per item over its valid tokens only.

    Drawing per item keeps the stream independent of ``L_max``; padding gets zeros.
    """
    x0 = np.zeros(batch.tokens.shape, dtype=np.float64)
    D = batch.tokens.shape[-1]
    for i, n in enumerate(batch.lengths):
        x0[i, :n] = rng.standard_normal((n, D))
    return x0


def flow_loss(
    model: FiTv2,
    batch: TokenBatch,
    sampler: TimestepSampler,
    rng: np.random.Generator,
    labels,
    rope: RopeTable | None = None,
    t=None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Velocity-regression loss on one packed batch.

    ``t`` and ``noise`` may be fixed by the caller (validation); otherwise they
    are drawn from ``rng`` (timesteps first, then noise item by item).
    """
    if t is None:
        t = sampler.draw(rng, batch.size)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch.size,))
    x0 = item_noise(batch, rng) if noise is None else noise
    x1 = np.where(batch.valid[..., None], batch.tokens, 0.0)
    s = make_interpolant(x0, x1.astype(np.float64), t)
    noisy = replace(batch, tokens=s.xt)
    pred = forward(model, noisy, t, labels, rope)
    return masked_mse(pred, s.target_v, batch.valid)


def cfg_velocity(v_cond, v_uncond, w: float):
    if w < 1:
        raise ValueError(f"guidance scale must be >= 1, got {w}")
    if np.shape(v_cond) != np.shape(v_uncond):
        raise ValueError("conditional and unconditional velocities differ in shape")
    return v_uncond + w * (v_cond - v_uncond)


# ---------------------------------------------------------------------------
# ODE solvers
# ---------------------------------------------------------------------------


@dataclass
class SolveStats:
    nfe: int = 0
    accepted: int = 0
    rejected: int = 0


def euler(f, z0, steps: int, t0: float = 0.0, t1: float = 1.0, stats: SolveStats | None = None):
    stats = SolveStats() if stats is None else stats
    h = (t1 - t0) / steps
    z = z0
    for k in range(steps):
        z = z + h * f(z, t0 + k * h)
        stats.nfe += 1
        stats.accepted += 1
    return z


def rk4(f, z0, steps: int, t0: float = 0.0, t1: float = 1.0, stats: SolveStats | None = None):
    stats = SolveStats() if stats is None else stats
    h = (t1 - t0) / steps
    z = z0
    for k in range(steps):
        t = t0 + k * h
        k1 = f(z, t)
        k2 = f(z + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(z + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(z + h * k3, t + h)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        stats.nfe += 4
        stats.accepted += 1
    return z


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_DP_E = _DP_B5 - _DP_B4


def _err_norm(err, z, znew, rtol, atol) -> float:
    # max norm: every element honours its own tolerance (an RMS norm lets
    # single pixels of a large batch drift far past it)
    scale = atol + rtol * np.maximum(np.abs(z), np.abs(znew))
    return float(np.max(np.abs(err) / scale))


def _initial_step(f, z0, f0, t0, rtol, atol, span) -> float:
    # starting-step heuristic for a 5th-order method
    scale = atol + rtol * np.abs(z0)
    d0 = np.sqrt(np.mean((z0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = f(z0 + h0 * f0, t0 + h0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def dopri5(
    f,
    z0,
    t0: float = 0.0,
    t1: float = 1.0,
    rtol: float = 1e-5,
    atol: float = 1e-5,
    h0: float | None = None,
    min_step: float = 1e-8,
    max_steps: int = 100_000,
    safety: float = 0.9,
    stats: SolveStats | None = None,
):
    """Embedded 5(4) Runge-Kutta with a proportional-integral step controller."""
    stats = SolveStats() if stats is None else stats
    span = t1 - t0
    t = t0
    z = np.asarray(z0, dtype=np.float64)
    k1 = f(z, t)
    stats.nfe += 1
    if h0 is None:
        h = _initial_step(f, z, k1, t, rtol, atol, span)
        stats.nfe += 1
    else:
        h = h0
    err_prev = 1.0
    alpha, beta = 0.17, 0.04  # exponents of the PI controller
    rejected_last = False
    while t < t1:
        if stats.accepted + stats.rejected >= max_steps:
            raise IntegrationError(f"exceeded {max_steps} steps at t={t}")
        if h < min_step:
            raise IntegrationError(f"step size underflow: h={h:.3e} at t={t:.6f}")
        h = min(h, t1 - t)
        ks = [k1]
        for i in range(1, 7):
            zi = z + h * sum(a * k for a, k in zip(_DP_A[i], ks) if a != 0.0)
            ks.append(f(zi, t + _DP_C[i] * h))
        stats.nfe += 6
        znew = zi  # stage 7 is evaluated at the 5th-order solution
        err = h * sum(e * k for e, k in zip(_DP_E, ks) if e != 0.0)
        en = _err_norm(err, z, znew, rtol, atol)
        if en <= 1.0:
            t = t1 if t1 - (t + h) < 1e-14 else t + h
            z = znew
            k1 = ks[6]
            stats.accepted += 1
            en = max(en, 1e-10)
            fac = safety * en ** (-alpha) * err_prev**beta
            fac = min(10.0, max(0.2, fac))
            if rejected_last:
                fac = min(fac, 1.0)
            h *= fac
            err_prev = en
            rejected_last = False
        else:
            stats.rejected += 1
            h *= max(0.2, safety * en ** (-0.2))
            rejected_last = True
    return z


def integrate(f, z0, flow: FlowConfig, stats: SolveStats | None = None):
    if flow.ode == "euler":
        return euler(f, z0, flow.steps, stats=stats)
    if flow.ode == "rk4":
        return rk4(f, z0, flow.steps, stats=stats)
    return dopri5(f, z0, rtol=flow.rtol, atol=flow.atol, stats=stats)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def grid_batch(tokens: np.ndarray, grid: tuple[int, int]) -> TokenBatch:
    """All items share one grid, so nothing is padded."""
    B, L, _ = tokens.shape
    ph, pw = grid_positions(*grid)
    return TokenBatch(
        tokens,
        np.broadcast_to(ph, (B, L)).copy(),
        np.broadcast_to(pw, (B, L)).copy(),
        np.zeros((B, L), dtype=np.float32),
        [tuple(grid)] * B,
        [L] * B,
    )


def sampling_table(
    model: FiTv2, grid: tuple[int, int], method: str = "none", attn_scale: bool = False, **rope_kw
) -> RopeTable:
    """Rotary table for ``grid``; ``rope_kw`` passes YaRN hyperparameters through."""
    cfg = model.config
    return build_table(
        cfg.rope_config(method, attn_scale, **rope_kw), grid[0], grid[1], cfg.rope_base_h, cfg.rope_base_w
    )


def velocity_field(model: FiTv2, grid, labels, rope: RopeTable, cfg_scale: float = 1.0) -> Callable:
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    null = np.full(n, model.config.num_classes, dtype=np.int64)

    def f(z, t):
        with nx.no_grad():
            if cfg_scale == 1.0:
                out = forward(model, grid_batch(z, grid), np.full(n, t), labels, rope).data
                return out.astype(np.float64)
            zz = np.concatenate([z, z], axis=0)
            out = forward(model, grid_batch(zz, grid), np.full(2 * n, t), np.concatenate([labels, null]), rope).data
            out = out.astype(np.float64)
            return cfg_velocity(out[:n], out[n:], cfg_scale)

    return f


@dataclass
class SampleInfo:
    grid: tuple[int, int]
    method: str
    s: float
    s_h: float
    s_w: float
    s_attn: float
    nfe: int
    out_of_budget: bool


def ode_sample(
    model: FiTv2,
    grid: tuple[int, int],
    labels,
    flow: FlowConfig,
    rng: np.random.Generator,
    method: str = "none",
    attn_scale: bool = False,
    noise: np.ndarray | None = None,
    rope_kw: dict | None = None,
) -> tuple[list[np.ndarray], SampleInfo]:
    """Integrate noise at ``t=0`` to data at ``t=1`` on a ``grid`` of tokens.

    Returns one ``[C, H, W]`` latent per label. A grid over the token budget
    with ``method="none"`` is direct extrapolation: it warns and proceeds.
    """
    cfg = model.config
    gh, gw = grid
    L = gh * gw
    over = L > cfg.max_tokens
    if over and method == "none":
        warnings.warn(
            f"grid {gh}x{gw} ({L} tokens) exceeds the budget of {cfg.max_tokens}; extrapolating directly",
            RuntimeWarning,
            stacklevel=2,
        )
    table = sampling_table(model, grid, method, attn_scale, **(rope_kw or {}))
    labels = np.asarray(labels, dtype=np.int64)
    if noise is None:
        noise = rng.standard_normal((len(labels), L, cfg.token_dim))
    f = velocity_field(model, grid, labels, table, flow.cfg_scale)
    stats = SolveStats()
    z1 = integrate(f, noise, flow, stats)
    images = [unpatchify(z1[i], grid, cfg.patch, cfg.in_channels).astype(np.float32) for i in range(len(labels))]
    fac = table.factors
    info = SampleInfo(tuple(grid), method, fac.s, fac.s_h, fac.s_w, table.attention_scale, stats.nfe, over)
    return images, info


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 40
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    ema_decay: float = 0.999
    class_drop: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0 or self.warmup < 0:
            raise ValueError("lr and warmup must be non-negative")
        if not 0 <= self.class_drop < 1:
            raise ValueError("class_drop must lie in [0, 1)")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class TrainState:
    step: int
    opt: AdamWState
    ema: dict[str, np.ndarray]
    rng: np.random.Generator
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


def init_state(model: FiTv2, seed: int) -> TrainState:
    ema = {k: v.data.copy() for k, v in model.params.items()}
    return TrainState(0, AdamWState(), ema, np.random.default_rng(seed))


def lr_at(step: int, base: float, warmup: int) -> float:
    """Linear warm-up over ``warmup`` steps, then constant."""
    if warmup <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup)


def drop_labels(labels: np.ndarray, p: float, null: int, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(len(labels)) >= p
    return np.where(keep, labels, null)


def train_step(
    model: FiTv2,
    batch: TokenBatch,
    labels: np.ndarray,
    state: TrainState,
    tcfg: TrainConfig,
    sampler: TimestepSampler,
    rope: RopeTable | None = None,
    trainable: set[str] | None = None,
) -> float:
    labels = drop_labels(labels, tcfg.class_drop, model.config.num_classes, state.rng)
    model.zero_grad()
    loss = flow_loss(model, batch, sampler, state.rng, labels, rope)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {state.step}")
    loss.backward()
    grads = {}
    for name, p in model.params.items():
        if trainable is not None and name not in trainable:
            if p.grad is not None:
                raise FrozenGradientError(f"frozen tensor {name!r} received a gradient")
            continue
        grads[name] = p.grad
    lr = lr_at(state.step, tcfg.lr, tcfg.warmup)
    try:
        nx.adamw_step(
            model.params, grads, state.opt, lr, (tcfg.beta1, tcfg.beta2), weight_decay=tcfg.weight_decay
        )
    except NumericError as e:
        raise NumericError(f"{e} at step {state.step}") from None
    nx.ema_update(state.ema, model.params, tcfg.ema_decay)
    state.losses.append(value)
    state.lrs.append(lr)
    state.step += 1
    return value


def train_loop(
    model: FiTv2,
    dataset,
    tcfg: TrainConfig,
    sampler: TimestepSampler,
    steps: int,
    state: TrainState | None = None,
    seed: int = 0,
    rope: RopeTable | None = None,
    trainable: set[str] | None = None,
    callback: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run ``steps`` AdamW updates on minibatches drawn from a ``TokenDataset``.

    Tensors outside ``trainable`` (when given) are detached for the duration
    and must come out bit-identical.
    """
    state = init_state(model, seed) if state is None else state
    saved = {k: p.requires_grad for k, p in model.params.items()}
    if trainable is not None:
        unknown = set(trainable) - set(model.params)
        if unknown:
            raise KeyError(f"unknown trainable tensors: {sorted(unknown)[:5]}")
        for k, p in model.params.items():
            p.requires_grad = k in trainable
    try:
        for _ in range(steps):
            batch, labels = dataset.sample_batch(state.rng, tcfg.batch_size)
            train_step(model, batch, labels, state, tcfg, sampler, rope, trainable)
            if callback is not None:
                callback(state)
    finally:
        for k, p in model.params.items():
            p.requires_grad = saved[k]
    return state


def ema_model(model: FiTv2, state: TrainState) -> FiTv2:
    out = model.astype(model.params["x_embed.weight"].dtype)
    out.load_state_dict(state.ema)
    return out


def validation_loss(
    model: FiTv2, dataset, n_items: int = 64, n_times: int = 8, seed: int = 1234, rope=None
) -> float:
    """Loss on a fixed subset, fixed noise and a uniform midpoint grid of timesteps."""
    rng = np.random.default_rng(seed)
    n_items = min(n_items, len(dataset))
    index = rng.choice(len(dataset), size=n_items, replace=False)
    batch, labels = dataset.batch(index)
    ts = (np.arange(n_times) + 0.5) / n_times
    noises = [item_noise(batch, rng) for _ in ts]
    total = 0.0
    with nx.no_grad():
        for t, x0 in zip(ts, noises):
            total += flow_loss(model, batch, None, rng, labels, rope, t=np.full(batch.size, t), noise=x0).item()
    return total / n_times


# ---------------------------------------------------------------------------
# a 2-D toy velocity field (for marginal-transport checks)
# ---------------------------------------------------------------------------


class ToyVelocityMLP:
    """Small MLP ``v(x, t)`` on ``R^dim`` built from the same autodiff ops."""

    def __init__(self, dim: int = 2, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim

        def w(i, o):
            return Tensor(rng.standard_normal((i, o)) / math.sqrt(i), requires_grad=True, dtype=np.float64)

        def b(o):
            return Tensor(np.zeros(o), requires_grad=True, dtype=np.float64)

        self.params = {
            "w1": w(dim + 16, hidden),
            "b1": b(hidden),
            "w2": w(hidden, hidden),
            "b2": b(hidden),
            "w3": w(hidden, dim),
            "b3": b(dim),
        }
        self.freqs = np.pi * np.arange(1, 9)

    def features(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        ang = t[:, None] * self.freqs
        return np.concatenate([x, np.cos(ang), np.sin(ang)], axis=1)

    def __call__(self, x: np.ndarray, t) -> Tensor:
        P = self.params
        h = Tensor(self.features(x, t), dtype=np.float64)
        h = nx.silu(nx.linear(h, P["w1"], P["b1"]))
        h = nx.silu(nx.linear(h, P["w2"], P["b2"]))
        return nx.linear(h, P["w3"], P["b3"])

    def velocity(self, z, t) -> np.ndarray:
        with nx.no_grad():
            return self(z, t).data

    def fit(self, sample_data: Callable, steps: int, batch: int, lr: float, rng: np.random.Generator) -> list[float]:
        state = AdamWState()
        losses = []
        for k in range(steps):
            x1 = sample_data(rng, batch)
            x0 = rng.standard_normal(x1.shape)
            t = rng.random(batch)
            s = make_interpolant(x0, x1, t)
            for p in self.params.values():
                p.grad = None
            diff = self(s.xt, t) - Tensor(s.target_v, dtype=np.float64)
            loss = nx.mean(nx.square(diff))
            loss.backward()
            lr_k = lr * 0.5 * (1 + math.cos(math.pi * k / steps))
            nx.adamw_step(self.params, {n: p.grad for n, p in self.params.items()}, state, lr_k)
            losses.append(loss.item())
        return losses
