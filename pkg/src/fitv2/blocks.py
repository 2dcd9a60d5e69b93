"""The flexible diffusion transformer: token batches, parameters and the forward pass.

Weights are stored input-major, ``(fan_in, fan_out)``, so every projection is
``x @ W + b``. Each stored tensor carries a role tag (``weight``, ``bias``,
``modulation``, ``patch_embedder``, ``final``, ``embedding``) that the
post-training freeze plan keys on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .positional import RopeConfig, RopeTable, build_table

ROLES = ("weight", "bias", "modulation", "patch_embedder", "final", "embedding")
TIMESTEP_FREQS = 256
# t in [0, 1] enters the sinusoidal features unscaled; a 1000x scale puts
# ripple into v(z, t) that adaptive solvers alias
TIME_SCALE = 1.0


class BatchError(ValueError):
    """A token batch does not fit the model or is internally inconsistent."""


class ShapeError(ValueError):
    pass


def swiglu_hidden(hidden: int, heads: int) -> int:
    """Two thirds of a 4x MLP; rounded up to a multiple of ``heads`` when 8d/3 is fractional."""
    if (8 * hidden) % 3 == 0:
        return 8 * hidden // 3
    h = round(8 * hidden / 3)
    return -(-h // heads) * heads


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 96
    heads: int = 4
    patch: int = 2
    in_channels: int = 4
    max_tokens: int = 64
    num_classes: int = 4
    lora_rank: int | None = None
    rope_base: float = 10000.0
    # per-axis bases after high-resolution post-training; None = rope_base
    rope_base_h: float | None = None
    rope_base_w: float | None = None
    train_len: float | None = None
    qk_norm: bool = True
    eps: float = 1e-6

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.head_dim % 4:
            raise ValueError(f"head_dim {self.head_dim} must be divisible by 4 for 2-D rotary embeddings")
        if self.rank < 1 or self.max_tokens < 1 or self.layers < 1:
            raise ValueError("lora_rank, max_tokens and layers must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def rank(self) -> int:
        return self.hidden // 4 if self.lora_rank is None else self.lora_rank

    @property
    def mlp_hidden(self) -> int:
        return swiglu_hidden(self.hidden, self.heads)

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.in_channels

    @property
    def train_length(self) -> float:
        return math.sqrt(self.max_tokens) if self.train_len is None else self.train_len

    def rope_config(self, method: str = "none", attn_scale: bool = False, **kw) -> RopeConfig:
        return RopeConfig(
            head_dim=self.head_dim,
            base=self.rope_base,
            method=method,
            train_len=self.train_length,
            attn_scale=attn_scale,
            **kw,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    role: str
    init: str  # "zeros", "normal002", "fan_in"


def parameter_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Every stored tensor of the model, in a fixed order, without allocating."""
    d, r, h = cfg.hidden, cfg.rank, cfg.mlp_hidden
    specs = [
        ParamSpec("x_embed.weight", (cfg.token_dim, d), "patch_embedder", "fan_in"),
        ParamSpec("x_embed.bias", (d,), "patch_embedder", "zeros"),
        ParamSpec("t_embed.fc1.weight", (TIMESTEP_FREQS, d), "weight", "normal002"),
        ParamSpec("t_embed.fc1.bias", (d,), "bias", "zeros"),
        ParamSpec("t_embed.fc2.weight", (d, d), "weight", "normal002"),
        ParamSpec("t_embed.fc2.bias", (d,), "bias", "zeros"),
        ParamSpec("y_embed.table", (cfg.num_classes + 1, d), "embedding", "normal002"),
        ParamSpec("adaln_global.weight", (d, 6 * d), "modulation", "zeros"),
        ParamSpec("adaln_global.bias", (6 * d,), "modulation", "zeros"),
    ]
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        for proj in ("q", "k", "v", "o"):
            specs.append(ParamSpec(p + f"attn.{proj}.weight", (d, d), "weight", "fan_in"))
            specs.append(ParamSpec(p + f"attn.{proj}.bias", (d,), "bias", "zeros"))
        specs += [
            ParamSpec(p + "mlp.gate.weight", (d, h), "weight", "fan_in"),
            ParamSpec(p + "mlp.gate.bias", (h,), "bias", "zeros"),
            ParamSpec(p + "mlp.up.weight", (d, h), "weight", "fan_in"),
            ParamSpec(p + "mlp.up.bias", (h,), "bias", "zeros"),
            ParamSpec(p + "mlp.down.weight", (h, d), "weight", "fan_in"),
            ParamSpec(p + "mlp.down.bias", (d,), "bias", "zeros"),
            ParamSpec(p + "adaln_lora.down.weight", (d, r), "modulation", "fan_in"),
            ParamSpec(p + "adaln_lora.down.bias", (r,), "modulation", "zeros"),
            ParamSpec(p + "adaln_lora.up.weight", (r, 6 * d), "modulation", "zeros"),
            ParamSpec(p + "adaln_lora.up.bias", (6 * d,), "modulation", "zeros"),
        ]
    specs += [
        ParamSpec("final.adaln.weight", (d, 2 * d), "final", "zeros"),
        ParamSpec("final.adaln.bias", (2 * d,), "final", "zeros"),
        ParamSpec("final.linear.weight", (d, cfg.token_dim), "final", "zeros"),
        ParamSpec("final.linear.bias", (cfg.token_dim,), "final", "zeros"),
    ]
    return specs


def _init(spec: ParamSpec, rng: np.random.Generator, dtype) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=dtype)
    if spec.init == "normal002":
        return (0.02 * rng.standard_normal(spec.shape)).astype(dtype)
    # variance-preserving, truncated at two standard deviations
    std = 1.0 / math.sqrt(spec.shape[0])
    z = rng.standard_normal(spec.shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2
    return (std * z / 0.8796).astype(dtype)  # 0.8796: std of N(0,1) truncated at +-2


class FiTv2:
    """Named parameter store plus the configuration that shaped it."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        self.specs = {s.name: s for s in parameter_specs(config)}
        self.params: dict[str, Tensor] = {
            s.name: Tensor(_init(s, rng, dtype), requires_grad=True, dtype=dtype, name=s.name)
            for s in self.specs.values()
        }

    def role(self, name: str) -> str:
        return self.specs[name].role

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def astype(self, dtype) -> "FiTv2":
        out = FiTv2.__new__(FiTv2)
        out.config = self.config
        out.specs = self.specs
        out.params = {
            k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype, name=k) for k, v in self.params.items()
        }
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def randomize(self, seed: int = 0, std: float = 0.2) -> None:
        """Overwrite zero-initialised tensors with noise (for gradient checks)."""
        rng = np.random.default_rng(seed)
        for k, p in self.params.items():
            if self.specs[k].init == "zeros":
                p.data = (std * rng.standard_normal(p.shape)).astype(p.dtype)


# ---------------------------------------------------------------------------
# token batches
# ---------------------------------------------------------------------------


@dataclass
class TokenBatch:
    """Padded variable-length token sequences.

    ``mask`` is additive: 0 at valid tokens, ``-inf`` at padding. Valid tokens
    form a prefix of each row and padding sits at position (0, 0).
    """

    tokens: np.ndarray  # [B, L_max, token_dim]
    pos_h: np.ndarray  # [B, L_max] int
    pos_w: np.ndarray  # [B, L_max] int
    mask: np.ndarray  # [B, L_max] float, 0 / -inf
    grids: list[tuple[int, int]] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def max_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.mask == 0

    def validate(self) -> None:
        B, L = self.tokens.shape[:2]
        for arr in (self.pos_h, self.pos_w, self.mask):
            if arr.shape != (B, L):
                raise BatchError(f"per-token arrays must be {(B, L)}, got {arr.shape}")
        for i, ((gh, gw), n) in enumerate(zip(self.grids, self.lengths)):
            if gh * gw != n:
                raise BatchError(f"item {i}: grid {gh}x{gw} does not hold {n} tokens")
            if n > L:
                raise BatchError(f"item {i}: {n} tokens exceed the padded length {L}")
            if int(self.valid[i].sum()) != n:
                raise BatchError(f"item {i}: mask marks {int(self.valid[i].sum())} valid tokens, expected {n}")

    def with_max_len(self, new_len: int, pad_value: float = 0.0) -> "TokenBatch":
        """Same items padded (or trimmed of padding) to ``new_len``."""
        B, L, D = self.tokens.shape
        if new_len < max(self.lengths, default=0):
            raise BatchError(f"cannot shrink below the longest item ({max(self.lengths)})")
        tokens = np.full((B, new_len, D), pad_value, dtype=self.tokens.dtype)
        pos_h = np.zeros((B, new_len), dtype=self.pos_h.dtype)
        pos_w = np.zeros((B, new_len), dtype=self.pos_w.dtype)
        mask = np.full((B, new_len), -np.inf, dtype=self.mask.dtype)
        n = min(L, new_len)
        tokens[:, :n] = np.where(self.valid[:, :n, None], self.tokens[:, :n], pad_value)
        pos_h[:, :n] = self.pos_h[:, :n]
        pos_w[:, :n] = self.pos_w[:, :n]
        mask[:, :n] = self.mask[:, :n]
        return TokenBatch(tokens, pos_h, pos_w, mask, list(self.grids), list(self.lengths))


# ---------------------------------------------------------------------------
# patchify
# ---------------------------------------------------------------------------


def patchify(latent: np.ndarray, p: int) -> tuple[np.ndarray, tuple[int, int]]:
    """[C, H, W] -> ([H/p * W/p, C*p*p], grid); tokens in row-major grid order."""
    C, H, W = latent.shape
    if H % p or W % p:
        raise ShapeError(f"latent {H}x{W} is not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = latent.reshape(C, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, C * p * p).copy(), (gh, gw)


def unpatchify(tokens: np.ndarray, grid: tuple[int, int], p: int, channels: int) -> np.ndarray:
    gh, gw = grid
    if tokens.shape[0] != gh * gw:
        raise ShapeError(f"{tokens.shape[0]} tokens cannot fill a {gh}x{gw} grid")
    if tokens.shape[1] != channels * p * p:
        raise ShapeError(f"token width {tokens.shape[1]} != {channels}*{p}*{p}")
    x = tokens.reshape(gh, gw, channels, p, p).transpose(2, 0, 3, 1, 4)
    return x.reshape(channels, gh * p, gw * p).copy()


def grid_positions(gh: int, gw: int) -> tuple[np.ndarray, np.ndarray]:
    hh, ww = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return hh.reshape(-1), ww.reshape(-1)


def t2i_position_indices(text_len: int, height: int, width: int) -> list[tuple[int, int]]:
    """Text token ``i`` sits at ``(i, i)``; the image grid is offset by ``text_len`` on both axes."""
    if text_len < 0:
        raise ValueError("text length must be >= 0")
    text = [(i, i) for i in range(text_len)]
    image = [(text_len + h, text_len + w) for h in range(height) for w in range(width)]
    return text + image


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------


def timestep_features(t: np.ndarray, dim: int = TIMESTEP_FREQS, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1], ``[cos | sin]`` halves."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * TIME_SCALE * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def condition(model: FiTv2, t: np.ndarray, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Timestep and class embeddings, each ``[B, d]``."""
    P = model.params
    dtype = P["t_embed.fc1.weight"].dtype
    feats = Tensor(timestep_features(t).astype(dtype), dtype=dtype)
    h = nx.silu(nx.linear(feats, P["t_embed.fc1.weight"], P["t_embed.fc1.bias"]))
    t_emb = nx.linear(h, P["t_embed.fc2.weight"], P["t_embed.fc2.bias"])
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() > model.config.num_classes:
        raise ValueError(f"labels must lie in [0, {model.config.num_classes}] (last id = null class)")
    c_emb = nx.take_rows(P["y_embed.table"], labels)
    return t_emb, c_emb


def adaln_modulation(model: FiTv2, cond: Tensor, layer: int, global_term: Tensor | None = None) -> list[Tensor]:
    """Six ``[B, d]`` vectors (shift1, shift2, scale1, scale2, gate1, gate2) for one block.

    ``cond`` is the activated condition ``silu(c + t)``. The shared global
    projection can be passed in precomputed.
    """
    P = model.params
    d = model.config.hidden
    if global_term is None:
        global_term = nx.linear(cond, P["adaln_global.weight"], P["adaln_global.bias"])
    p = f"blocks.{layer}.adaln_lora."
    low = nx.linear(cond, P[p + "down.weight"], P[p + "down.bias"])
    lora = nx.linear(low, P[p + "up.weight"], P[p + "up.bias"])
    return nx.split_lastdim(global_term + lora, [d] * 6)


# ---------------------------------------------------------------------------
# block pieces
# ---------------------------------------------------------------------------


def _modulate(x: Tensor, shift: Tensor, scale_: Tensor, eps: float) -> Tensor:
    B, d = shift.shape
    xn = nx.layernorm(x, eps=eps)
    return xn * (scale_.reshape(B, 1, d) + 1.0) + shift.reshape(B, 1, d)


def masked_attention(
    model: FiTv2,
    layer: int,
    x: Tensor,
    mask: np.ndarray,
    cos: np.ndarray,
    sin: np.ndarray,
    table: RopeTable,
) -> Tensor:
    """Multi-head self-attention over padded tokens; padding keys get ``-inf`` logits.

    ``cos``/``sin`` are ``[B, L, head_dim/2]`` rotation tables for the token
    positions.
    """
    cfg = model.config
    P = model.params
    pre = f"blocks.{layer}.attn."
    B, L, d = x.shape
    H, dk = cfg.heads, cfg.head_dim

    def heads(name):
        y = nx.linear(x, P[pre + name + ".weight"], P[pre + name + ".bias"])
        return y.reshape(B, L, H, dk).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    if cfg.qk_norm:
        q = nx.layernorm(q, eps=cfg.eps)
        k = nx.layernorm(k, eps=cfg.eps)
    q = nx.rotate_pairs(q, cos[:, None], sin[:, None])
    k = nx.rotate_pairs(k, cos[:, None], sin[:, None])
    if table.magnitude != 1.0:
        q = nx.scale(q, table.magnitude)
        k = nx.scale(k, table.magnitude)
    logits = nx.scale(q @ k.transpose(0, 1, 3, 2), table.attention_scale / math.sqrt(dk))
    logits = logits + mask.astype(x.dtype)[:, None, None, :]
    attn = nx.softmax_lastdim(logits)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return nx.linear(out, P[pre + "o.weight"], P[pre + "o.bias"])


def swiglu(model: FiTv2, layer: int, x: Tensor) -> Tensor:
    P = model.params
    pre = f"blocks.{layer}.mlp."
    gate = nx.silu(nx.linear(x, P[pre + "gate.weight"], P[pre + "gate.bias"]))
    up = nx.linear(x, P[pre + "up.weight"], P[pre + "up.bias"])
    return nx.linear(gate * up, P[pre + "down.weight"], P[pre + "down.bias"])


def block_forward(model, layer, x, cond, global_term, mask, cos, sin, table) -> Tensor:
    eps = model.config.eps
    B, d = cond.shape
    shift1, shift2, scale1, scale2, gate1, gate2 = adaln_modulation(model, cond, layer, global_term)
    h = _modulate(x, shift1, scale1, eps)
    x = x + gate1.reshape(B, 1, d) * masked_attention(model, layer, h, mask, cos, sin, table)
    h = _modulate(x, shift2, scale2, eps)
    x = x + gate2.reshape(B, 1, d) * swiglu(model, layer, h)
    return x


def default_table(model: FiTv2, batch: TokenBatch) -> RopeTable:
    cfg = model.config
    height = int(batch.pos_h.max()) + 1
    width = int(batch.pos_w.max()) + 1
    return build_table(cfg.rope_config(), height, width, cfg.rope_base_h, cfg.rope_base_w)


def forward(
    model: FiTv2,
    batch: TokenBatch,
    t,
    labels,
    rope: RopeTable | None = None,
) -> Tensor:
    """Predicted velocity ``[B, L_max, p*p*C]``; outputs at padding are meaningless.

    Without an explicit ``rope`` table every item must fit the model's token
    budget; passing a table (built for extrapolation) lifts that check.
    """
    cfg = model.config
    P = model.params
    if rope is None:
        over = [n for n in batch.lengths if n > cfg.max_tokens]
        if over:
            raise BatchError(f"items with {over} tokens exceed the model budget of {cfg.max_tokens}")
        rope = default_table(model, batch)
    rope.check_positions(batch.pos_h, batch.pos_w)
    dtype = P["x_embed.weight"].dtype
    B, L, _ = batch.tokens.shape
    d = cfg.hidden
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))

    x = nx.linear(Tensor(batch.tokens.astype(dtype), dtype=dtype), P["x_embed.weight"], P["x_embed.bias"])
    t_emb, c_emb = condition(model, t, labels)
    cond = nx.silu(t_emb + c_emb)
    global_term = nx.linear(cond, P["adaln_global.weight"], P["adaln_global.bias"])
    cos, sin = rope.cos_sin(batch.pos_h, batch.pos_w)
    mask = batch.mask
    for i in range(cfg.layers):
        x = block_forward(model, i, x, cond, global_term, mask, cos, sin, rope)

    shift, scale_ = nx.split_lastdim(nx.linear(cond, P["final.adaln.weight"], P["final.adaln.bias"]), [d, d])
    h = _modulate(x, shift, scale_, cfg.eps)
    return nx.linear(h, P["final.linear.weight"], P["final.linear.bias"])
