"""Rotary position embeddings on 2-D token grids and their training-free extrapolation.

Each attention head of width ``D`` is split in half: the first ``D/2`` channels
rotate with the token's row index ``h`` and the second ``D/2`` with its column
index ``w``. Within a half, channels are taken as consecutive pairs and pair
``d`` turns by ``pos * theta_d``. Extrapolation methods either rescale the
positions (PI), enlarge the base (NTK / VisionNTK) or blend per-frequency
between interpolated and original rates (YaRN / VisionYaRN).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Tensor, rotate_pairs

METHODS = ("none", "pi", "ntk", "yarn", "vision_ntk", "vision_yarn")


class RopeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    method: str = "none"
    train_len: float = 16.0
    yarn_alpha: float = 1.0
    yarn_beta: float = 32.0
    attn_scale: bool = False

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 4:
            raise RopeConfigError(f"head_dim must be a positive multiple of 4, got {self.head_dim}")
        if self.base <= 1:
            raise RopeConfigError(f"rotary base must exceed 1, got {self.base}")
        if self.train_len < 1:
            raise RopeConfigError(f"train_len must be >= 1, got {self.train_len}")
        if self.method not in METHODS:
            raise RopeConfigError(f"unknown rope method {self.method!r}; expected one of {METHODS}")
        if not self.yarn_alpha < self.yarn_beta:
            raise RopeConfigError(f"yarn_alpha ({self.yarn_alpha}) must be below yarn_beta ({self.yarn_beta})")


@dataclass(frozen=True)
class ScaleFactors:
    s: float
    s_h: float
    s_w: float


@dataclass(frozen=True)
class RopeTable:
    """Per-axis frequencies plus everything attention needs to apply them.

    ``height``/``width`` bound the integer grid the table was built for.
    Positions are divided by ``pos_scale_h``/``pos_scale_w`` before rotation
    (PI); ``magnitude`` multiplies both queries and keys (YaRN) and
    ``attention_scale`` multiplies the logits.
    """

    freqs_h: np.ndarray
    freqs_w: np.ndarray
    height: int
    width: int
    attention_scale: float = 1.0
    magnitude: float = 1.0
    pos_scale_h: float = 1.0
    pos_scale_w: float = 1.0
    method: str = "none"
    factors: ScaleFactors = field(default_factory=lambda: ScaleFactors(1.0, 1.0, 1.0))

    def __post_init__(self):
        for f in (self.freqs_h, self.freqs_w):
            if np.any(f <= 0) or np.any(np.diff(f) >= 0):
                raise RopeConfigError("rotary frequencies must be positive and strictly decreasing")

    @property
    def head_dim(self) -> int:
        return 2 * (len(self.freqs_h) + len(self.freqs_w))

    def check_positions(self, h, w) -> None:
        h = np.asarray(h)
        w = np.asarray(w)
        if h.size and (h.min() < 0 or h.max() >= self.height or w.min() < 0 or w.max() >= self.width):
            raise IndexError(
                f"positions outside the rope table extent {self.height}x{self.width}: "
                f"h in [{h.min()}, {h.max()}], w in [{w.min()}, {w.max()}]"
            )

    def cos_sin(self, h, w) -> tuple[np.ndarray, np.ndarray]:
        """cos/sin of every rotation angle, shape ``(*pos.shape, head_dim/2)``."""
        h = np.asarray(h, dtype=np.float64) / self.pos_scale_h
        w = np.asarray(w, dtype=np.float64) / self.pos_scale_w
        ang = np.concatenate([h[..., None] * self.freqs_h, w[..., None] * self.freqs_w], axis=-1)
        return np.cos(ang), np.sin(ang)

    def cache(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """cos/sin for every integer row and column the table covers."""
        hh = np.arange(self.height, dtype=np.float64)[:, None] / self.pos_scale_h * self.freqs_h
        ww = np.arange(self.width, dtype=np.float64)[:, None] / self.pos_scale_w * self.freqs_w
        return np.cos(hh), np.sin(hh), np.cos(ww), np.sin(ww)


def base_frequencies(head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Per-axis rotary frequencies ``base ** (-4 d / head_dim)``, length ``head_dim/4``."""
    if head_dim <= 0 or head_dim % 4:
        raise RopeConfigError(f"head_dim must be a positive multiple of 4, got {head_dim}")
    d = np.arange(head_dim // 4, dtype=np.float64)
    return base ** (-4.0 * d / head_dim)


def rotate_1d(x, m, freqs: np.ndarray):
    """Rotate pairs of the last axis of ``x`` by ``m * freqs``.

    Accepts a numpy array or a :class:`Tensor` (result has the same kind).
    """
    ang = np.asarray(m, dtype=np.float64)[..., None] * np.asarray(freqs, dtype=np.float64)
    if isinstance(x, Tensor):
        return rotate_pairs(x, np.cos(ang), np.sin(ang))
    return rotate_pairs(Tensor(np.asarray(x), dtype=np.asarray(x).dtype), np.cos(ang), np.sin(ang)).data


def rotate_2d(x, h, w, table: RopeTable):
    """First half of ``x`` turns with row ``h``, second half with column ``w``."""
    table.check_positions(h, w)
    cos, sin = table.cos_sin(h, w)
    if isinstance(x, Tensor):
        return rotate_pairs(x, cos, sin)
    arr = np.asarray(x)
    return rotate_pairs(Tensor(arr, dtype=arr.dtype), cos, sin).data


def scale_factors(h_test: float, w_test: float, train_len: float) -> ScaleFactors:
    return ScaleFactors(
        s=max(max(h_test, w_test) / train_len, 1.0),
        s_h=max(h_test / train_len, 1.0),
        s_w=max(w_test / train_len, 1.0),
    )


def apply_pi(h, w, s_h: float, s_w: float | None = None):
    """Divide positions by the scale factor(s); fractional results are allowed."""
    s_w = s_h if s_w is None else s_w
    return np.asarray(h, dtype=np.float64) / s_h, np.asarray(w, dtype=np.float64) / s_w


def ntk_base(base: float, head_dim: int, s: float) -> float:
    if head_dim <= 2:
        raise RopeConfigError("NTK scaling needs head_dim > 2")
    return base * s ** (head_dim / (head_dim - 2))


def apply_ntk(config: RopeConfig, s: float) -> float:
    return ntk_base(config.base, config.head_dim, s)


def apply_vision_ntk(config: RopeConfig, s_h: float, s_w: float) -> tuple[float, float]:
    return ntk_base(config.base, config.head_dim, s_h), ntk_base(config.base, config.head_dim, s_w)


def yarn_ramp(r, alpha: float, beta: float):
    """0 below ``alpha``, 1 above ``beta``, linear in between."""
    if not alpha < beta:
        raise RopeConfigError(f"yarn_alpha ({alpha}) must be below yarn_beta ({beta})")
    r = np.asarray(r, dtype=np.float64)
    out = (r - alpha) / (beta - alpha)
    out = np.where(r < alpha, 0.0, out)
    out = np.where(r > beta, 1.0, out)
    return out


def yarn_ratio(config: RopeConfig) -> np.ndarray:
    """Training length measured in wavelengths of each frequency (original base)."""
    theta = base_frequencies(config.head_dim, config.base)
    return config.train_len * theta / (2 * math.pi)


def yarn_magnitude(s: float) -> float:
    return 0.1 * math.log(s) + 1.0


def yarn_blend(config: RopeConfig, s: float) -> np.ndarray:
    theta = base_frequencies(config.head_dim, config.base)
    if s == 1.0:
        return theta
    gamma = yarn_ramp(yarn_ratio(config), config.yarn_alpha, config.yarn_beta)
    return (1 - gamma) * theta / s + gamma * theta


def apply_yarn(config: RopeConfig, s: float) -> tuple[np.ndarray, float]:
    """Blended frequencies and the q/k magnitude multiplier for global scale ``s``."""
    if s < 1:
        raise RopeConfigError(f"scale factor must be >= 1, got {s}")
    return yarn_blend(config, s), yarn_magnitude(s)


def apply_vision_yarn(config: RopeConfig, s_h: float, s_w: float) -> tuple[np.ndarray, np.ndarray]:
    if s_h < 1 or s_w < 1:
        raise RopeConfigError(f"scale factors must be >= 1, got {s_h}, {s_w}")
    return yarn_blend(config, s_h), yarn_blend(config, s_w)


def attention_scale(h_test: float, w_test: float, h_train: float, w_train: float) -> float:
    """``max(1, sqrt(ln(test area / train area)))`` (a negative log floors at 1)."""
    lg = math.log((h_test * w_test) / (h_train * w_train))
    return max(1.0, math.sqrt(max(lg, 0.0)))


def build_table(
    config: RopeConfig,
    height: int,
    width: int,
    base_h: float | None = None,
    base_w: float | None = None,
) -> RopeTable:
    """Frequencies for a ``height x width`` token grid under ``config.method``.

    ``base_h``/``base_w`` override the rotary base per axis (set by
    post-training); extrapolation then starts from those bases.
    """
    base_h = config.base if base_h is None else base_h
    base_w = config.base if base_w is None else base_w
    f = scale_factors(height, width, config.train_len)
    theta_h = base_frequencies(config.head_dim, base_h)
    theta_w = base_frequencies(config.head_dim, base_w)
    mag = 1.0
    ps_h = ps_w = 1.0
    m = config.method
    if m == "pi":
        ps_h = ps_w = f.s
    elif m == "ntk":
        theta_h = base_frequencies(config.head_dim, ntk_base(base_h, config.head_dim, f.s))
        theta_w = base_frequencies(config.head_dim, ntk_base(base_w, config.head_dim, f.s))
    elif m == "vision_ntk":
        theta_h = base_frequencies(config.head_dim, ntk_base(base_h, config.head_dim, f.s_h))
        theta_w = base_frequencies(config.head_dim, ntk_base(base_w, config.head_dim, f.s_w))
    elif m == "yarn":
        theta_h = yarn_blend(replace(config, base=base_h), f.s)
        theta_w = yarn_blend(replace(config, base=base_w), f.s)
        mag = yarn_magnitude(f.s)
    elif m == "vision_yarn":
        theta_h = yarn_blend(replace(config, base=base_h), f.s_h)
        theta_w = yarn_blend(replace(config, base=base_w), f.s_w)
        mag = yarn_magnitude(f.s)
    s_attn = 1.0
    if config.attn_scale:
        s_attn = attention_scale(height, width, config.train_len, config.train_len)
    return RopeTable(
        freqs_h=theta_h,
        freqs_w=theta_w,
        height=int(height),
        width=int(width),
        attention_scale=s_attn,
        magnitude=mag,
        pos_scale_h=ps_h,
        pos_scale_w=ps_w,
        method=m,
        factors=f,
    )
