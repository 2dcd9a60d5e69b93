"""Flexible-resolution data preparation.

At desk scale images *are* latents: ``C``-channel float arrays that get
resized under a token budget, optionally centre-cropped, patchified and packed
into padded :class:`~fitv2.blocks.TokenBatch` objects.
"""

from __future__ import annotations

import math
import os
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import BatchError, TokenBatch, grid_positions, patchify


class DataError(RuntimeError):
    """Dataset missing or malformed on disk."""


@dataclass
class ImageSample:
    pixels: np.ndarray  # [C, H, W]
    label: int
    source_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.source_size is None:
            self.source_size = tuple(self.pixels.shape[1:])

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


# ---------------------------------------------------------------------------
# resizing and cropping
# ---------------------------------------------------------------------------


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a ``[C, H, W]`` array."""
    C, H, W = img.shape
    if (H, W) == (height, width):
        return img.copy()
    lo_h, hi_h, fh = _axis_weights(H, height)
    lo_w, hi_w, fw = _axis_weights(W, width)
    fh = fh[:, None].astype(img.dtype)
    fw = fw[None, :].astype(img.dtype)
    top = img[:, lo_h][:, :, lo_w] * (1 - fw) + img[:, lo_h][:, :, hi_w] * fw
    bot = img[:, hi_h][:, :, lo_w] * (1 - fw) + img[:, hi_h][:, :, hi_w] * fw
    return (top * (1 - fh) + bot * fh).astype(img.dtype)


def _round_half_down(x: float) -> int:
    return int(math.ceil(x - 0.5))


def budget_grid(height: int, width: int, max_tokens: int, p: int) -> tuple[int, int]:
    """Aspect-preserving patch grid for an ``height x width`` image under the budget."""
    k = math.sqrt(max_tokens * p * p / (height * width))
    k = min(k, 1.0)  # never upscale
    gh = max(_round_half_down(height * k / p), 1)
    gw = max(_round_half_down(width * k / p), 1)
    aspect = height / width

    def fits(a, b):
        return (a * b <= max_tokens) & (np.abs((a / b) / aspect - 1) <= 1.0 / np.minimum(a, b) + 1e-12)

    if fits(gh, gw):
        return gh, gw
    # rounding overshot the budget or the aspect: largest grid under the budget
    # whose aspect error stays within one patch of its short side (the floored
    # grid always qualifies unless the image is degenerate)
    a = np.arange(1, gh + 1)[:, None]
    b = np.arange(1, gw + 1)[None, :]
    err = np.abs((a / b) / aspect - 1)
    ok = fits(a, b)
    if not ok.any():
        ok = a * b <= max_tokens
    tokens = np.where(ok, a * b, -1)
    best = tokens == tokens.max()
    i, j = np.unravel_index(np.argmin(np.where(best, err, np.inf)), err.shape)
    return int(i) + 1, int(j) + 1


def resize_to_budget(sample: ImageSample, max_tokens: int, p: int) -> ImageSample | None:
    """Shrink (never enlarge) so the patch grid holds at most ``max_tokens`` tokens.

    Images smaller than one patch are skipped: a ``RuntimeWarning`` is emitted
    and ``None`` returned.
    """
    H, W = sample.size
    if H < p or W < p:
        warnings.warn(f"skipping {H}x{W} sample smaller than one {p}x{p} patch", RuntimeWarning, stacklevel=2)
        return None
    gh, gw = budget_grid(H, W, max_tokens, p)
    pixels = bilinear_resize(sample.pixels, gh * p, gw * p)
    return ImageSample(pixels, sample.label, sample.source_size)


def resize_short_side(img: np.ndarray, size: int) -> np.ndarray:
    _, H, W = img.shape
    k = size / min(H, W)
    return bilinear_resize(img, max(size, round(H * k)), max(size, round(W * k)))


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    """``size x size`` window; an odd margin gives the extra pixel to the top/left margin."""
    _, H, W = img.shape
    if H < size or W < size:
        raise ValueError(f"cannot crop {H}x{W} to {size}x{size}")
    top = (H - size + 1) // 2
    left = (W - size + 1) // 2
    return img[:, top : top + size, left : left + size].copy()


def mixed_preprocess(
    sample: ImageSample,
    size: int,
    rng: np.random.Generator,
    max_tokens: int,
    p: int,
    stats: Counter | None = None,
) -> ImageSample | None:
    """Crop-or-resize for images larger than ``size`` on both sides; resize otherwise.

    ``stats`` (if given) counts the branch taken: ``crop``, ``coin_resize`` or
    ``resize``.
    """
    H, W = sample.size
    if H > size and W > size:
        if rng.random() > 0.5:
            branch = "crop"
            out = ImageSample(center_crop(resize_short_side(sample.pixels, size), size), sample.label, sample.source_size)
        else:
            branch = "coin_resize"
            out = resize_to_budget(sample, max_tokens, p)
    else:
        branch = "resize"
        out = resize_to_budget(sample, max_tokens, p)
    if stats is not None:
        stats[branch] += 1
    return out


def preprocess(sample: ImageSample, mode: str, max_tokens: int, p: int, rng=None, stats=None):
    if mode == "flexible":
        return resize_to_budget(sample, max_tokens, p)
    if mode == "mixed":
        size = int(math.isqrt(max_tokens)) * p
        return mixed_preprocess(sample, size, rng, max_tokens, p, stats)
    raise ValueError(f"unknown preprocessing mode {mode!r}")


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------


def position_map(gh: int, gw: int) -> list[tuple[int, int]]:
    if gh < 1 or gw < 1:
        raise ValueError("grid extents must be positive")
    return [(h, w) for h in range(gh) for w in range(gw)]


def pack_tokens(items: list[tuple[np.ndarray, tuple[int, int]]], max_len: int) -> TokenBatch:
    """Pad ``(tokens [n, D], grid)`` pairs into one batch."""
    if not items:
        raise BatchError("cannot pack an empty batch")
    D = items[0][0].shape[1]
    B = len(items)
    tokens = np.zeros((B, max_len, D), dtype=np.float32)
    pos_h = np.zeros((B, max_len), dtype=np.int64)
    pos_w = np.zeros((B, max_len), dtype=np.int64)
    mask = np.full((B, max_len), -np.inf, dtype=np.float32)
    grids, lengths = [], []
    for i, (tok, grid) in enumerate(items):
        n = tok.shape[0]
        if n > max_len:
            raise BatchError(f"sample {i} has {n} tokens (grid {grid[0]}x{grid[1]}), over the budget of {max_len}")
        tokens[i, :n] = tok
        ph, pw = grid_positions(*grid)
        pos_h[i, :n] = ph
        pos_w[i, :n] = pw
        mask[i, :n] = 0.0
        grids.append(tuple(grid))
        lengths.append(n)
    return TokenBatch(tokens, pos_h, pos_w, mask, grids, lengths)


def pack_batch(samples: list[ImageSample], max_len: int, p: int) -> TokenBatch:
    items = [patchify(s.pixels, p) for s in samples]
    return pack_tokens(items, max_len)


def unpack_batch(batch: TokenBatch) -> list[np.ndarray]:
    return [batch.tokens[i, :n].copy() for i, n in enumerate(batch.lengths)]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# rectangle colour per class, 4 channels
PALETTE = np.array(
    [
        [1.0, -0.6, -0.6, 0.3],  # red
        [-0.6, 1.0, -0.6, 0.3],  # green
        [-0.6, -0.6, 1.0, 0.3],  # blue
        [0.8, 0.8, -0.7, -0.5],  # yellow
        [0.8, -0.7, 0.8, -0.5],  # magenta
        [-0.7, 0.8, 0.8, -0.5],  # cyan
        [0.9, 0.9, 0.9, 0.9],  # white
        [-0.9, -0.9, -0.9, -0.9],  # black
    ],
    dtype=np.float32,
)
BACKGROUND = np.array([-0.2, -0.2, -0.2, 0.0], dtype=np.float32)


def _parse_resolutions(text: str) -> list[tuple[int, int, float]]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        res, _, w = part.partition(":")
        h, _, wd = res.partition("x")
        out.append((int(h), int(wd), float(w) if w else 1.0))
    return out


@dataclass
class DatasetSpec:
    """Recipe for the synthetic rectangles corpus.

    ``resolutions`` lists ``HxW:weight`` entries; weights are normalised.
    """

    num_samples: int = 2048
    num_classes: int = 4
    channels: int = 4
    seed: int = 0
    resolutions: list[tuple[int, int, float]] = field(
        default_factory=lambda: [(16, 16, 0.4), (10, 20, 0.2), (20, 10, 0.2), (8, 24, 0.1), (24, 8, 0.1)]
    )
    texture_amplitude: float = 0.25
    noise_std: float = 0.05
    min_fraction: float = 0.35
    max_fraction: float = 0.7

    def __post_init__(self):
        if self.num_classes > len(PALETTE):
            raise ValueError(f"at most {len(PALETTE)} classes are defined")
        if self.channels != PALETTE.shape[1]:
            raise ValueError(f"synthetic corpus has {PALETTE.shape[1]} channels")

    @property
    def weights(self) -> np.ndarray:
        w = np.array([r[2] for r in self.resolutions], dtype=np.float64)
        return w / w.sum()

    def to_text(self) -> str:
        res = ",".join(f"{h}x{w}:{p:g}" for h, w, p in self.resolutions)
        lines = [
            f"num_samples = {self.num_samples}",
            f"num_classes = {self.num_classes}",
            f"channels = {self.channels}",
            f"seed = {self.seed}",
            f"resolutions = {res}",
            f"texture_amplitude = {self.texture_amplitude!r}",
            f"noise_std = {self.noise_std!r}",
            f"min_fraction = {self.min_fraction!r}",
            f"max_fraction = {self.max_fraction!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetSpec":
        kw: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"malformed dataset spec line: {raw!r}")
            key, val = key.strip(), val.strip()
            if key == "resolutions":
                kw[key] = _parse_resolutions(val)
            elif key in ("num_samples", "num_classes", "channels", "seed"):
                kw[key] = int(val)
            elif key in ("texture_amplitude", "noise_std", "min_fraction", "max_fraction"):
                kw[key] = float(val)
            else:
                raise ValueError(f"unknown dataset spec key {key!r}")
        return cls(**kw)


def synth_image(spec: DatasetSpec, label: int, height: int, width: int, rng: np.random.Generator) -> ImageSample:
    """One textured background with a single axis-aligned rectangle of the class colour."""
    yy = (np.arange(height)[:, None] + 0.5) / height
    xx = (np.arange(width)[None, :] + 0.5) / width
    fy, fx = rng.uniform(0.5, 2.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=(spec.channels, 1, 1))
    texture = spec.texture_amplitude * np.sin(2 * np.pi * (fy * yy + fx * xx)[None] + phase)
    img = BACKGROUND[:, None, None] + texture
    rh = max(1, round(height * rng.uniform(spec.min_fraction, spec.max_fraction)))
    rw = max(1, round(width * rng.uniform(spec.min_fraction, spec.max_fraction)))
    top = int(rng.integers(0, height - rh + 1))
    left = int(rng.integers(0, width - rw + 1))
    img[:, top : top + rh, left : left + rw] = PALETTE[label][:, None, None]
    img = img + spec.noise_std * rng.standard_normal(img.shape)
    return ImageSample(img.astype(np.float32), int(label))


def synth_dataset(spec: DatasetSpec, seed: int | None = None) -> list[ImageSample]:
    """Deterministic given ``spec.seed`` (or the ``seed`` override)."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    weights = spec.weights
    out = []
    for _ in range(spec.num_samples):
        label = int(rng.integers(spec.num_classes))
        h, w, _ = spec.resolutions[int(rng.choice(len(weights), p=weights))]
        out.append(synth_image(spec, label, h, w, rng))
    return out


def object_mask(sample: ImageSample) -> np.ndarray:
    """Pixels whose colour is nearest the class colour rather than the background."""
    col = PALETTE[sample.label][:, None, None]
    d_obj = ((sample.pixels - col) ** 2).sum(axis=0)
    d_bg = ((sample.pixels - BACKGROUND[:, None, None]) ** 2).sum(axis=0)
    return d_obj < d_bg


# ---------------------------------------------------------------------------
# on-disk records
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4i")  # C, H, W, label


def write_sample(path: os.PathLike, sample: ImageSample) -> None:
    C, H, W = sample.pixels.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(C, H, W, sample.label))
        f.write(np.ascontiguousarray(sample.pixels, dtype="<f4").tobytes())


def read_sample(path: os.PathLike) -> ImageSample:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    C, H, W, label = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size :]
    if len(body) != 4 * C * H * W:
        raise DataError(f"{path}: expected {C}x{H}x{W} floats, found {len(body) // 4}")
    pixels = np.frombuffer(body, dtype="<f4").reshape(C, H, W).astype(np.float32)
    return ImageSample(pixels, label)


def write_dataset(directory: os.PathLike, samples: list[ImageSample], spec: DatasetSpec | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        write_sample(directory / f"{sid}.sample", s)
        ids.append(f"{sid} {s.label} {s.pixels.shape[1]} {s.pixels.shape[2]}")
    (directory / "index").write_text("\n".join(ids) + "\n")
    if spec is not None:
        (directory / "dataset.spec").write_text(spec.to_text())


def read_dataset(directory: os.PathLike) -> list[ImageSample]:
    directory = Path(directory)
    index = directory / "index"
    if not index.exists():
        raise DataError(f"no dataset index at {index}")
    out = []
    for line in index.read_text().splitlines():
        if line.strip():
            out.append(read_sample(directory / f"{line.split()[0]}.sample"))
    return out


class TokenDataset:
    """Patchified samples ready for random minibatch packing."""

    def __init__(self, items: list[tuple[np.ndarray, tuple[int, int]]], labels: list[int], max_len: int):
        if len(items) != len(labels):
            raise ValueError("items and labels differ in length")
        if not items:
            raise DataError("dataset is empty")
        self.items = items
        self.labels = np.asarray(labels, dtype=np.int64)
        self.max_len = max_len
        longest = max(t.shape[0] for t, _ in items)
        if longest > max_len:
            raise BatchError(f"dataset holds a {longest}-token item, over the budget of {max_len}")

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def from_samples(
        cls,
        samples: list[ImageSample],
        max_tokens: int,
        p: int,
        mode: str = "flexible",
        rng: np.random.Generator | None = None,
        stats: Counter | None = None,
    ) -> "TokenDataset":
        """Preprocess every sample under the budget then patchify; skipped samples are dropped."""
        rng = np.random.default_rng(0) if rng is None else rng
        items, labels = [], []
        for s in samples:
            out = preprocess(s, mode, max_tokens, p, rng, stats)
            if out is None:
                continue
            items.append(patchify(out.pixels, p))
            labels.append(out.label)
        return cls(items, labels, max_tokens)

    def batch(self, index) -> tuple[TokenBatch, np.ndarray]:
        index = np.asarray(index, dtype=np.int64)
        return pack_tokens([self.items[i] for i in index], self.max_len), self.labels[index].copy()

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> tuple[TokenBatch, np.ndarray]:
        return self.batch(rng.integers(0, len(self.items), size=batch_size))
