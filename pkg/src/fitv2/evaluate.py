"""Desk-scale sample quality metrics.

Two statistics compare generated images against fresh draws from the
synthetic generator at the same resolution:

* per-class pixel statistics: mean vector and covariance of all pooled pixel
  values, distance ``|mu_a - mu_b| + |cov_a - cov_b|_F`` averaged over classes;
* energy distance between flattened, 2x average-pooled images.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from .blocks import FiTv2, patchify
from .flow import FlowConfig, ode_sample, sampling_table, validation_loss
from .pipeline import DatasetSpec, ImageSample, TokenDataset, synth_image

Generator = Callable[[int, int, int, int, np.random.Generator], list[np.ndarray]]


def parse_resolution(text: str) -> tuple[int, int]:
    h, sep, w = text.strip().partition("x")
    if not sep:
        raise ValueError(f"resolution {text!r} is not HxW")
    return int(h), int(w)


def pixel_statistics(images: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    px = np.concatenate([im.reshape(im.shape[0], -1) for im in images], axis=1).astype(np.float64)
    return px.mean(axis=1), np.cov(px)


def statistic_distance(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    mu_a, cov_a = pixel_statistics(a)
    mu_b, cov_b = pixel_statistics(b)
    return float(np.linalg.norm(mu_a - mu_b) + np.linalg.norm(cov_a - cov_b, "fro"))


def pool2(img: np.ndarray) -> np.ndarray:
    C, H, W = img.shape
    return img[:, : H // 2 * 2, : W // 2 * 2].reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def _mean_distance(x: np.ndarray, y: np.ndarray, block: int = 2048) -> float:
    total = sum(cdist(x[i : i + block], y).sum() for i in range(0, len(x), block))
    return total / (len(x) * len(y))


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` (V-statistic) for row-sample matrices."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(2 * _mean_distance(x, y) - _mean_distance(x, x) - _mean_distance(y, y))


def flatten_pooled(images: list[np.ndarray]) -> np.ndarray:
    return np.stack([pool2(im).reshape(-1) for im in images])


def oracle_generator(spec: DatasetSpec) -> Generator:
    def gen(label, height, width, n, rng):
        return [synth_image(spec, label, height, width, rng).pixels for _ in range(n)]

    return gen


def model_generator(
    model: FiTv2,
    flow: FlowConfig,
    method: str = "none",
    attn_scale: bool = False,
    batch: int = 16,
    rope_kw: dict | None = None,
) -> Generator:
    p = model.config.patch

    def gen(label, height, width, n, rng):
        grid = (height // p, width // p)
        out = []
        for start in range(0, n, batch):
            k = min(batch, n - start)
            imgs, _ = ode_sample(model, grid, [label] * k, flow, rng, method, attn_scale, rope_kw=rope_kw)
            out += imgs
        return out

    return gen


@dataclass
class ResolutionMetrics:
    resolution: tuple[int, int]
    stat_distance: float
    per_class: list[float]
    energy: float
    stat_floor: float
    energy_floor: float
    val_loss: float | None = None


def evaluate_generator(
    gen: Generator,
    spec: DatasetSpec,
    resolution: tuple[int, int],
    per_class: int,
    seed: int = 0,
) -> ResolutionMetrics:
    """Distances from ``gen`` to reference draws, plus the reference-vs-reference floor."""
    H, W = resolution
    rng_gen = np.random.default_rng(seed)
    rng_ref = np.random.default_rng(seed + 1)
    rng_floor = np.random.default_rng(seed + 2)
    per, per_floor = [], []
    all_gen, all_ref, all_floor = [], [], []
    for c in range(spec.num_classes):
        g = gen(c, H, W, per_class, rng_gen)
        ref = [synth_image(spec, c, H, W, rng_ref).pixels for _ in range(per_class)]
        ref2 = [synth_image(spec, c, H, W, rng_floor).pixels for _ in range(per_class)]
        per.append(statistic_distance(g, ref))
        per_floor.append(statistic_distance(ref2, ref))
        all_gen += g
        all_ref += ref
        all_floor += ref2
    e = energy_distance(flatten_pooled(all_gen), flatten_pooled(all_ref))
    e0 = energy_distance(flatten_pooled(all_floor), flatten_pooled(all_ref))
    return ResolutionMetrics(resolution, float(np.mean(per)), per, e, float(np.mean(per_floor)), e0)


def reference_tokens(spec: DatasetSpec, resolution, per_class: int, p: int, seed: int) -> TokenDataset:
    rng = np.random.default_rng(seed)
    H, W = resolution
    items, labels = [], []
    for c in range(spec.num_classes):
        for _ in range(per_class):
            s: ImageSample = synth_image(spec, c, H, W, rng)
            items.append(patchify(s.pixels, p))
            labels.append(c)
    L = (H // p) * (W // p)
    return TokenDataset(items, labels, L)


def evaluate_model(
    model: FiTv2,
    spec: DatasetSpec,
    resolutions: list[tuple[int, int]],
    flow: FlowConfig,
    per_class: int = 16,
    method: str = "none",
    attn_scale: bool = False,
    seed: int = 0,
    rope_kw: dict | None = None,
) -> list[ResolutionMetrics]:
    """Metrics per resolution; ``method`` applies only to grids over the token budget."""
    cfg = model.config
    out = []
    for res in resolutions:
        grid = (res[0] // cfg.patch, res[1] // cfg.patch)
        over = grid[0] * grid[1] > cfg.max_tokens
        m = method if over else "none"
        a = attn_scale if over else False
        gen = model_generator(model, flow, m, a, rope_kw=rope_kw)
        r = evaluate_generator(gen, spec, res, per_class, seed)
        ds = reference_tokens(spec, res, max(1, per_class // 2), cfg.patch, seed + 3)
        r.val_loss = validation_loss(model, ds, n_items=len(ds), rope=sampling_table(model, grid, m, a, **(rope_kw or {})))
        out.append(r)
    return out


def metrics_csv(rows: list[ResolutionMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["resolution", "metric", "value"])
    for r in rows:
        res = f"{r.resolution[0]}x{r.resolution[1]}"
        if r.val_loss is not None:
            w.writerow([res, "val_loss", f"{r.val_loss:.6g}"])
        w.writerow([res, "stat_distance", f"{r.stat_distance:.6g}"])
        w.writerow([res, "stat_floor", f"{r.stat_floor:.6g}"])
        w.writerow([res, "energy_distance", f"{r.energy:.6g}"])
        w.writerow([res, "energy_floor", f"{r.energy_floor:.6g}"])
    return buf.getvalue()
