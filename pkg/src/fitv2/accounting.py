"""Closed-form parameter and compute accounting.

Counts here are written out term by term from the architecture rather than
derived from :func:`fitv2.blocks.parameter_specs`, so that the two can check
each other.

Compute is reported in multiply-accumulates (one MAC = one FLOP), the
convention of the published model-size table.
"""

from __future__ import annotations

from dataclasses import dataclass

from .blocks import TIMESTEP_FREQS, ModelConfig

PRESETS = {
    "B": dict(layers=15, hidden=768, heads=12),
    "XL": dict(layers=36, hidden=1152, heads=16),
    "3B": dict(layers=40, hidden=2304, heads=24),
}

# imagenet latent setting the presets are reported under
PRESET_COMMON = dict(patch=2, in_channels=4, max_tokens=256, num_classes=1000)

PUBLISHED = {
    "B": dict(params=128e6, gflops=27.3),
    "XL": dict(params=671e6, gflops=147.0),
    "3B": dict(params=3e9, gflops=653.0),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(**{**PRESET_COMMON, **base, **overrides})


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    d, r, h, N = cfg.hidden, cfg.rank, cfg.mlp_hidden, cfg.layers
    tok = cfg.token_dim
    attention = N * (4 * d * d + 4 * d)
    swiglu = N * (3 * d * h + 2 * h + d)
    adaln_lora = N * (d * r + r + r * 6 * d + 6 * d)
    global_adaln = 6 * d * d + 6 * d
    embedders = (tok * d + d) + (TIMESTEP_FREQS * d + d + d * d + d) + (cfg.num_classes + 1) * d
    final = (2 * d * d + 2 * d) + (d * tok + tok)
    out = dict(
        attention=attention,
        swiglu=swiglu,
        adaln_lora=adaln_lora,
        global_adaln=global_adaln,
        embedders=embedders,
        final=final,
    )
    out["total"] = sum(out.values())
    return out


def block_main_weights(cfg: ModelConfig) -> dict[str, int]:
    """Weight matrices of one block, biases excluded."""
    d, r, h = cfg.hidden, cfg.rank, cfg.mlp_hidden
    return dict(attention=4 * d * d, swiglu=3 * d * h, adaln_lora=6 * d * r + r * d)


def fit_v1_block_weights(d: int) -> dict[str, int]:
    """Per-block weights of the first-generation block with full AdaLN (6d x d)."""
    return dict(attention=4 * d * d, swiglu=8 * d * d, adaln=6 * d * d)


def trainable_parameters(cfg: ModelConfig) -> int:
    """Closed-form size of the post-training trainable set.

    Trainable: every bias, every modulation (AdaLN) tensor, the patch
    embedder and the final layer.
    """
    d, r, h, N = cfg.hidden, cfg.rank, cfg.mlp_hidden, cfg.layers
    tok = cfg.token_dim
    biases = N * (4 * d + 2 * h + d) + 2 * d  # attention, swiglu, timestep mlp
    modulation = N * (d * r + r + r * 6 * d + 6 * d) + 6 * d * d + 6 * d
    patch = tok * d + d
    final = (2 * d * d + 2 * d) + (d * tok + tok)
    return biases + modulation + patch + final


def estimate_flops(cfg: ModelConfig, tokens: int, attention_terms: bool = True) -> dict[str, float]:
    """Forward multiply-accumulates for one image of ``tokens`` tokens."""
    d, r, h, N = cfg.hidden, cfg.rank, cfg.mlp_hidden, cfg.layers
    L = tokens
    tok = cfg.token_dim
    proj = N * L * 4 * d * d
    attn = N * 2 * L * L * d if attention_terms else 0  # scores + value mixing
    mlp = N * L * 3 * d * h
    adaln = N * (d * r + r * 6 * d) + 6 * d * d
    embed = L * tok * d + TIMESTEP_FREQS * d + d * d
    final = 2 * d * d + L * d * tok
    out = dict(projections=proj, attention=attn, swiglu=mlp, adaln=adaln, embedders=embed, final=final)
    out["total"] = float(sum(out.values()))
    return out


def training_flops(forward_flops: float, batch_size: int, steps: int) -> float:
    """Forward cost x batch x steps x 3 (forward plus a backward at twice the cost)."""
    return forward_flops * batch_size * steps * 3


def report_rows(names=("B", "XL", "3B"), tokens: int = 256) -> list[dict]:
    rows = []
    for name in names:
        cfg = preset(name)
        params = count_parameters(cfg)["total"]
        gflops = estimate_flops(cfg, tokens)["total"] / 1e9
        rows.append(
            dict(
                model=name,
                layers=cfg.layers,
                hidden=cfg.hidden,
                heads=cfg.heads,
                params=params,
                gflops=gflops,
            )
        )
    return rows


@dataclass(frozen=True)
class SizeCheck:
    name: str
    params: int
    gflops: float
    params_rel_err: float
    gflops_rel_err: float


def compare_to_published(name: str, tokens: int = 256) -> SizeCheck:
    cfg = preset(name)
    p = count_parameters(cfg)["total"]
    g = estimate_flops(cfg, tokens)["total"] / 1e9
    pub = PUBLISHED[name]
    return SizeCheck(name, p, g, abs(p - pub["params"]) / pub["params"], abs(g - pub["gflops"]) / pub["gflops"])
