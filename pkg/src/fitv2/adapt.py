"""High-resolution post-training with most weights frozen.

The freeze plan keys on each tensor's role tag. Biases, AdaLN modulation
tensors, the patch embedder and the final layer stay trainable. Attention,
SwiGLU and timestep-MLP weight matrices and the class table are frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .blocks import ROLES, FiTv2, ModelConfig, parameter_specs
from .flow import TimestepSampler, TrainConfig, TrainState, init_state, train_loop
from .positional import ntk_base

TRAINABLE_ROLES = frozenset({"bias", "modulation", "patch_embedder", "final"})
FROZEN_ROLES = frozenset({"weight", "embedding"})
assert TRAINABLE_ROLES | FROZEN_ROLES == set(ROLES)


class FreezePlanError(ValueError):
    pass


@dataclass(frozen=True)
class FreezePlan:
    flags: dict[str, bool]
    roles: dict[str, str]
    sizes: dict[str, int]

    @property
    def trainable_names(self) -> set[str]:
        return {k for k, v in self.flags.items() if v}

    @property
    def trainable(self) -> int:
        return sum(self.sizes[k] for k, v in self.flags.items() if v)

    @property
    def total(self) -> int:
        return sum(self.sizes.values())

    @property
    def frozen(self) -> int:
        return self.total - self.trainable

    @property
    def fraction(self) -> float:
        return self.trainable / self.total

    def report(self) -> str:
        lines = [
            f"trainable {self.trainable}",
            f"frozen {self.frozen}",
            f"fraction {self.fraction:.6f}",
        ]
        by_role: dict[str, list[int]] = {}
        for k, role in self.roles.items():
            n, c = by_role.setdefault(role, [0, 0])
            by_role[role] = [n + self.sizes[k], c + 1]
        for role in sorted(by_role):
            n, c = by_role[role]
            state = "trainable" if role in TRAINABLE_ROLES else "frozen"
            lines.append(f"role {role} {state} tensors={c} params={n}")
        for k in self.flags:
            lines.append(f"tensor {k} {self.roles[k]} {'trainable' if self.flags[k] else 'frozen'} {self.sizes[k]}")
        return "\n".join(lines) + "\n"


def classify(role: str) -> bool:
    if role in TRAINABLE_ROLES:
        return True
    if role in FROZEN_ROLES:
        return False
    raise FreezePlanError(f"parameter role {role!r} has no freeze classification")


def build_freeze_plan(model: FiTv2 | ModelConfig, all_trainable: bool = False) -> FreezePlan:
    """Plan for a model, or for a bare config without allocating its weights."""
    specs = parameter_specs(model) if isinstance(model, ModelConfig) else list(model.specs.values())
    flags, roles, sizes = {}, {}, {}
    for spec in specs:
        name = spec.name
        t = classify(spec.role)
        flags[name] = True if all_trainable else t
        roles[name] = spec.role
        sizes[name] = int(np.prod(spec.shape))
    return FreezePlan(flags, roles, sizes)


def high_res_config(cfg: ModelConfig, max_tokens_hi: int) -> ModelConfig:
    """Config for a larger budget with rotary bases shifted by VisionNTK."""
    if max_tokens_hi <= cfg.max_tokens:
        raise ValueError(f"new budget {max_tokens_hi} must exceed the current {cfg.max_tokens}")
    old_len = cfg.train_length
    new_len = math.sqrt(max_tokens_hi)
    s_h = s_w = max(new_len / old_len, 1.0)
    base_h = cfg.rope_base if cfg.rope_base_h is None else cfg.rope_base_h
    base_w = cfg.rope_base if cfg.rope_base_w is None else cfg.rope_base_w
    return replace(
        cfg,
        max_tokens=max_tokens_hi,
        train_len=None,
        rope_base_h=ntk_base(base_h, cfg.head_dim, s_h),
        rope_base_w=ntk_base(base_w, cfg.head_dim, s_w),
    )


def rebudget(model: FiTv2, max_tokens_hi: int) -> FiTv2:
    """Copy of ``model`` under the high-resolution config; weights are copied verbatim."""
    out = model.astype(model.params["x_embed.weight"].dtype)
    out.config = high_res_config(model.config, max_tokens_hi)
    return out


def posttrain(
    model: FiTv2,
    plan: FreezePlan,
    dataset_hi,
    max_tokens_hi: int,
    steps: int,
    tcfg: TrainConfig | None = None,
    sampler: TimestepSampler | None = None,
    seed: int = 0,
    state: TrainState | None = None,
) -> tuple[FiTv2, TrainState]:
    """Fine-tune the plan's trainable tensors at the larger budget.

    Returns a new model; ``model`` itself is left untouched.
    """
    if set(plan.flags) != set(model.params):
        raise FreezePlanError("freeze plan does not cover exactly the model's tensors")
    hi = rebudget(model, max_tokens_hi)
    tcfg = TrainConfig() if tcfg is None else tcfg
    sampler = TimestepSampler() if sampler is None else sampler
    state = init_state(hi, seed) if state is None else state
    frozen = {k: hi.params[k].data.copy() for k, v in plan.flags.items() if not v}
    if steps > 0:
        train_loop(hi, dataset_hi, tcfg, sampler, steps, state=state, trainable=plan.trainable_names)
    for k, before in frozen.items():
        if before.tobytes() != hi.params[k].data.tobytes():
            raise FreezePlanError(f"frozen tensor {k!r} changed during post-training")
    return hi, state
