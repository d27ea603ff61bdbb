"""Pairwise feature fusion and the three skip pathways between branches.

Feature-share skip (FSS): coarse pyramid fused into each fine encoder level.
Resolution-compensation skip (RCS): fused encoder levels routed to the decoder.
Prompt skip: raw coarse pyramid levels routed to the decoder.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import Module, param_rng
from .tensor import Parameter, Tensor


class ConfigError(ValueError):
    """Raised when a requested routing is impossible under the ablation flags."""


@dataclass
class AblationFlags:
    no_coarse_branch: bool = False
    no_prompt_skip: bool = False
    no_rcs: bool = False

    @property
    def coarse(self) -> bool:
        return not self.no_coarse_branch

    @property
    def fss(self) -> bool:
        return not self.no_coarse_branch

    @property
    def prompt(self) -> bool:
        return not (self.no_coarse_branch or self.no_prompt_skip)

    @property
    def rcs(self) -> bool:
        return not self.no_rcs

    def label(self) -> str:
        if self.no_coarse_branch:
            return "w/o coarse-grain branch"
        if self.no_prompt_skip:
            return "w/o prompt skip"
        if self.no_rcs:
            return "w/o RCS"
        return "SKS (full)"

    def to_dict(self) -> dict:
        return asdict(self)


class FusionLayer(Module):
    """f_fuse = W (f_a ⊕ f_b) + b with W of shape [C, 2C], applied at every position.

    Initialized to W = [I | 0] + N(0, 0.01²), b = 0 so the first operand passes through.
    """

    def __init__(self, dim: int, *, name: str, seed: int, level: int = 0, dtype=None, noise: float = 0.01):
        dtype = dtype or T.get_default_dtype()
        self.dim, self.level = dim, level
        w = np.concatenate([np.eye(dim), np.zeros((dim, dim))], axis=1)
        w = w + noise * param_rng(seed, f"{name}.weight").standard_normal(w.shape)
        self.weight = Parameter(w, f"{name}.weight", dtype=dtype)
        self.bias = Parameter(np.zeros(dim), f"{name}.bias", dtype=dtype)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        return fuse(a, b, self)


def fuse(f_a: Tensor, f_b: Tensor, layer: FusionLayer) -> Tensor:
    if f_a.shape != f_b.shape:
        raise ValueError(f"fuse: operand shapes differ: {f_a.shape} vs {f_b.shape}")
    if f_a.shape[-1] != layer.dim:
        raise ValueError(f"fuse: operands have {f_a.shape[-1]} channels, layer expects {layer.dim}")
    cat = T.concat_last(f_a, f_b)
    return T.matmul(cat, T.transpose(layer.weight, (1, 0))) + layer.bias


class SkipRouting(Module):
    """Per-level fusion layers for every enabled skip site.

    Disabled sites own no parameters, so checkpoints reflect the topology.
    """

    def __init__(self, level_dims: list[int], flags: AblationFlags, *, seed: int, dtype=None):
        self.flags = flags
        self.n_levels = len(level_dims)
        if flags.fss:
            self.fss = _LevelFusions(level_dims, "skip.fss", seed, dtype)
        if flags.rcs:
            self.rcs = _LevelFusions(level_dims[:-1], "skip.rcs", seed, dtype)
        if flags.prompt:
            self.prompt = _LevelFusions(level_dims[:-1], "skip.prompt", seed, dtype)

    def fss_level(self, level: int, fine: Tensor, coarse: Tensor | None) -> Tensor:
        if not self.flags.fss or coarse is None:
            return fine
        return self.fss.get(level)(fine, coarse)

    def fss_apply(self, coarse: list[Tensor] | None, fine: list[Tensor]) -> list[Tensor]:
        """Level-wise fuse(fine_λ, coarse_λ); identity when the coarse branch is off."""
        if coarse is None or not self.flags.fss:
            return list(fine)
        if len(coarse) != len(fine):
            raise ValueError("fss_apply: pyramids differ in depth")
        return [self.fss_level(i + 1, f, c) for i, (f, c) in enumerate(zip(fine, coarse))]

    def rcs_route(self, fused: list[Tensor]) -> tuple[dict[int, Tensor], Tensor]:
        """Return ({level: skip feature} for levels 1..L-1, bottleneck f_L)."""
        skips = {i + 1: f for i, f in enumerate(fused[:-1])} if self.flags.rcs else {}
        return skips, fused[-1]

    def prompt_route(self, coarse: list[Tensor] | None) -> dict[int, Tensor]:
        if not self.flags.prompt:
            return {}
        return prompt_route(coarse, self.flags)


def prompt_route(coarse: list[Tensor] | None, flags: AblationFlags) -> dict[int, Tensor]:
    """Expose coarse levels 1..L-1 to the decoder.

    Raises ConfigError when the coarse branch is ablated.
    """
    if flags.no_coarse_branch or coarse is None:
        raise ConfigError("prompt skip needs the coarse branch, which is disabled")
    if flags.no_prompt_skip:
        return {}
    return {i + 1: f for i, f in enumerate(coarse[:-1])}


class _LevelFusions(Module):
    def __init__(self, dims: list[int], name: str, seed: int, dtype):
        for i, dim in enumerate(dims):
            level = i + 1
            setattr(self, f"level{level}", FusionLayer(dim, name=f"{name}.level{level}", seed=seed,
                                                       level=level, dtype=dtype))

    def get(self, level: int) -> FusionLayer:
        return getattr(self, f"level{level}")
