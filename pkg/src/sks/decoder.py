"""Patch-expanding segmentation decoder and mask head."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .fusion import SkipRouting
from .nn import Linear, Module
from .tensor import Tensor


def expand_groups(x: Tensor, out_dim: int) -> Tensor:
    """[B, h, w, 4*o] -> [B, 2h, 2w, o]; inverse of the 2x2 merge regroup."""
    b, h, w, c = x.shape
    if c != 4 * out_dim:
        raise ValueError(f"cannot rearrange {c} channels into 2x2 blocks of {out_dim}")
    x = T.reshape(x, (b, h, w, 2, 2, out_dim))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, 2 * h, 2 * w, out_dim))


class PatchExpand(Module):
    """Linear C -> 4*out (2C for the default out = C/2), then a 2x2 pixel rearrangement."""

    def __init__(self, dim: int, *, name: str, seed: int, out_dim: int | None = None, dtype=None):
        if out_dim is None:
            if dim % 2:
                raise ValueError(f"patch expanding needs an even channel count, got {dim}")
            out_dim = dim // 2
        self.dim, self.out_dim = dim, out_dim
        self.proj = Linear(dim, 4 * out_dim, name=f"{name}.proj", seed=seed, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        y = expand_groups(self.proj(x), self.out_dim)
        return T.reshape(y, y.shape[1:]) if squeeze else y


class MaskHead(Module):
    """log2(patch) patch-expand steps (channels halve, floor 4), then a 1-logit projection."""

    def __init__(self, dim: int, patch: int, *, name: str, seed: int, dtype=None):
        steps = int(round(np.log2(patch)))
        if 2 ** steps != patch:
            raise ValueError(f"patch {patch} is not a power of two")
        self.steps = steps
        c = dim
        for i in range(steps):
            out = max(c // 2, 4)
            setattr(self, f"expand{i + 1}", PatchExpand(c, name=f"{name}.expand{i + 1}", seed=seed,
                                                         out_dim=out, dtype=dtype))
            c = out
        self.proj = Linear(c, 1, name=f"{name}.proj", seed=seed, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.steps):
            x = getattr(self, f"expand{i + 1}")(x)
        return self.proj(x)


class Decoder(Module):
    """Upsampling path mirroring the encoder.

    For levels L-1 .. 1: d = expand(d); d = fuse(d, rcs_λ); d = fuse(d, prompt_λ),
    each fusion present only when its skip is enabled.
    """

    def __init__(self, level_dims: list[int], patch: int, *, seed: int, dtype=None):
        self.n_levels = len(level_dims)
        for level in range(self.n_levels - 1, 0, -1):
            setattr(self, f"expand{level}", PatchExpand(level_dims[level], name=f"decoder.expand{level}",
                                                         seed=seed, dtype=dtype))
        self.head = MaskHead(level_dims[0], patch, name="decoder.head", seed=seed, dtype=dtype)

    def __call__(self, bottleneck: Tensor, rcs: dict[int, Tensor], prompt: dict[int, Tensor],
                 routing: SkipRouting, return_levels: bool = False):
        d = bottleneck
        levels = {}
        for level in range(self.n_levels - 1, 0, -1):
            d = getattr(self, f"expand{level}")(d)
            if level in rcs:
                d = routing.rcs.get(level)(d, rcs[level])
            if level in prompt:
                d = routing.prompt.get(level)(d, prompt[level])
            levels[level] = d
        logits = self.head(d)
        return (logits, levels) if return_levels else logits


def predict_mask(logits) -> np.ndarray:
    """Binary mask: sigmoid(logit) > 0.5, i.e. logit > 0 (a logit of exactly 0 maps to 0)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (data > 0).astype(np.uint8)
