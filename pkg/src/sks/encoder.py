"""Hierarchical patch-embedding encoder producing a feature pyramid."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .swin import SwinStage, heads_for
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 224
    in_channels: int = 3
    patch: int = 4
    embed_dim: int = 96
    levels: int = 4
    blocks_per_level: int = 2
    window: int = 7
    mlp_ratio: int = 4
    head_dim: int = 32

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.patch & (self.patch - 1):
            raise ValueError(f"patch {self.patch} must be a power of two")
        side = self.image_size // self.patch
        if side % (2 ** (self.levels - 1)):
            raise ValueError(f"token grid {side} cannot be halved {self.levels - 1} times")
        for level in range(1, self.levels + 1):
            s = self.level_side(level)
            if s > self.window and s % self.window:
                raise ValueError(f"level {level} side {s} not divisible by window {self.window}")
            c = self.level_dim(level)
            if c % heads_for(c, self.head_dim):
                raise ValueError(f"level {level} width {c} not divisible into heads")

    def level_side(self, level: int) -> int:
        return self.image_size // (self.patch * 2 ** (level - 1))

    def level_dim(self, level: int) -> int:
        return self.embed_dim * 2 ** (level - 1)

    def pyramid_shapes(self) -> list[tuple[int, int, int]]:
        return [(self.level_side(l), self.level_side(l), self.level_dim(l)) for l in range(1, self.levels + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


def center_input(image: Tensor) -> Tensor:
    """Map [0, 1] intensities to [-1, 1].

    LayerNorm discards a token's overall scale, so all-positive inputs would
    make bright and dark uniform regions indistinguishable.
    """
    return image * 2.0 - 1.0


def to_patches(image: Tensor, patch: int) -> Tensor:
    """[B, H, W, c] -> [B, H/p, W/p, p*p*c], each patch flattened row-major."""
    b, h, w, c = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    x = T.reshape(image, (b, h // patch, patch, w // patch, patch, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h // patch, w // patch, patch * patch * c))


class PatchEmbed(Module):
    def __init__(self, patch: int, in_channels: int, dim: int, *, name: str, seed: int, dtype=None):
        self.patch = patch
        self.proj = Linear(patch * patch * in_channels, dim, name=f"{name}.proj", seed=seed, dtype=dtype)

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim == 3:
            y = self.proj(to_patches(T.reshape(image, (1,) + image.shape), self.patch))
            return T.reshape(y, y.shape[1:])
        return self.proj(to_patches(image, self.patch))


def merge_groups(x: Tensor) -> Tensor:
    """Concatenate each 2x2 token neighbourhood: [B, H, W, C] -> [B, H/2, W/2, 4C]."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"patch merging needs even extents, got {h}x{w}")
    x = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h // 2, w // 2, 4 * c))


class PatchMerge(Module):
    """2x2 regroup -> LayerNorm(4C) -> Linear(4C -> 2C)."""

    def __init__(self, dim: int, *, name: str, seed: int, dtype=None):
        self.norm = LayerNorm(4 * dim, name=f"{name}.norm", dtype=dtype)
        self.proj = Linear(4 * dim, 2 * dim, name=f"{name}.proj", seed=seed, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        y = self.proj(self.norm(merge_groups(x)))
        return T.reshape(y, y.shape[1:]) if squeeze else y


class EncoderLevel(SwinStage):
    """Optional patch merge (levels >= 2) followed by the level's Swin blocks."""

    def __init__(self, cfg: ModelConfig, level: int, *, name: str, seed: int, dtype=None):
        dim = cfg.level_dim(level)
        if level > 1:
            self.merge = PatchMerge(cfg.level_dim(level - 1), name=f"{name}.merge", seed=seed, dtype=dtype)
        super().__init__(dim, cfg.level_side(level), heads_for(dim, cfg.head_dim), cfg.window,
                         cfg.blocks_per_level, name=name, seed=seed, mlp_ratio=cfg.mlp_ratio, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if hasattr(self, "merge"):
            x = self.merge(x)
        return super().__call__(x)


class Encoder(Module):
    """Patch embedding followed by ``levels`` stages of Swin block pairs,
    with patch merging between stages."""

    def __init__(self, cfg: ModelConfig, *, name: str, seed: int, dtype=None):
        cfg.validate()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.patch, cfg.in_channels, cfg.embed_dim, name=f"{name}.embed",
                                seed=seed, dtype=dtype)
        for level in range(1, cfg.levels + 1):
            setattr(self, f"level{level}", EncoderLevel(cfg, level, name=f"{name}.level{level}",
                                                        seed=seed, dtype=dtype))

    def level(self, level: int) -> EncoderLevel:
        return getattr(self, f"level{level}")

    def __call__(self, image: Tensor,
                 inject: Callable[[int, Tensor], Tensor] | None = None) -> list[Tensor]:
        """Return the pyramid [f1, ..., fL].

        ``inject(level, f)`` may replace each level's output before it is
        merged into the next level (the feature-share skip uses this).
        """
        x = self.embed(center_input(image))
        feats = []
        for level in range(1, self.cfg.levels + 1):
            x = self.level(level)(x)
            if inject is not None:
                x = inject(level, x)
            feats.append(x)
        return feats


def encoder_forward(encoder: Encoder, image: Tensor) -> list[Tensor]:
    return encoder(image)


class ClassifierHead(Module):
    """Mean-pool the deepest feature map over tokens, then project to 2 logits."""

    def __init__(self, dim: int, *, name: str, seed: int, dtype=None):
        self.proj = Linear(dim, 2, name=f"{name}.proj", seed=seed, dtype=dtype)

    def __call__(self, f_last: Tensor) -> Tensor:
        """``[B, h, w, C]`` -> ``[B, 2]``; an unbatched ``[h, w, C]`` map gives ``[2]``."""
        if f_last.ndim == 3:
            out = self(T.reshape(f_last, (1,) + f_last.shape))
            return T.reshape(out, (2,))
        return self.proj(T.mean(f_last, axis=(1, 2)))
