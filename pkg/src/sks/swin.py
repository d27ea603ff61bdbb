"""Window / shifted-window multi-head self-attention and Swin transformer blocks.

Feature maps are channels-last: ``[B, H, W, C]`` (a 3-d ``[H, W, C]`` map is
accepted wherever noted and treated as a batch of one).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param_rng, trunc_normal
from .tensor import Parameter, Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowConfig:
    window: int
    shift: int
    heads: int

    def __post_init__(self):
        if self.window < 1 or self.heads < 1:
            raise ValueError(f"invalid window config {self}")
        if not 0 <= self.shift < self.window:
            raise ValueError(f"shift {self.shift} must lie in [0, {self.window})")


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected a [B,H,W,C] or [H,W,C] feature map, got {x.shape}")
    return x, False


def window_partition(x: Tensor, window: int) -> Tensor:
    """Split a feature map into non-overlapping ``window x window`` tiles.

    Returns ``[B * nW, window**2, C]`` with tiles and their tokens in row-major order.
    """
    x, _ = _as_batched(x)
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"feature map {h}x{w} is not divisible by window {window}")
    x = T.reshape(x, (b, h // window, window, w // window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * (h // window) * (w // window), window * window, c))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`; returns ``[B, h, w, C]``."""
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // window) * (w // window))
    x = T.reshape(windows, (b, h // window, w // window, window, window, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, h, w, c))


def cyclic_shift(x: Tensor, offset: int) -> Tensor:
    """Toroidal roll of the spatial axes by ``(-offset, -offset)``."""
    if offset == 0:
        return x
    return T.roll(x, (-offset, -offset), axis=(-3, -2))


def cyclic_unshift(x: Tensor, offset: int) -> Tensor:
    if offset == 0:
        return x
    return T.roll(x, (offset, offset), axis=(-3, -2))


def relative_position_index(window: int) -> np.ndarray:
    """``[M², M²]`` map from token pairs to rows of a ``(2M-1)²`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def region_labels(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Label each position of the shifted map with the pre-shift region it came from."""
    labels = np.zeros((h, w), dtype=np.int64)
    spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    n = 0
    for hs in spans:
        for ws in spans:
            labels[hs, ws] = n
            n += 1
    return labels


def shifted_window_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive attention mask ``[nW, M², M²]`` for shifted windows.

    Pairs of tokens whose positions came from different regions before the
    cyclic shift get ``MASK_VALUE``; same-region pairs get 0.
    """
    n_windows = (h // window) * (w // window)
    if shift == 0:
        return np.zeros((n_windows, window * window, window * window))
    labels = region_labels(h, w, window, shift)
    tiles = labels.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    tiles = tiles.reshape(n_windows, window * window)
    diff = tiles[:, :, None] != tiles[:, None, :]
    return np.where(diff, MASK_VALUE, 0.0)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
              mask: Tensor | np.ndarray | None = None, return_weights: bool = False):
    """SoftMax(Q Kᵀ / sqrt(d) + B + mask) V over the last two axes.

    ``bias`` and ``mask`` broadcast against the ``[..., N, N]`` score matrix.
    """
    n, d = q.shape[-2:]
    if k.shape[-2:] != (n, d) or v.shape[-2] != n:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = T.matmul(q, kt) * (1.0 / math.sqrt(d))
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        scores = scores + T.as_tensor(mask, like=scores)
    weights = T.softmax_rows(scores)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


class RelativePositionBias(Module):
    def __init__(self, window: int, heads: int, *, name: str, seed: int, dtype=None):
        self.window, self.heads = window, heads
        table = trunc_normal(param_rng(seed, f"{name}.table"), ((2 * window - 1) ** 2, heads), 0.02)
        self.table = Parameter(table, f"{name}.table", dtype=dtype or T.get_default_dtype())
        self.index_map = relative_position_index(window)

    def __call__(self) -> Tensor:
        n = self.window * self.window
        b = T.take_rows(self.table, self.index_map.reshape(-1))
        return T.transpose(T.reshape(b, (n, n, self.heads)), (2, 0, 1))


class WindowAttention(Module):
    """Multi-head self-attention inside windows with a learned relative position bias."""

    def __init__(self, dim: int, heads: int, window: int, *, name: str, seed: int, dtype=None):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.window = dim, heads, window
        self.wq = Linear(dim, dim, name=f"{name}.wq", seed=seed, bias=False, dtype=dtype)
        self.wk = Linear(dim, dim, name=f"{name}.wk", seed=seed, bias=False, dtype=dtype)
        self.wv = Linear(dim, dim, name=f"{name}.wv", seed=seed, bias=False, dtype=dtype)
        self.wo = Linear(dim, dim, name=f"{name}.wo", seed=seed, bias=False, dtype=dtype)
        self.rel_bias = RelativePositionBias(window, heads, name=f"{name}.rel_bias", seed=seed, dtype=dtype)

    def _heads(self, x: Tensor) -> Tensor:
        bw, n, _ = x.shape
        return T.transpose(T.reshape(x, (bw, n, self.heads, self.dim // self.heads)), (0, 2, 1, 3))

    def __call__(self, windows: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``windows``: ``[B*nW, N, C]``; ``mask``: ``[nW, N, N]`` or None."""
        bw, n, c = windows.shape
        q = self._heads(self.wq(windows))
        k = self._heads(self.wk(windows))
        v = self._heads(self.wv(windows))
        bias = self.rel_bias()
        if mask is not None:
            nw = mask.shape[0]
            # [B, nW, 1, N, N] so the same mask applies to every image and head
            mask = np.asarray(mask)[None, :, None].repeat(bw // nw, axis=0).reshape(bw, 1, n, n)
        out = attention(q, k, v, bias, mask)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (bw, n, c))
        return self.wo(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, *, name: str, seed: int, dtype=None):
        self.fc1 = Linear(dim, hidden, name=f"{name}.fc1", seed=seed, dtype=dtype)
        self.fc2 = Linear(hidden, dim, name=f"{name}.fc2", seed=seed, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def effective_window(side: int, window: int, shift: int) -> tuple[int, int]:
    """Clamp the window to maps no larger than it; such maps are never shifted."""
    if side <= window:
        return side, 0
    if side % window:
        raise ValueError(f"feature map side {side} is not divisible by window {window}")
    return window, shift


class SwinBlock(Module):
    """Pre-norm block: x + (S)W-MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, resolution: int, heads: int, window: int, shift: int, *,
                 name: str, seed: int, mlp_ratio: int = 4, dtype=None):
        window, shift = effective_window(resolution, window, shift)
        self.config = WindowConfig(window, shift, heads)
        self.resolution = resolution
        self.norm1 = LayerNorm(dim, name=f"{name}.norm1", dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, name=f"{name}.attn", seed=seed, dtype=dtype)
        self.norm2 = LayerNorm(dim, name=f"{name}.norm2", dtype=dtype)
        self.mlp = Mlp(dim, dim * mlp_ratio, name=f"{name}.mlp", seed=seed, dtype=dtype)
        self.mask = shifted_window_mask(resolution, resolution, window, shift) if shift else None

    def attend(self, x: Tensor) -> Tensor:
        _, h, w, _ = x.shape
        m, s = self.config.window, self.config.shift
        y = cyclic_shift(x, s)
        y = self.attn(window_partition(y, m), self.mask)
        return cyclic_unshift(window_reverse(y, m, h, w), s)

    def __call__(self, x: Tensor) -> Tensor:
        x, squeeze = _as_batched(x)
        if x.shape[1] != self.resolution or x.shape[2] != self.resolution:
            raise ValueError(f"block built for {self.resolution}x{self.resolution}, got {x.shape}")
        x = x + self.attend(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return T.reshape(x, x.shape[1:]) if squeeze else x


class SwinStage(Module):
    """``depth`` Swin blocks alternating regular and shifted windows (shift = M // 2)."""

    def __init__(self, dim: int, resolution: int, heads: int, window: int, depth: int = 2, *,
                 name: str, seed: int, mlp_ratio: int = 4, dtype=None):
        self.depth = depth
        for i in range(depth):
            shift = 0 if i % 2 == 0 else window // 2
            setattr(self, f"block{i + 1}", SwinBlock(dim, resolution, heads, window, shift,
                                                     name=f"{name}.block{i + 1}", seed=seed,
                                                     mlp_ratio=mlp_ratio, dtype=dtype))

    def blocks(self) -> list[SwinBlock]:
        return [getattr(self, f"block{i + 1}") for i in range(self.depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks():
            x = block(x)
        return x


def swin_block_pair(x: Tensor, stage: SwinStage) -> Tensor:
    """W-MSA block followed by SW-MSA block."""
    return stage(x)


def heads_for(dim: int, head_dim: int = 32) -> int:
    return max(1, dim // head_dim)
