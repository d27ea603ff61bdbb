"""The dual-branch SKS segmentation model."""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .decoder import Decoder
from .encoder import ClassifierHead, Encoder, ModelConfig
from .fusion import AblationFlags, SkipRouting
from .nn import Module, finalize_names
from .tensor import Tensor


@dataclass
class ModelOutput:
    mask_logits: Tensor                  # [B, H, W, 1]
    coarse_logits: Tensor | None         # [B, 2]
    coarse: list[Tensor] | None
    fused: list[Tensor]


class SKSModel(Module):
    """Coarse (classification) and fine encoders joined by FSS, with an RCS/prompt-conditioned decoder.

    Parameter prefixes: ``coarse.*``, ``fine.*``, ``skip.{fss,rcs,prompt}.*``, ``decoder.*``.
    """

    def __init__(self, cfg: ModelConfig, flags: AblationFlags | None = None, *, seed: int = 0, dtype=None):
        cfg.validate()
        self.cfg = cfg
        self.flags = flags or AblationFlags()
        dtype = dtype or T.get_default_dtype()
        dims = [cfg.level_dim(l) for l in range(1, cfg.levels + 1)]
        if self.flags.coarse:
            self.coarse = CoarseBranch(cfg, seed=seed, dtype=dtype)
        self.fine = Encoder(cfg, name="fine", seed=seed, dtype=dtype)
        self.skip = SkipRouting(dims, self.flags, seed=seed, dtype=dtype)
        self.decoder = Decoder(dims, cfg.patch, seed=seed, dtype=dtype)
        finalize_names(self)

    @property
    def has_coarse(self) -> bool:
        return hasattr(self, "coarse")

    def coarse_parameters(self):
        return self.coarse.parameters() if self.has_coarse else []

    def seg_parameters(self):
        """Everything optimized in the segmentation stage (i.e. all but the coarse branch)."""
        named = self.named_parameters()
        return [named[k] for k in sorted(named) if not k.startswith("coarse.")]

    def forward_coarse(self, image: Tensor) -> tuple[list[Tensor], Tensor]:
        if not self.has_coarse:
            raise RuntimeError("model was built without a coarse branch")
        return self.coarse(image)

    def __call__(self, image: Tensor) -> ModelOutput:
        coarse_feats = coarse_logits = None
        if self.has_coarse:
            coarse_feats, coarse_logits = self.coarse(image)
        fused = self.fine(image, inject=lambda lvl, f: self.skip.fss_level(
            lvl, f, coarse_feats[lvl - 1] if coarse_feats is not None else None))
        rcs, bottleneck = self.skip.rcs_route(fused)
        prompt = self.skip.prompt_route(coarse_feats)
        logits = self.decoder(bottleneck, rcs, prompt, self.skip)
        return ModelOutput(logits, coarse_logits, coarse_feats, fused)


class CoarseBranch(Module):
    """Coarse encoder plus classification head; trained alone in stage 1.

    Standalone, its parameters are addressed with the ``coarse.`` prefix.
    """

    PREFIX = "coarse."

    def __init__(self, cfg: ModelConfig, *, seed: int, dtype=None):
        self.encoder = Encoder(cfg, name="coarse.encoder", seed=seed, dtype=dtype)
        self.head = ClassifierHead(cfg.level_dim(cfg.levels), name="coarse.head", seed=seed, dtype=dtype)

    def __call__(self, image: Tensor) -> tuple[list[Tensor], Tensor]:
        feats = self.encoder(image)
        return feats, self.head(feats[-1])
