"""Module containers, named parameters and initializers."""
from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by (seed, parameter name).

    Keying on the name keeps a parameter's initial value independent of which
    other parameters the topology happens to contain.
    """
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(ss))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Parameter container. Attributes holding Parameters, Modules or dicts of
    Modules contribute to :meth:`named_parameters` under dotted names."""

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, dict):
                for sub, mod in value.items():
                    if isinstance(mod, Module):
                        out.update(mod.named_parameters(f"{name}.{sub}."))
        return out

    def parameters(self) -> list[Parameter]:
        named = self.named_parameters()
        return [named[k] for k in sorted(named)]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self


def _init_names(module: Module, prefix: str) -> None:
    for name, p in module.named_parameters(prefix).items():
        p.name = name


def finalize_names(module: Module) -> Module:
    """Write each parameter's dotted path into ``Parameter.name``."""
    _init_names(module, "")
    return module


class Linear(Module):
    """y = x @ weight + bias with ``weight`` stored as [in, out]."""

    def __init__(self, in_dim: int, out_dim: int, *, name: str, seed: int, bias: bool = True,
                 std: float = 0.02, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.in_dim, self.out_dim = in_dim, out_dim
        w = trunc_normal(param_rng(seed, f"{name}.weight"), (in_dim, out_dim), std)
        self.weight = Parameter(w, f"{name}.weight", dtype=dtype)
        if bias:
            self.bias = Parameter(np.zeros(out_dim), f"{name}.bias", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        bias = getattr(self, "bias", None)
        return y + bias if bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, *, name: str, eps: float = 1e-5, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.eps = eps
        self.gain = Parameter(np.ones(dim), f"{name}.gain", dtype=dtype)
        self.bias = Parameter(np.zeros(dim), f"{name}.bias", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)
