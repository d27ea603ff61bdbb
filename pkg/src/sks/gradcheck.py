"""Central finite-difference verification of tape gradients (64-bit only)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    worst: tuple[str, int] | None
    errors: list[tuple[str, int, float, float, float]] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(numeric))


def sample_entries(named: dict[str, T.Parameter], count: int, seed: int = 0) -> list[tuple[str, int]]:
    """At least one entry from every parameter tensor, the rest uniform over all entries."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x6C0])))
    names = sorted(named)
    picks = [(n, int(rng.integers(named[n].size))) for n in names]
    sizes = np.array([named[n].size for n in names], dtype=np.float64)
    extra = max(0, count - len(picks))
    if extra:
        which = rng.choice(len(names), size=extra, p=sizes / sizes.sum())
        picks += [(names[i], int(rng.integers(named[names[i]].size))) for i in which]
    return picks


def finite_difference_check(model: Module, loss_fn: Callable[[Module], Tensor],
                            param_sample_count: int = 256, h: float = 1e-5, seed: int = 0) -> GradcheckReport:
    """Max over sampled entries of |analytic - numeric| / max(1e-8, |numeric|).

    ``loss_fn(model)`` must rebuild the scalar loss from scratch on each call.
    Runs with per-op NaN/Inf checks so a non-finite intermediate names its op.
    """
    named = model.named_parameters()
    for name, p in named.items():
        if p.dtype != np.float64:
            raise TypeError(f"gradient checks need 64-bit parameters; {name} is {p.dtype}")
    with T.debug_mode(True):
        model.zero_grad()
        with T.Tape():
            loss = loss_fn(model)
        T.backward(loss)
        analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in named.items()}
        report = GradcheckReport(0.0, 0, None)
        with T.no_tape():
            for name, j in sample_entries(named, param_sample_count, seed):
                p = named[name]
                flat = p.data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + h
                f_plus = loss_fn(model).item()
                flat[j] = orig - h
                f_minus = loss_fn(model).item()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2 * h)
                a = float(analytic[name].reshape(-1)[j])
                err = relative_error(a, numeric)
                report.errors.append((name, j, a, numeric, err))
                report.checked += 1
                if err > report.max_rel_error or report.worst is None:
                    report.max_rel_error = max(err, report.max_rel_error)
                    report.worst = (name, j)
    model.zero_grad()
    return report
