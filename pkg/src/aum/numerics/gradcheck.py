"""Central finite differences as an oracle for the reverse pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class ParamError:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradCheckReport:
    tol_rel: float
    params: list[ParamError] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol_rel

    def worst(self) -> ParamError | None:
        return max(self.params, key=lambda p: p.max_rel_err, default=None)

    def raise_if_failed(self) -> None:
        if self.passed:
            return
        w = self.worst()
        raise AssertionError(
            f"gradient check failed: {w.name}{list(w.worst_index)} "
            f"analytic={w.analytic:.6g} numeric={w.numeric:.6g} "
            f"rel_err={w.max_rel_err:.3g} > {self.tol_rel:g}"
        )

    def __str__(self) -> str:
        lines = [f"{p.name}: max_rel_err={p.max_rel_err:.3g} ({p.checked} coords)" for p in self.params]
        return "\n".join(lines)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    eps: float = 1e-4,
    tol_rel: float = 1e-3,
    atol: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``f()`` with
    ``(f(p+eps) - f(p-eps)) / (2 eps)`` coordinate by coordinate.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, atol)``, so
    ``atol`` acts as an absolute floor for coordinates whose true gradient is
    essentially zero. ``max_coords`` subsamples large parameters.
    Parameters must be 64-bit.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]
    for name, p in named:
        if p.dtype != np.float64:
            raise TypeError(f"{name}: finite-difference checks need float64, got {p.dtype}")
        p.requires_grad = True
        p.zero_grad()

    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in named}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol_rel=tol_rel)
    for name, p in named:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst = ParamError(name, 0.0, (), 0.0, 0.0, len(idx))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(a_flat[i])
            if np.isfinite(a) and np.isfinite(num):
                err = abs(a - num) / max(abs(a), abs(num), atol)
            else:
                err = float("inf")
            if err >= worst.max_rel_err:
                worst = ParamError(
                    name, err, tuple(int(j) for j in np.unravel_index(i, p.shape)), a, num, len(idx)
                )
        report.params.append(worst)
    for _, p in named:
        p.zero_grad()
    return report
