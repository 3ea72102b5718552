"""Central finite-difference gradient checks for tensor programs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Graph, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # name -> max relative error
    violations: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        lines = [f"{k}: {v:.3e}" for k, v in self.errors.items()]
        status = "ok" if self.ok else f"violations: {', '.join(self.violations)}"
        return "\n".join(lines + [status])


def _value(f):
    with no_grad():
        return float(np.asarray(f().data, dtype=np.float64).sum())


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, tol: float = 1e-4,
               names: Sequence[str] | None = None, max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    The relative error of a parameter is ``max|analytic - fd| / (max|fd| + 1e-12)``
    over the checked coordinates. With ``max_coords`` only a seeded random
    subset of each parameter's entries is perturbed.
    """
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
    with Graph():
        out = f()
        backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for p, name, ga in zip(params, names, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = _value(f)
            flat[i] = orig - step
            fm = _value(f)
            flat[i] = orig
            fd[j] = (fp - fm) / (2 * step)
        an = ga.reshape(-1)[idx]
        err = float(np.max(np.abs(an - fd)) / (np.max(np.abs(fd)) + 1e-12)) if len(idx) else 0.0
        report.errors[name] = err
        if err > tol:
            report.violations.append(name)
        p.grad = None
    return report
