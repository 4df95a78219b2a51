"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import DiffValue, backward


class GradCheckError(RuntimeError):
    pass


@dataclass
class ParamGradResult:
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    n_checked: int


@dataclass
class GradReport:
    params: dict[str, ParamGradResult] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.params.values()), default=0.0)

    @property
    def worst_param(self) -> str | None:
        if not self.params:
            return None
        return max(self.params, key=lambda k: self.params[k].max_rel_err)


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    f: Callable[[], DiffValue],
    params: Mapping[str, DiffValue],
    eps: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
    skip: Callable[[str, int], bool] | None = None,
) -> GradReport:
    """Compare ``backward`` gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the current parameter data on every call.
    At most ``max_coords`` coordinates per parameter are checked, chosen by a
    seeded generator. ``skip(name, flat_index)`` can exclude coordinates.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("loss is not finite at the unperturbed point")
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        if skip is not None:
            coords = np.array([c for c in coords if not skip(name, int(c))], dtype=np.int64)
        worst = ParamGradResult(0.0, -1, 0.0, 0.0, len(coords))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(f().data.reshape(-1)[0])
            flat[c] = orig - eps
            fm = float(f().data.reshape(-1)[0])
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite loss while perturbing {name}[{int(c)}]")
            num = (fp - fm) / (2 * eps)
            ana = float(analytic[name].reshape(-1)[c])
            e = rel_err(ana, num)
            if e > worst.max_rel_err or worst.worst_index < 0:
                worst = ParamGradResult(e, int(c), ana, num, len(coords))
        report.params[name] = worst
    return report
