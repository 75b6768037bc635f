"""Central finite-difference verification of analytic gradients.

The checker treats the program under test as a black box ``build`` that maps
a named parameter dict to a freshly constructed graph and scalar loss node.
Analytic gradients come from one reverse pass; numerical gradients perturb
one coordinate at a time by ``±step`` and difference the loss values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node

# Coordinates where both gradients are below this floor are compared on an
# absolute scale; finite differencing is noise-limited there.
_REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    tol: float
    step: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self):
        lines = [f"grad check: step={self.step:g} tol={self.tol:g} "
                 f"max_rel_err={self.max_error:.3e} -> "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for name in sorted(self.per_param):
            lines.append(f"  {name}: {self.per_param[name]:.3e}")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), _REL_FLOOR)


def grad_check(build, params: dict[str, np.ndarray], step: float = 1e-5,
               tol: float = 1e-4, max_coords_per_param: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic and central finite-difference gradients.

    ``build(params)`` must return ``(Graph, loss_node)`` for the given
    parameter values and be deterministic; two evaluations that disagree
    bitwise are rejected.  When ``max_coords_per_param`` is set, at most
    that many seeded-random coordinates are differenced per parameter
    (every parameter still gets a report entry).
    """
    if not (0.0 < step <= 1e-3):
        raise ValueError(f"step must be in (0, 1e-3], got {step}")

    def loss_value(p) -> float:
        _, node = build(p)
        return float(node.value)

    base = loss_value(params)
    if loss_value(params) != base:
        raise ValueError("build is not deterministic: two evaluations differ")

    graph, loss = build(params)
    analytic = graph.backward(loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, step=step)
    for name in sorted(params):
        value = params[name]
        grad = analytic[name].reshape(-1)
        n = value.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        work = dict(params)
        for i in coords:
            bumped = value.reshape(-1).copy()
            bumped[i] += step
            work[name] = bumped.reshape(value.shape)
            lp = loss_value(work)
            bumped[i] -= 2 * step
            work[name] = bumped.reshape(value.shape)
            lm = loss_value(work)
            fd = (lp - lm) / (2.0 * step)
            worst = max(worst, _rel_err(float(grad[i]), fd))
        work[name] = value
        report.per_param[name] = worst
    return report


__all__ = ["grad_check", "GradCheckReport"]
