"""Central-difference verification of recorded backward passes.

The checker perturbs a seeded random subset of entries in each named
parameter (checking every entry of a million-parameter net would take
hours) and compares the numeric slope against the analytic gradient.
Run it on float64 parameters; float32 round-off drowns the comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import backward


@dataclass
class ParamCheck:
    """Worst relative error observed over the sampled entries of one tensor."""

    name: str
    max_rel_err: float
    n_checked: int


@dataclass
class GradCheckReport:
    tolerance: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def failures(self) -> list[ParamCheck]:
        return [c for c in self.checks if c.max_rel_err > self.tolerance]

    def to_text(self) -> str:
        lines = [f"grad check: tolerance {self.tolerance:g}"]
        for c in self.checks:
            mark = "ok  " if c.max_rel_err <= self.tolerance else "FAIL"
            lines.append(
                f"  {mark} {c.name:<28s} max_rel_err {c.max_rel_err:.3e}"
                f" ({c.n_checked} entries)"
            )
        lines.append(f"result: {'PASS' if self.passed else 'FAIL'}"
                     f" (worst {self.max_rel_err:.3e})")
        return "\n".join(lines)


def grad_check(loss_fn, params, tolerance: float = 1e-4, seed: int = 0,
               step: float = 1e-5, samples_per_param: int = 24,
               abs_floor: float = 1e-7) -> GradCheckReport:
    """Compare backward() gradients with central differences.

    loss_fn rebuilds the scalar loss from the current parameter values;
    params maps names to leaf tensors. Entries whose analytic/numeric
    difference is below abs_floor count as exact to absorb difference
    noise around zero.
    """
    params = dict(params)
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        n = min(samples_per_param, flat.size)
        idxs = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn().item()
            flat[i] = orig - step
            lm = loss_fn().item()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            diff = abs(aflat[i] - numeric)
            if diff >= abs_floor:
                worst = max(worst, diff / max(abs(aflat[i]), abs(numeric)))
        report.checks.append(ParamCheck(name, worst, n))
    return report
