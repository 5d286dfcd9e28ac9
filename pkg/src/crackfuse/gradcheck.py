"""Finite-difference validation of analytic vector-Jacobian products.

The op under test is reduced to a scalar through a fixed random projection
u: s(inputs) = <u, f(inputs)>. The analytic gradient of s is vjp(u); the
numeric gradient is central differences with step h = cbrt(eps) * scale per
coordinate. Relative error uses max(1, |analytic|, |numeric|) as denominator
so near-zero gradients are judged on absolute error.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_FD_STEP = float(np.finfo(np.float64).eps) ** (1.0 / 3.0)


@dataclass
class InputCheck:
    name: str
    max_rel_err: float
    n_checked: int


@dataclass
class GradCheckReport:
    op_name: str
    tol: float
    max_rel_err: float
    inputs: list[InputCheck] = field(default_factory=list)
    passed: bool = False
    message: str = ""

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.op_name}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def grad_check(fn, inputs, tol=1e-5, seed=0, max_entries_per_input=None,
               name="op", input_names=None):
    """Compare fn's analytic vjp against central finite differences.

    fn(*inputs) must return (y, vjp) with vjp(u) giving one gradient per
    input, in order. inputs are float64 arrays. For large inputs,
    max_entries_per_input caps how many coordinates are perturbed (chosen
    by a fixed-seed draw, so the check is deterministic).
    """
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    if input_names is None:
        input_names = [f"arg{i}" for i in range(len(inputs))]
    report = GradCheckReport(op_name=name, tol=float(tol), max_rel_err=np.inf)

    y, vjp = fn(*inputs)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(np.shape(y))
    analytic = vjp(u)
    if len(analytic) != len(inputs):
        report.message = f"vjp returned {len(analytic)} gradients for {len(inputs)} inputs"
        return report
    for g in analytic:
        if not np.all(np.isfinite(g)):
            report.message = "non-finite analytic gradient"
            return report

    def scalar(args):
        out = fn(*args)[0]
        return float(np.sum(u * out))

    pick = np.random.default_rng(seed + 1)
    worst = 0.0
    for idx, (x, g, label) in enumerate(zip(inputs, analytic, input_names)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != x.shape:
            report.message = f"gradient shape {g.shape} != input shape {x.shape} for {label}"
            return report
        size = x.size
        if size == 0:
            report.inputs.append(InputCheck(label, 0.0, 0))
            continue
        if max_entries_per_input is not None and size > max_entries_per_input:
            entries = np.sort(pick.choice(size, size=max_entries_per_input, replace=False))
        else:
            entries = np.arange(size)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        max_err = 0.0
        for j in entries:
            h = _FD_STEP * max(1.0, abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + h
            sp = scalar(inputs)
            flat[j] = orig - h
            sm = scalar(inputs)
            flat[j] = orig
            num = (sp - sm) / (2.0 * h)
            if not np.isfinite(num):
                report.message = f"non-finite numeric gradient at {label}[{j}]"
                report.inputs.append(InputCheck(label, np.inf, len(entries)))
                return report
            err = abs(gflat[j] - num) / max(1.0, abs(gflat[j]), abs(num))
            max_err = max(max_err, err)
        worst = max(worst, max_err)
        report.inputs.append(InputCheck(label, max_err, len(entries)))

    report.max_rel_err = worst
    report.passed = worst <= tol
    return report
