"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import GradcheckError
from .tensor import Tensor


@dataclass
class GradcheckReport:
    """Outcome of one gradient check.

    ``max_rel_error`` is ``max |analytic - numeric|`` over checked entries,
    divided by ``max |numeric|`` over the same entries (gradient-scale relative).
    """

    name: str
    max_rel_error: float
    tol: float
    checked: int
    worst: tuple = ()
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: rel err {self.max_rel_error:.3e} (tol {self.tol:.0e}, "
                f"{self.checked} entries, worst {self.worst})")


def gradcheck(f, inputs: list[Tensor], eps: float = 1e-6, tol: float = 1e-4, *,
              max_entries: int | None = None, rng=None, name: str = "gradcheck",
              raise_on_fail: bool = False) -> GradcheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` against central differences.

    With ``max_entries`` set, a random subset of entries (per input) is
    perturbed; otherwise every entry is.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)  # entries are perturbed through a flat view
        t.grad = None
        t.requires_grad = True
    out = f(*inputs)
    out.backward()
    analytic, numeric, where = [], [], []
    for idx, t in enumerate(inputs):
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for e in entries:
            orig = flat[e]
            flat[e] = orig + eps
            fp = float(f(*inputs).data)
            flat[e] = orig - eps
            fm = float(f(*inputs).data)
            flat[e] = orig
            numeric.append((fp - fm) / (2 * eps))
            analytic.append(float(g.reshape(-1)[e]))
            where.append((idx, int(e)))
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    diff = np.abs(analytic - numeric)
    denom = max(np.abs(numeric).max(initial=0.0), 1e-12)
    rel = float(diff.max(initial=0.0) / denom)
    worst = ()
    if diff.size:
        w = int(np.argmax(diff))
        worst = (where[w], float(analytic[w]), float(numeric[w]))
    report = GradcheckReport(name, rel, tol, len(numeric), worst)
    if raise_on_fail and not report.passed:
        raise GradcheckError(report.line())
    return report


def directional_check(f, inputs: list[Tensor], eps: float = 1e-6, tol: float = 1e-4, *,
                      num_directions: int = 3, rng=None, name: str = "directional") -> GradcheckReport:
    """Jacobian-vector check: ``<grad f, v>`` against ``(f(x + eps v) - f(x - eps v)) / 2 eps``
    for random unit directions ``v`` spanning all inputs jointly."""
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    f(*inputs).backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    errs, worst = [], ()
    for d in range(num_directions):
        vs = [rng.standard_normal(t.shape) for t in inputs]
        norm = np.sqrt(np.sum([np.sum(v * v) for v in vs]))
        vs = [v / norm for v in vs]
        base = [t.data.copy() for t in inputs]
        for t, b, v in zip(inputs, base, vs):
            t.data[...] = b + eps * v
        fp = float(f(*inputs).data)
        for t, b, v in zip(inputs, base, vs):
            t.data[...] = b - eps * v
        fm = float(f(*inputs).data)
        for t, b in zip(inputs, base):
            t.data[...] = b
        num = (fp - fm) / (2 * eps)
        ana = float(np.sum([np.sum(g * v) for g, v in zip(grads, vs)]))
        err = abs(ana - num) / max(abs(num), abs(ana), 1e-12)
        errs.append(err)
        if err == max(errs):
            worst = (d, ana, num)
    return GradcheckReport(name, float(max(errs)), tol, num_directions, worst)
