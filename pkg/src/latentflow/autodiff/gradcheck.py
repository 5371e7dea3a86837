"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .params import Parameter
from .tensor import Tensor, get_precision, topological_order


class NonFiniteError(FloatingPointError):
    def __init__(self, node: Tensor | None, message: str):
        self.node = node
        super().__init__(message)


def first_nonfinite(root: Tensor) -> Tensor | None:
    for node in topological_order(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def check_finite(loss: Tensor) -> None:
    if np.all(np.isfinite(loss.data)):
        return
    node = first_nonfinite(loss)
    where = f"op={node.op!r} shape={node.shape}" if node is not None else "unknown node"
    if isinstance(node, Parameter):
        where = f"parameter {node.name!r}"
    raise NonFiniteError(node, f"non-finite loss; first non-finite node: {where}")


@dataclass
class CoordResult:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    checked: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((c.rel_err for c in self.checked), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.checked) and self.max_rel_err <= self.tol

    def per_param(self) -> dict:
        out: dict = {}
        for c in self.checked:
            out[c.param] = max(out.get(c.param, 0.0), c.rel_err)
        return out

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e} "
            f"coords={len(self.checked)} excluded_nonsmooth={len(self.excluded)} "
            f"params={len(self.per_param())}"
        )


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-4,
    tol: float = 1e-3,
    samples_per_param: int = 4,
    seed: int = 0,
    kink_tol: float = 0.1,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    Coordinates where the one-sided differences disagree by more than
    ``kink_tol`` (relative) sit on a non-smooth point such as |x| at 0 or a
    ReLU hinge; they are recorded in ``excluded`` and not scored.
    """
    if get_precision() != "f64":
        raise RuntimeError("gradient_check needs 64-bit precision; wrap the call in precision('f64')")
    for p in params:
        p.grad = None
    loss = f()
    check_finite(loss)
    loss.backward()
    f0 = float(loss.data)
    analytic = {id(p): (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for p in params}

    def value() -> float:
        out = f()
        check_finite(out)
        return float(out.data)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for i, p in enumerate(params):
        name = getattr(p, "name", "") or f"param{i}"
        n = min(samples_per_param, p.size)
        for flat in rng.choice(p.size, size=n, replace=False):
            idx = np.unravel_index(int(flat), p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            fp = value()
            p.data[idx] = orig - eps
            fm = value()
            p.data[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
            a = float(analytic[id(p)][idx])
            res = CoordResult(name, tuple(int(k) for k in idx), a, numeric, relative_error(a, numeric, floor))
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor):
                report.excluded.append(res)
            else:
                report.checked.append(res)
    return report
